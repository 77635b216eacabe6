//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SHNN"
//! version    u32
//! n_sizes    u32
//! sizes      n_sizes × u32
//! hidden     u8       0 = rectifier
//! output     u8       0 = tanh, 1 = linear, 2 = softmax
//! log_std    u8       0 = absent, 1 = present
//! n_params   u64
//! params     n_params × f64   per layer weights (row-major) then biases, then log-std
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MlpParams, NnError, OutputActivation};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SHNN";
const HIDDEN_RELU: u8 = 0;

pub fn write_checkpoint<W: Write>(params: &MlpParams, mut w: W) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &params.layer_sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&[
        HIDDEN_RELU,
        params.output_activation.tag(),
        params.log_std.is_some() as u8,
    ])?;
    w.write_all(&(params.num_params() as u64).to_le_bytes())?;
    for s in params.slices() {
        for v in s {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NnError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| NnError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<MlpParams, NnError> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n_sizes = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(NnError::Checkpoint(format!(
            "implausible layer count {n_sizes}"
        )));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        let s = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if s == 0 {
            return Err(NnError::Checkpoint("zero-width layer".into()));
        }
        sizes.push(s);
    }
    let [hidden, output, has_log_std] = read_array::<3, _>(&mut r)?;
    if hidden != HIDDEN_RELU {
        return Err(NnError::Checkpoint(format!(
            "unknown hidden activation {hidden}"
        )));
    }
    let output = OutputActivation::from_tag(output)
        .ok_or_else(|| NnError::Checkpoint(format!("unknown output activation {output}")))?;
    if has_log_std > 1 {
        return Err(NnError::Checkpoint(format!(
            "bad log-std flag {has_log_std}"
        )));
    }
    let mut params = MlpParams::zeros(&sizes, output, has_log_std == 1);
    let n_params = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if n_params != params.num_params() {
        return Err(NnError::Checkpoint(format!(
            "header declares {n_params} parameters, layout needs {}",
            params.num_params()
        )));
    }
    let mut values = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        values.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    params.set_flat(&values)?;
    Ok(params)
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<(), NnError> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams, NnError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::RngStream;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let p = MlpParams::zeros(&[2, 3], OutputActivation::Tanh, true);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SHNN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[20..23], &[0, 0, 1]);
        assert_eq!(buf.len(), 23 + 8 + 8 * (6 + 3 + 3));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = MlpParams::zeros(&[2, 3], OutputActivation::Linear, false);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = buf;
        bad[21] = 9;
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6, out in 1usize..4, act in 0u8..3, std in any::<bool>()) {
            let mut rng = RngStream::new(seed);
            let mut p = MlpParams::init(&[3, hidden, out], OutputActivation::from_tag(act).unwrap(), std, 0.5, &mut rng);
            if let Some(s) = &mut p.log_std {
                s.iter_mut().for_each(|v| *v = rng.standard_normal());
            }
            let mut buf = Vec::new();
            write_checkpoint(&p, &mut buf).unwrap();
            let q = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(&q, &p);
            let x = [0.1, -0.4, 0.8];
            let a: Vec<u64> = p.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
