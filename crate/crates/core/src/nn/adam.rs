use super::{Gradients, MlpParams, NnError};

/// Bias-corrected Adam. Descends along the supplied gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
    pub stepsize: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, stepsize: f64) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
            stepsize,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<(), NnError> {
        let mut p = params.slices_mut();
        let g = grads.slices();
        let mut m = self.m.slices_mut();
        let mut v = self.v.slices_mut();
        if p.len() != g.len()
            || p.len() != m.len()
            || p.iter().zip(&g).any(|(a, b)| a.len() != b.len())
        {
            return Err(NnError::Shape(
                "optimizer state does not match parameters".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..p.len() {
            for i in 0..p[k].len() {
                let gi = g[k][i];
                m[k][i] = self.beta1 * m[k][i] + (1.0 - self.beta1) * gi;
                v[k][i] = self.beta2 * v[k][i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[k][i] / c1;
                let v_hat = v[k][i] / c2;
                p[k][i] -= self.stepsize * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
