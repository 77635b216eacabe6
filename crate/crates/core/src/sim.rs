//! Shepherding dynamics: overdamped Langevin targets repelled by
//! single-integrator herders, integrated with Euler–Maruyama.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this separation the repulsion direction is undefined and the force is zero.
pub const OVERLAP_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("state has {got_herders} herders / {got_targets} targets, parameters expect {want_herders} / {want_targets}")]
    ShapeMismatch {
        got_herders: usize,
        got_targets: usize,
        want_herders: usize,
        want_targets: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Componentwise projection onto `[-r, r]²`.
    pub fn clamp_square(self, r: f64) -> Vec2 {
        Vec2::new(self.x.clamp(-r, r), self.y.clamp(-r, r))
    }

    /// Rescales to norm `max` when longer, identity otherwise.
    pub fn saturate(self, max: f64) -> Vec2 {
        let n = self.norm();
        if n > max {
            self * (max / n)
        } else {
            self
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, s: f64) -> Vec2 {
        Vec2::new(self.x / s, self.y / s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Physical and model constants of the herding scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub goal_radius: f64,
    pub arena_half_width: f64,
    pub herder_max_speed: f64,
    #[serde(rename = "D")]
    pub diffusion: f64,
    #[serde(rename = "lambda")]
    pub repulsion_range: f64,
    #[serde(rename = "kT")]
    pub repulsion_gain: f64,
    pub dt: f64,
    pub buffer_fraction: f64,
    pub num_herders: usize,
    pub num_targets: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            goal_radius: 5.0,
            arena_half_width: 25.0,
            herder_max_speed: 8.0,
            diffusion: 0.5,
            repulsion_range: 2.5,
            repulsion_gain: 3.0,
            dt: 0.05,
            buffer_fraction: 0.1,
            num_herders: 1,
            num_targets: 1,
        }
    }
}

impl SimParams {
    /// Nominal parameters with the given population sizes.
    pub fn nominal(num_herders: usize, num_targets: usize) -> Self {
        Self {
            num_herders,
            num_targets,
            ..Self::default()
        }
    }

    /// Maximum escape speed of a target pushed by a single herder.
    pub fn target_escape_speed(&self) -> f64 {
        self.repulsion_gain * self.repulsion_range
    }

    /// Radius of the buffered goal disk used for success accounting.
    pub fn buffered_goal_radius(&self) -> f64 {
        (1.0 + self.buffer_fraction) * self.goal_radius
    }

    /// Checks every hard invariant and logs the soft ones.
    pub fn validate(self) -> Result<Self, SimError> {
        let positive = [
            ("goal_radius", self.goal_radius),
            ("arena_half_width", self.arena_half_width),
            ("herder_max_speed", self.herder_max_speed),
            ("lambda", self.repulsion_range),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::InvalidParameter {
                    name,
                    reason: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        let non_negative = [
            ("D", self.diffusion),
            ("kT", self.repulsion_gain),
            ("buffer_fraction", self.buffer_fraction),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidParameter {
                    name,
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if self.num_herders == 0 {
            return Err(SimError::InvalidParameter {
                name: "num_herders",
                reason: "must be at least 1".into(),
            });
        }
        if self.num_targets == 0 {
            return Err(SimError::InvalidParameter {
                name: "num_targets",
                reason: "must be at least 1".into(),
            });
        }
        if self.herder_max_speed <= self.target_escape_speed() {
            return Err(SimError::InvalidParameter {
                name: "herder_max_speed",
                reason: format!(
                    "v_H = {} must exceed kT*lambda = {} (herders must outrun targets)",
                    self.herder_max_speed,
                    self.target_escape_speed()
                ),
            });
        }
        if self.buffered_goal_radius() >= self.arena_half_width {
            return Err(SimError::InvalidParameter {
                name: "goal_radius",
                reason: format!(
                    "(1+eps)*rho_G = {} must be smaller than R = {}",
                    self.buffered_goal_radius(),
                    self.arena_half_width
                ),
            });
        }
        if let Some(w) = self.weak_repulsion_warning() {
            log::warn!("{w}");
        }
        Ok(self)
    }

    /// Repulsion should dominate diffusion: kT*lambda^2 >> D. Flagged below a factor of 10.
    pub fn weak_repulsion_warning(&self) -> Option<String> {
        let strength = self.repulsion_gain * self.repulsion_range * self.repulsion_range;
        (strength < 10.0 * self.diffusion).then(|| {
            format!(
                "kT*lambda^2 = {strength} is not much larger than D = {}; noise may dominate repulsion",
                self.diffusion
            )
        })
    }
}

/// Herder and target positions at a given step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub herders: Vec<Vec2>,
    pub targets: Vec<Vec2>,
    pub step_index: usize,
}

impl WorldState {
    pub fn check_shape(&self, params: &SimParams) -> Result<(), SimError> {
        if self.herders.len() != params.num_herders || self.targets.len() != params.num_targets {
            return Err(SimError::ShapeMismatch {
                got_herders: self.herders.len(),
                got_targets: self.targets.len(),
                want_herders: params.num_herders,
                want_targets: params.num_targets,
            });
        }
        Ok(())
    }
}

/// Seeded random source. Streams with the same `(seed, stream)` produce identical sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream of `seed`, used to keep noise, initial conditions
    /// and action sampling decoupled.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Harmonic repulsion `(λ - |x|) x̂` inside range `λ`, zero outside.
pub fn repulsion(lambda: f64, x: Vec2) -> Vec2 {
    let d = x.norm();
    if d < OVERLAP_EPS || d > lambda {
        return Vec2::ZERO;
    }
    x * ((lambda - d) / d)
}

/// One Euler–Maruyama step of every target. Noise is drawn in target order.
pub fn step_targets(state: &WorldState, params: &SimParams, rng: &mut RngStream) -> Vec<Vec2> {
    let noise_scale = (2.0 * params.diffusion * params.dt).sqrt();
    let r = params.arena_half_width;
    state
        .targets
        .iter()
        .map(|&t| {
            let mut drift = Vec2::ZERO;
            for &h in &state.herders {
                drift += repulsion(params.repulsion_range, t - h);
            }
            let xi = Vec2::new(rng.standard_normal(), rng.standard_normal());
            let next = t + drift * (params.dt * params.repulsion_gain) + xi * noise_scale;
            next.clamp_square(r)
        })
        .collect()
}

/// Single-integrator herder step with the command saturated at `v_H`.
pub fn step_herder(h: Vec2, u: Vec2, params: &SimParams) -> Vec2 {
    let v = u.saturate(params.herder_max_speed);
    (h + v * params.dt).clamp_square(params.arena_half_width)
}

/// Area-uniform point in the disk of radius `radius`.
pub fn sample_in_disk(radius: f64, rng: &mut RngStream) -> Vec2 {
    let rho = radius * rng.uniform().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.uniform();
    Vec2::new(rho * theta.cos(), rho * theta.sin())
}

/// Herders first, then targets, all i.i.d. uniform in the disk of radius `R`.
pub fn sample_initial(params: &SimParams, rng: &mut RngStream) -> WorldState {
    let r = params.arena_half_width;
    let herders = (0..params.num_herders)
        .map(|_| sample_in_disk(r, rng))
        .collect();
    let targets = (0..params.num_targets)
        .map(|_| sample_in_disk(r, rng))
        .collect();
    WorldState {
        herders,
        targets,
        step_index: 0,
    }
}

/// Advances the world one step: targets react to the current herder positions,
/// herders then move under the given commands.
pub fn step_world(
    state: &WorldState,
    commands: &[Vec2],
    params: &SimParams,
    rng: &mut RngStream,
) -> WorldState {
    debug_assert_eq!(commands.len(), state.herders.len());
    let targets = step_targets(state, params, rng);
    let herders = state
        .herders
        .iter()
        .zip(commands)
        .map(|(&h, &u)| step_herder(h, u, params))
        .collect();
    WorldState {
        herders,
        targets,
        step_index: state.step_index + 1,
    }
}
