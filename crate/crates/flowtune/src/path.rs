//! Mixture probability path: scheduler κ_t, conditional sampling `X_t | X_1`,
//! the conditional velocity, and the posterior-to-velocity map.
//!
//! The source distribution is the all-mask point mass. Each position copies
//! the data token with probability κ_t and stays masked otherwise; all
//! velocities carry the common coefficient κ̇_t/(1−κ_t), which is kept finite
//! by clipping evaluation times at `T − ε`.

use rand::Rng;

use crate::ctmc::RateEvaluation;
use crate::error::{Error, Result};
use crate::state::{SequenceState, StateSpaceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    Linear,
    Cosine,
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchedulerKind::Linear => write!(f, "linear"),
            SchedulerKind::Cosine => write!(f, "cosine"),
        }
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SchedulerKind::Linear),
            "cosine" => Ok(SchedulerKind::Cosine),
            other => Err(Error::Domain(format!("unknown scheduler kind `{other}`"))),
        }
    }
}

/// Monotone interpolation weight κ with κ_0 = 0 and κ_T → 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    pub horizon: f64,
    /// Evaluation times are clipped at `T − eps` to keep κ̇/(1−κ) finite.
    pub eps: f64,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, horizon: f64) -> Result<Self> {
        Self::with_eps(kind, horizon, 1e-3 * horizon)
    }

    pub fn with_eps(kind: SchedulerKind, horizon: f64, eps: f64) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Domain("scheduler horizon must be > 0".into()));
        }
        if !eps.is_finite() || eps <= 0.0 || eps >= horizon {
            return Err(Error::Domain(format!(
                "scheduler eps must lie in (0, T); got {eps}"
            )));
        }
        Ok(Self { kind, horizon, eps })
    }

    /// `(κ_t, κ̇_t)` at the clipped time.
    pub fn kappa(&self, t: f64) -> Result<(f64, f64)> {
        let t = self.clip(t)?;
        let s = t / self.horizon;
        Ok(match self.kind {
            SchedulerKind::Linear => (s, 1.0 / self.horizon),
            SchedulerKind::Cosine => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                (
                    (half_pi * s).sin(),
                    half_pi / self.horizon * (half_pi * s).cos(),
                )
            }
        })
    }

    /// The velocity coefficient κ̇_t/(1−κ_t), finite on the clipped domain.
    pub fn velocity_coeff(&self, t: f64) -> Result<f64> {
        let (kappa, kappa_dot) = self.kappa(t)?;
        Ok(kappa_dot / (1.0 - kappa))
    }

    fn clip(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t < -1e-12 || t > self.horizon + 1e-12 {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(t.clamp(0.0, self.horizon - self.eps))
    }
}

/// A draw of the conditional path `X_t | X_1 = x1`.
#[derive(Debug, Clone)]
pub struct ConditionalPathSample {
    pub t: f64,
    pub x1: SequenceState,
    pub x_t: SequenceState,
    /// Per-position flag: true where `x_t` copies the data token.
    pub copied: Vec<bool>,
}

/// Samples `X_t | X_1`: independently per position, the data token with
/// probability κ_t, the mask token otherwise.
pub fn sample_xt(
    space: &StateSpaceSpec,
    sched: &Scheduler,
    x1: &SequenceState,
    t: f64,
    rng: &mut impl Rng,
) -> Result<ConditionalPathSample> {
    let mask = space
        .mask_token()
        .ok_or_else(|| Error::Space("mixture path requires a mask token".into()))?;
    let (kappa, _) = sched.kappa(t)?;
    let mut tokens = Vec::with_capacity(x1.len());
    let mut copied = Vec::with_capacity(x1.len());
    for &tok in &x1.tokens {
        let copy = rng.gen::<f64>() < kappa;
        tokens.push(if copy { tok } else { mask });
        copied.push(copy);
    }
    Ok(ConditionalPathSample {
        t,
        x1: x1.clone(),
        x_t: SequenceState::new(tokens),
        copied,
    })
}

/// Conditional mixture-path velocity: rate κ̇/(1−κ) toward `x1_i` wherever
/// `x_i ≠ x1_i`, zero elsewhere.
pub fn conditional_velocity(
    space: &StateSpaceSpec,
    sched: &Scheduler,
    x1: &SequenceState,
    x: &SequenceState,
    t: f64,
) -> Result<RateEvaluation> {
    let coeff = sched.velocity_coeff(t)?;
    let v = space.full_vocab() as usize;
    let mut off = vec![vec![0.0; v]; space.positions];
    for i in 0..space.positions {
        if x.tokens[i] != x1.tokens[i] {
            off[i][x1.tokens[i] as usize - 1] = coeff;
        }
    }
    Ok(RateEvaluation::from_off_diagonal(x, off))
}

/// Marginalized mixture-path velocity from per-position posteriors over data
/// tokens: off-diagonal rate `κ̇/(1−κ) · p_{1|t}(y|x)` toward `y ≠ x_i`.
pub fn posterior_to_velocity(
    space: &StateSpaceSpec,
    sched: &Scheduler,
    posterior: &[Vec<f64>],
    x: &SequenceState,
    t: f64,
) -> Result<RateEvaluation> {
    let coeff = sched.velocity_coeff(t)?;
    posterior_to_velocity_with_coeff(space, posterior, x, coeff)
}

pub(crate) fn posterior_to_velocity_with_coeff(
    space: &StateSpaceSpec,
    posterior: &[Vec<f64>],
    x: &SequenceState,
    coeff: f64,
) -> Result<RateEvaluation> {
    if posterior.len() != space.positions {
        return Err(Error::Space(format!(
            "posterior has {} rows, expected {}",
            posterior.len(),
            space.positions
        )));
    }
    let v = space.full_vocab() as usize;
    let m = space.vocab as usize;
    let mut off = vec![vec![0.0; v]; space.positions];
    for i in 0..space.positions {
        let row = &posterior[i];
        if row.len() != m {
            return Err(Error::Space(format!(
                "posterior row {i} has {} entries, expected M={m}",
                row.len()
            )));
        }
        let cur = x.tokens[i] as usize - 1;
        let mut sum = 0.0;
        for (y, &p) in row.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::Numeric(format!(
                    "malformed posterior entry {p} at position {i}, token {}",
                    y + 1
                )));
            }
            sum += p;
            if y != cur {
                off[i][y] = coeff * p;
            }
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "posterior row {i} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(RateEvaluation::from_off_diagonal(x, off))
}

/// Applies the no-remasking override: already-unmasked positions get a point
/// posterior on their current token, so their rates vanish and the position
/// stays frozen. Masked positions keep the model posterior.
pub fn effective_posterior(
    space: &StateSpaceSpec,
    posterior: &[Vec<f64>],
    x: &SequenceState,
) -> Vec<Vec<f64>> {
    let m = space.vocab as usize;
    let mask = space.mask_token();
    posterior
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if mask == Some(x.tokens[i]) {
                row.clone()
            } else {
                let mut delta = vec![0.0; m];
                delta[x.tokens[i] as usize - 1] = 1.0;
                delta
            }
        })
        .collect()
}
