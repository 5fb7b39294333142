//! The differentiable posterior model `p_{1|t}^θ` with exact reverse-mode
//! gradients, a tabular backend for oracle-grade checks and a small neural
//! backend for realistic runs, plus optimizer and checkpoint support.
//!
//! Every loss in the crate reduces to a scalar function of the per-position
//! posterior PMFs, so gradient flow is split in two stages: the loss computes
//! `dL/d probs` analytically and [`PosteriorModel::backward`] chains it
//! through the floor-renormalize step, the softmax, and the backend into a
//! flat [`GradientBuffer`].

mod checkpoint;
mod neural;
mod optimizer;
mod tabular;

pub use checkpoint::{check_architecture, load_checkpoint, save_checkpoint, save_checkpoint_with_meta};
pub use neural::NeuralArch;
pub use optimizer::{Direction, OptimizerKind, OptimizerState};
pub use tabular::TabularArch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::state::{Condition, SequenceState, StateSpaceSpec};

/// Posterior PMF entries are floored here and renormalized, so every
/// log-probability in any objective stays above `ln(1e-12)`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Tabular(TabularArch),
    Neural(NeuralArch),
}

impl Architecture {
    pub fn space(&self) -> &StateSpaceSpec {
        match self {
            Architecture::Tabular(a) => &a.space,
            Architecture::Neural(a) => &a.space,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Architecture::Tabular(a) => a.horizon,
            Architecture::Neural(a) => a.horizon,
        }
    }

    pub fn n_conditions(&self) -> u32 {
        match self {
            Architecture::Tabular(a) => a.n_conditions,
            Architecture::Neural(a) => a.n_conditions,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Architecture::Tabular(a) => a.n_params(),
            Architecture::Neural(a) => a.n_params(),
        }
    }

    /// Stable key=value descriptor used by checkpoints and error messages.
    pub fn descriptor(&self) -> String {
        match self {
            Architecture::Tabular(a) => a.descriptor(),
            Architecture::Neural(a) => a.descriptor(),
        }
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let fields = parse_descriptor(text)?;
        match fields.get("backend").map(String::as_str) {
            Some("tabular") => Ok(Architecture::Tabular(TabularArch::from_fields(&fields)?)),
            Some("neural") => Ok(Architecture::Neural(NeuralArch::from_fields(&fields)?)),
            other => Err(Error::Checkpoint(format!(
                "unknown backend {other:?} in architecture descriptor"
            ))),
        }
    }
}

pub(crate) fn parse_descriptor(text: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Checkpoint(format!("malformed descriptor line `{line}`"))
        })?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(fields)
}

pub(crate) fn descriptor_field<T: std::str::FromStr>(
    fields: &std::collections::BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    fields
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("descriptor missing field `{key}`")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("descriptor field `{key}` has a bad value")))
}

/// Flat gradient accumulator matching the parameter vector length.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub grad: Vec<f64>,
    pub contributions: usize,
}

impl GradientBuffer {
    pub fn zeros(n_params: usize) -> Self {
        Self {
            grad: vec![0.0; n_params],
            contributions: 0,
        }
    }

    pub fn zero(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.contributions = 0;
    }

    pub fn add_from(&mut self, other: &GradientBuffer) {
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.contributions += other.contributions;
    }

    pub fn scale(&mut self, factor: f64) {
        self.grad.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Backend-specific context saved by a forward pass.
#[derive(Debug, Clone)]
enum BackendCache {
    Tabular {
        /// Base offset of the (condition, bin, state) logit block.
        offset: usize,
    },
    Neural {
        input: Vec<f64>,
        h1: Vec<f64>,
        h2: Vec<f64>,
        tokens: Vec<u32>,
        cond: Option<u32>,
    },
}

/// Activations needed for an exact backward pass through one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// Per-position softmax outputs before floor-and-renormalize.
    softmax: Vec<Vec<f64>>,
    backend: BackendCache,
}

/// A forward evaluation: per-position PMFs over the `M` data tokens plus the
/// cache required for `backward`.
#[derive(Debug, Clone)]
pub struct PosteriorOutput {
    pub probs: Vec<Vec<f64>>,
    pub cache: ForwardCache,
}

/// The learned object: a flat parameter vector behind one of two backends.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    pub arch: Architecture,
    params: Vec<f64>,
    version: u64,
}

impl PosteriorModel {
    /// All-zero parameters: every posterior is uniform.
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.n_params();
        Self {
            arch,
            params: vec![0.0; n],
            version: 0,
        }
    }

    /// Seeded random initialization. The tabular backend gets i.i.d. normal
    /// logits of the given scale; the neural backend uses fan-in scaling with
    /// a small output layer so initial posteriors start near uniform.
    pub fn random(arch: Architecture, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match &arch {
            Architecture::Tabular(a) => a.random_params(&mut rng, scale),
            Architecture::Neural(a) => a.random_params(&mut rng, scale),
        };
        Self {
            arch,
            params,
            version: 0,
        }
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.n_params() {
            return Err(Error::Checkpoint(format!(
                "parameter vector length {} does not match architecture ({} expected)",
                params.len(),
                arch.n_params()
            )));
        }
        Ok(Self {
            arch,
            params,
            version: 0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// Snapshot identifier; bumped by every parameter mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn space(&self) -> &StateSpaceSpec {
        self.arch.space()
    }

    /// Per-position posteriors over data tokens at `(x, t, c)`, deterministic
    /// in the parameters, with cached activations for `backward`.
    pub fn forward(
        &self,
        x: &SequenceState,
        t: f64,
        c: Option<Condition>,
    ) -> Result<PosteriorOutput> {
        self.check_condition(c)?;
        let (logits, backend) = match &self.arch {
            Architecture::Tabular(a) => a.forward(&self.params, x, t, c)?,
            Architecture::Neural(a) => a.forward(&self.params, x, t, c)?,
        };
        let m = self.space().vocab as usize;
        let d = self.space().positions;
        debug_assert_eq!(logits.len(), d * m);
        let mut softmax = Vec::with_capacity(d);
        let mut probs = Vec::with_capacity(d);
        for i in 0..d {
            let row = &logits[i * m..(i + 1) * m];
            let s = stable_softmax(row);
            let p = floor_renormalize(&s);
            softmax.push(s);
            probs.push(p);
        }
        Ok(PosteriorOutput {
            probs,
            cache: ForwardCache {
                version: self.version,
                softmax,
                backend,
            },
        })
    }

    /// Chains `dL/d probs` through floor-renormalize, softmax, and the
    /// backend, accumulating the exact parameter gradient into `buf`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_probs: &[Vec<f64>],
        buf: &mut GradientBuffer,
    ) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache_version: cache.version,
                model_version: self.version,
            });
        }
        if buf.grad.len() != self.params.len() {
            return Err(Error::Domain(format!(
                "gradient buffer length {} does not match {} parameters",
                buf.grad.len(),
                self.params.len()
            )));
        }
        let d = self.space().positions;
        let m = self.space().vocab as usize;
        if d_probs.len() != d || d_probs.iter().any(|row| row.len() != m) {
            return Err(Error::Domain("upstream gradient has wrong shape".into()));
        }
        // d logits, flattened d*M
        let mut d_logits = vec![0.0; d * m];
        for i in 0..d {
            let s = &cache.softmax[i];
            let g = &d_probs[i];
            // floor-renormalize backward: r = q / S with q = max(s, floor)
            let q: Vec<f64> = s.iter().map(|&v| v.max(PROB_FLOOR)).collect();
            let sum: f64 = q.iter().sum();
            let r: Vec<f64> = q.iter().map(|&v| v / sum).collect();
            let dot: f64 = g.iter().zip(&r).map(|(a, b)| a * b).sum();
            let d_s: Vec<f64> = (0..m)
                .map(|j| {
                    if s[j] > PROB_FLOOR {
                        (g[j] - dot) / sum
                    } else {
                        0.0
                    }
                })
                .collect();
            // softmax backward
            let dot_s: f64 = d_s.iter().zip(s).map(|(a, b)| a * b).sum();
            for j in 0..m {
                d_logits[i * m + j] = s[j] * (d_s[j] - dot_s);
            }
        }
        match (&self.arch, &cache.backend) {
            (Architecture::Tabular(a), BackendCache::Tabular { offset }) => {
                a.backward(*offset, &d_logits, buf);
            }
            (Architecture::Neural(a), BackendCache::Neural { input, h1, h2, tokens, cond }) => {
                a.backward(&self.params, input, h1, h2, tokens, *cond, &d_logits, buf);
            }
            _ => {
                return Err(Error::Domain(
                    "forward cache backend does not match model backend".into(),
                ))
            }
        }
        buf.contributions += 1;
        Ok(())
    }

    /// Applies one optimizer step from the accumulated gradient, zeroes the
    /// buffer, and bumps the parameter version.
    pub fn optimizer_step(
        &mut self,
        opt: &mut OptimizerState,
        buf: &mut GradientBuffer,
    ) -> Result<()> {
        if buf.grad.len() != self.params.len() {
            return Err(Error::Domain(
                "gradient buffer does not match parameter vector".into(),
            ));
        }
        for &g in &buf.grad {
            if !g.is_finite() {
                return Err(Error::Numeric("non-finite gradient in optimizer step".into()));
            }
        }
        opt.step(&mut self.params, &buf.grad)?;
        buf.zero();
        self.version += 1;
        Ok(())
    }

    fn check_condition(&self, c: Option<Condition>) -> Result<()> {
        let n = self.arch.n_conditions();
        match (n, c) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::Domain(
                "condition passed to an unconditional model".into(),
            )),
            (_, None) => Err(Error::Domain(
                "conditional model requires a condition tag".into(),
            )),
            (n, Some(Condition(tag))) if tag < n => Ok(()),
            (n, Some(Condition(tag))) => Err(Error::Domain(format!(
                "condition tag {tag} outside 0..{n}"
            ))),
        }
    }
}

fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn floor_renormalize(probs: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = probs.iter().map(|&p| p.max(PROB_FLOOR)).collect();
    let sum: f64 = q.iter().sum();
    q.into_iter().map(|p| p / sum).collect()
}
