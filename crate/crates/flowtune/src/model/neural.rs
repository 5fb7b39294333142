//! Neural backend: per-token embeddings + sinusoidal time features
//! (+ optional condition embedding) through two tanh hidden layers to
//! `d × M` logits. Small enough for CPU, big enough to exercise the full
//! training pipeline.

use rand_chacha::ChaCha8Rng;

use super::tabular::normal;
use super::{descriptor_field, BackendCache, GradientBuffer};
use crate::error::{Error, Result};
use crate::state::{Condition, SequenceState, StateSpaceSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralArch {
    pub space: StateSpaceSpec,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Number of sinusoidal time features (even, sin/cos pairs).
    pub time_features: usize,
    pub horizon: f64,
    pub n_conditions: u32,
    pub cond_dim: usize,
}

impl NeuralArch {
    pub fn new(
        space: StateSpaceSpec,
        embed_dim: usize,
        hidden_dim: usize,
        time_features: usize,
        horizon: f64,
        n_conditions: u32,
        cond_dim: usize,
    ) -> Result<Self> {
        if embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::Domain("embed/hidden widths must be >= 1".into()));
        }
        if time_features < 2 || !time_features.is_multiple_of(2) {
            return Err(Error::Domain(
                "time_features must be an even count >= 2".into(),
            ));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Domain("neural horizon must be > 0".into()));
        }
        if n_conditions > 0 && cond_dim == 0 {
            return Err(Error::Domain(
                "conditional model needs cond_dim >= 1".into(),
            ));
        }
        Ok(Self {
            space,
            embed_dim,
            hidden_dim,
            time_features,
            horizon,
            n_conditions,
            cond_dim,
        })
    }

    fn in_dim(&self) -> usize {
        self.space.positions * self.embed_dim
            + self.time_features
            + if self.n_conditions > 0 { self.cond_dim } else { 0 }
    }

    fn out_dim(&self) -> usize {
        self.space.positions * self.space.vocab as usize
    }

    // parameter layout: [token_emb | cond_emb | w1 | b1 | w2 | b2 | w3 | b3]
    fn token_emb_len(&self) -> usize {
        self.space.full_vocab() as usize * self.embed_dim
    }

    fn cond_emb_len(&self) -> usize {
        self.n_conditions as usize * self.cond_dim
    }

    fn offsets(&self) -> [usize; 8] {
        let h = self.hidden_dim;
        let t_emb = 0;
        let c_emb = t_emb + self.token_emb_len();
        let w1 = c_emb + self.cond_emb_len();
        let b1 = w1 + self.in_dim() * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * self.out_dim();
        [t_emb, c_emb, w1, b1, w2, b2, w3, b3]
    }

    pub fn n_params(&self) -> usize {
        let [.., b3] = self.offsets();
        b3 + self.out_dim()
    }

    fn time_feature_vec(&self, t: f64) -> Vec<f64> {
        let frac = (t / self.horizon).clamp(0.0, 1.0);
        let mut out = Vec::with_capacity(self.time_features);
        for j in 0..self.time_features / 2 {
            let omega = 2.0 * std::f64::consts::PI * (1 << j) as f64;
            out.push((omega * frac).sin());
            out.push((omega * frac).cos());
        }
        out
    }

    pub(super) fn forward(
        &self,
        params: &[f64],
        x: &SequenceState,
        t: f64,
        c: Option<Condition>,
    ) -> Result<(Vec<f64>, BackendCache)> {
        self.space.check_state(x)?;
        let [t_emb, c_emb, w1, b1, w2, b2, w3, b3] = self.offsets();
        let h = self.hidden_dim;
        let in_dim = self.in_dim();
        let out_dim = self.out_dim();

        let mut input = Vec::with_capacity(in_dim);
        for &tok in &x.tokens {
            let base = t_emb + (tok as usize - 1) * self.embed_dim;
            input.extend_from_slice(&params[base..base + self.embed_dim]);
        }
        input.extend(self.time_feature_vec(t));
        if self.n_conditions > 0 {
            let Condition(tag) = c.expect("condition checked by caller");
            let base = c_emb + tag as usize * self.cond_dim;
            input.extend_from_slice(&params[base..base + self.cond_dim]);
        }
        debug_assert_eq!(input.len(), in_dim);

        let mut h1 = vec![0.0; h];
        for r in 0..h {
            let mut acc = params[b1 + r];
            let row = &params[w1 + r * in_dim..w1 + (r + 1) * in_dim];
            for (w, u) in row.iter().zip(&input) {
                acc += w * u;
            }
            h1[r] = acc.tanh();
        }
        let mut h2 = vec![0.0; h];
        for r in 0..h {
            let mut acc = params[b2 + r];
            let row = &params[w2 + r * h..w2 + (r + 1) * h];
            for (w, u) in row.iter().zip(&h1) {
                acc += w * u;
            }
            h2[r] = acc.tanh();
        }
        let mut logits = vec![0.0; out_dim];
        for o in 0..out_dim {
            let mut acc = params[b3 + o];
            let row = &params[w3 + o * h..w3 + (o + 1) * h];
            for (w, u) in row.iter().zip(&h2) {
                acc += w * u;
            }
            logits[o] = acc;
        }
        Ok((
            logits,
            BackendCache::Neural {
                input,
                h1,
                h2,
                tokens: x.tokens.clone(),
                cond: c.map(|Condition(tag)| tag),
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        h1: &[f64],
        h2: &[f64],
        tokens: &[u32],
        cond: Option<u32>,
        d_logits: &[f64],
        buf: &mut GradientBuffer,
    ) {
        let [t_emb, c_emb, w1, b1, w2, b2, w3, b3] = self.offsets();
        let h = self.hidden_dim;
        let in_dim = self.in_dim();
        let out_dim = self.out_dim();

        // output layer
        let mut d_h2 = vec![0.0; h];
        for o in 0..out_dim {
            let g = d_logits[o];
            if g == 0.0 {
                continue;
            }
            buf.grad[b3 + o] += g;
            let row = w3 + o * h;
            for r in 0..h {
                buf.grad[row + r] += g * h2[r];
                d_h2[r] += g * params[row + r];
            }
        }
        // second hidden layer (tanh)
        let mut d_h1 = vec![0.0; h];
        for r in 0..h {
            let g = d_h2[r] * (1.0 - h2[r] * h2[r]);
            if g == 0.0 {
                continue;
            }
            buf.grad[b2 + r] += g;
            let row = w2 + r * h;
            for k in 0..h {
                buf.grad[row + k] += g * h1[k];
                d_h1[k] += g * params[row + k];
            }
        }
        // first hidden layer (tanh)
        let mut d_input = vec![0.0; in_dim];
        for r in 0..h {
            let g = d_h1[r] * (1.0 - h1[r] * h1[r]);
            if g == 0.0 {
                continue;
            }
            buf.grad[b1 + r] += g;
            let row = w1 + r * in_dim;
            for k in 0..in_dim {
                buf.grad[row + k] += g * input[k];
                d_input[k] += g * params[row + k];
            }
        }
        // embedding scatter
        for (i, &tok) in tokens.iter().enumerate() {
            let base = t_emb + (tok as usize - 1) * self.embed_dim;
            let seg = &d_input[i * self.embed_dim..(i + 1) * self.embed_dim];
            for (k, &g) in seg.iter().enumerate() {
                buf.grad[base + k] += g;
            }
        }
        if self.n_conditions > 0 {
            let tag = cond.expect("conditional cache carries a tag") as usize;
            let base = c_emb + tag * self.cond_dim;
            let start = self.space.positions * self.embed_dim + self.time_features;
            for k in 0..self.cond_dim {
                buf.grad[base + k] += d_input[start + k];
            }
        }
    }

    pub(super) fn random_params(&self, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        let [_, _, w1, b1, w2, b2, w3, _b3] = self.offsets();
        let n = self.n_params();
        let mut p = vec![0.0; n];
        let emb_end = self.token_emb_len() + self.cond_emb_len();
        for v in &mut p[..emb_end] {
            *v = scale * normal(rng);
        }
        let s1 = scale / (self.in_dim() as f64).sqrt();
        for v in &mut p[w1..b1] {
            *v = s1 * normal(rng);
        }
        let s2 = scale / (self.hidden_dim as f64).sqrt();
        for v in &mut p[w2..b2] {
            *v = s2 * normal(rng);
        }
        // small output layer: initial posteriors start near uniform
        let s3 = 0.01 * scale / (self.hidden_dim as f64).sqrt();
        for v in &mut p[w3..w3 + self.hidden_dim * self.out_dim()] {
            *v = s3 * normal(rng);
        }
        p
    }

    pub fn descriptor(&self) -> String {
        format!(
            "backend=neural\nd={}\nvocab={}\nmask={}\nembed_dim={}\nhidden_dim={}\ntime_features={}\nhorizon={}\nconditions={}\ncond_dim={}\n",
            self.space.positions,
            self.space.vocab,
            u8::from(self.space.has_mask),
            self.embed_dim,
            self.hidden_dim,
            self.time_features,
            self.horizon,
            self.n_conditions,
            self.cond_dim
        )
    }

    pub(super) fn from_fields(
        fields: &std::collections::BTreeMap<String, String>,
    ) -> Result<Self> {
        let d: usize = descriptor_field(fields, "d")?;
        let vocab: u32 = descriptor_field(fields, "vocab")?;
        let mask: u8 = descriptor_field(fields, "mask")?;
        let space = StateSpaceSpec::new(d, vocab, mask != 0)
            .map_err(|e| Error::Checkpoint(format!("bad space in descriptor: {e}")))?;
        NeuralArch::new(
            space,
            descriptor_field(fields, "embed_dim")?,
            descriptor_field(fields, "hidden_dim")?,
            descriptor_field(fields, "time_features")?,
            descriptor_field(fields, "horizon")?,
            descriptor_field(fields, "conditions")?,
            descriptor_field(fields, "cond_dim")?,
        )
    }
}
