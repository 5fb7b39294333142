//! Tabular backend: one logit per (condition, time-bin, joint state,
//! position, token). Only viable on enumerable spaces, where it makes exact
//! enumeration-based gradients possible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{descriptor_field, BackendCache, GradientBuffer};
use crate::error::{Error, Result};
use crate::state::{Condition, SequenceState, StateSpaceSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularArch {
    pub space: StateSpaceSpec,
    pub time_bins: usize,
    pub horizon: f64,
    /// 0 = unconditional.
    pub n_conditions: u32,
}

impl TabularArch {
    pub fn new(
        space: StateSpaceSpec,
        time_bins: usize,
        horizon: f64,
        n_conditions: u32,
    ) -> Result<Self> {
        if time_bins == 0 {
            return Err(Error::Domain("tabular backend needs >= 1 time bin".into()));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Domain("tabular horizon must be > 0".into()));
        }
        space.enumerable_size()?;
        Ok(Self {
            space,
            time_bins,
            horizon,
            n_conditions,
        })
    }

    pub fn n_params(&self) -> usize {
        let states = self.space.size() as usize;
        let conds = self.n_conditions.max(1) as usize;
        conds * self.time_bins * states * self.space.positions * self.space.vocab as usize
    }

    fn block_len(&self) -> usize {
        self.space.positions * self.space.vocab as usize
    }

    fn bin_of(&self, t: f64) -> usize {
        let frac = (t / self.horizon).clamp(0.0, 1.0);
        ((frac * self.time_bins as f64) as usize).min(self.time_bins - 1)
    }

    /// Logit block offset for `(c, t, x)`.
    pub fn offset(&self, x: &SequenceState, t: f64, c: Option<Condition>) -> Result<usize> {
        let state_idx = self.space.index_of(x)?;
        let states = self.space.size() as usize;
        let cond_idx = c.map(|Condition(tag)| tag as usize).unwrap_or(0);
        let bin = self.bin_of(t);
        Ok(((cond_idx * self.time_bins + bin) * states + state_idx) * self.block_len())
    }

    pub(super) fn forward(
        &self,
        params: &[f64],
        x: &SequenceState,
        t: f64,
        c: Option<Condition>,
    ) -> Result<(Vec<f64>, BackendCache)> {
        let offset = self.offset(x, t, c)?;
        let logits = params[offset..offset + self.block_len()].to_vec();
        Ok((logits, BackendCache::Tabular { offset }))
    }

    pub(super) fn backward(&self, offset: usize, d_logits: &[f64], buf: &mut GradientBuffer) {
        for (j, &g) in d_logits.iter().enumerate() {
            buf.grad[offset + j] += g;
        }
    }

    pub(super) fn random_params(&self, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        (0..self.n_params()).map(|_| scale * normal(rng)).collect()
    }

    pub fn descriptor(&self) -> String {
        format!(
            "backend=tabular\nd={}\nvocab={}\nmask={}\ntime_bins={}\nhorizon={}\nconditions={}\n",
            self.space.positions,
            self.space.vocab,
            u8::from(self.space.has_mask),
            self.time_bins,
            self.horizon,
            self.n_conditions
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
        TabularArch::new(
            space,
            descriptor_field(fields, "time_bins")?,
            descriptor_field(fields, "horizon")?,
            descriptor_field(fields, "conditions")?,
        )
    }
}

/// Standard normal via Box-Muller.
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_disjoint_blocks() {
        let arch = TabularArch::new(StateSpaceSpec::new(2, 2, true).unwrap(), 3, 1.0, 2).unwrap();
        let mut seen = std::collections::HashSet::new();
        let states = arch.space.enumerate_states().unwrap();
        for c in 0..2 {
            for bin in 0..3 {
                let t = (bin as f64 + 0.5) / 3.0;
                for x in &states {
                    let off = arch.offset(x, t, Some(Condition(c))).unwrap();
                    assert!(off + arch.block_len() <= arch.n_params());
                    assert!(seen.insert(off), "duplicate offset {off}");
                }
            }
        }
        assert_eq!(seen.len(), 2 * 3 * states.len());
    }

    #[test]
    fn bin_clamps_at_horizon() {
        let arch = TabularArch::new(StateSpaceSpec::new(1, 2, false).unwrap(), 4, 1.0, 0).unwrap();
        assert_eq!(arch.bin_of(0.0), 0);
        assert_eq!(arch.bin_of(0.999), 3);
        assert_eq!(arch.bin_of(1.0), 3);
    }
}
