//! State spaces, sequence states, dense distributions, and exact metrics.
//!
//! A state is a length-`d` vector of tokens over the vocabulary `{1..M}`,
//! optionally extended with a distinguished mask token `M+1` used as the
//! source state of the absorbing mixture path. Distributions over small
//! spaces are stored densely so that oracle computations stay exact.

use crate::error::{Error, Result};

/// Default cap on exact enumeration (number of joint states).
pub const ENUMERATION_CAP: u64 = 1_000_000;

/// Tolerance for probability-mass normalization checks.
pub const MASS_TOL: f64 = 1e-9;

/// Shape of the product state space `V^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateSpaceSpec {
    /// Sequence length d (>= 1).
    pub positions: usize,
    /// Vocabulary size M (>= 2), tokens 1..=M.
    pub vocab: u32,
    /// When set, token M+1 is a legal mask token (absorbing source).
    pub has_mask: bool,
}

impl StateSpaceSpec {
    pub fn new(positions: usize, vocab: u32, has_mask: bool) -> Result<Self> {
        if positions == 0 {
            return Err(Error::Domain("position count must be >= 1".into()));
        }
        if vocab < 2 {
            return Err(Error::Domain("vocabulary size must be >= 2".into()));
        }
        Ok(Self {
            positions,
            vocab,
            has_mask,
        })
    }

    /// Number of distinct tokens a position can hold (M, or M+1 with mask).
    pub fn full_vocab(&self) -> u32 {
        self.vocab + u32::from(self.has_mask)
    }

    /// The mask token index, when the space has one.
    pub fn mask_token(&self) -> Option<u32> {
        self.has_mask.then_some(self.vocab + 1)
    }

    /// Total number of joint states, `full_vocab^d`.
    pub fn size(&self) -> u128 {
        (self.full_vocab() as u128).pow(self.positions as u32)
    }

    /// Joint-state count as usize, or a `NotEnumerable` error beyond `cap`.
    pub fn enumerable_size_with_cap(&self, cap: u64) -> Result<usize> {
        let size = self.size();
        if size > cap as u128 {
            return Err(Error::NotEnumerable { size, cap });
        }
        Ok(size as usize)
    }

    pub fn enumerable_size(&self) -> Result<usize> {
        self.enumerable_size_with_cap(ENUMERATION_CAP)
    }

    /// Whether `token` is legal in this space.
    pub fn token_in_bounds(&self, token: u32) -> bool {
        token >= 1 && token <= self.full_vocab()
    }

    /// Validates that `state` belongs to this space.
    pub fn check_state(&self, state: &SequenceState) -> Result<()> {
        if state.tokens.len() != self.positions {
            return Err(Error::Space(format!(
                "state length {} does not match d={}",
                state.tokens.len(),
                self.positions
            )));
        }
        for (i, &tok) in state.tokens.iter().enumerate() {
            if !self.token_in_bounds(tok) {
                return Err(Error::Space(format!(
                    "token {tok} at position {i} outside 1..={}",
                    self.full_vocab()
                )));
            }
        }
        Ok(())
    }

    /// All states in lexicographic order on the token vector.
    pub fn enumerate_states(&self) -> Result<Vec<SequenceState>> {
        let n = self.enumerable_size()?;
        let v = self.full_vocab();
        let mut out = Vec::with_capacity(n);
        let mut tokens = vec![1u32; self.positions];
        loop {
            out.push(SequenceState::new(tokens.clone()));
            // increment the mixed-radix counter, least-significant last
            let mut pos = self.positions;
            loop {
                if pos == 0 {
                    return Ok(out);
                }
                pos -= 1;
                if tokens[pos] < v {
                    tokens[pos] += 1;
                    break;
                }
                tokens[pos] = 1;
            }
        }
    }

    /// Inverse of [`enumerate_states`](Self::enumerate_states) ordering.
    pub fn index_of(&self, state: &SequenceState) -> Result<usize> {
        self.check_state(state)?;
        let v = self.full_vocab() as usize;
        let mut idx = 0usize;
        for &tok in &state.tokens {
            idx = idx * v + (tok as usize - 1);
        }
        Ok(idx)
    }

    /// State at enumeration index `idx`.
    pub fn state_at(&self, idx: usize) -> SequenceState {
        let v = self.full_vocab() as usize;
        let mut tokens = vec![1u32; self.positions];
        let mut rem = idx;
        for pos in (0..self.positions).rev() {
            tokens[pos] = (rem % v) as u32 + 1;
            rem /= v;
        }
        SequenceState::new(tokens)
    }

    /// The all-mask source state of the absorbing mixture path.
    pub fn all_mask_state(&self) -> Result<SequenceState> {
        let mask = self
            .mask_token()
            .ok_or_else(|| Error::Space("space has no mask token".into()))?;
        Ok(SequenceState::new(vec![mask; self.positions]))
    }
}

/// A point of the state space: a length-`d` token vector, tokens 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceState {
    pub tokens: Vec<u32>,
}

impl SequenceState {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions currently holding the mask token of `space`.
    pub fn masked_positions(&self, space: &StateSpaceSpec) -> Vec<usize> {
        match space.mask_token() {
            Some(mask) => (0..self.tokens.len())
                .filter(|&i| self.tokens[i] == mask)
                .collect(),
            None => Vec::new(),
        }
    }
}

impl std::fmt::Display for SequenceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut first = true;
        for tok in &self.tokens {
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{tok}")?;
            first = false;
        }
        Ok(())
    }
}

/// Condition tag attached to a rollout; fixed for the whole trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Condition(pub u32);

/// Dense probability mass function over an enumerable space.
#[derive(Debug, Clone)]
pub struct DistributionTable {
    pub space: StateSpaceSpec,
    mass: Vec<f64>,
}

impl DistributionTable {
    /// Builds a table from raw mass, validating non-negativity and normalization.
    pub fn from_mass(space: StateSpaceSpec, mass: Vec<f64>) -> Result<Self> {
        let n = space.enumerable_size()?;
        if mass.len() != n {
            return Err(Error::Space(format!(
                "mass vector length {} does not match space size {n}",
                mass.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &m) in mass.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::Numeric(format!("non-finite mass at state {i}")));
            }
            if m < -MASS_TOL {
                return Err(Error::Domain(format!("negative mass {m} at state {i}")));
            }
            sum += m;
        }
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("mass sums to {sum}, expected 1")));
        }
        let mut table = Self { space, mass };
        table.renormalize();
        Ok(table)
    }

    /// Builds from arbitrary non-negative weights by rescaling to sum 1.
    pub fn from_weights(space: StateSpaceSpec, weights: Vec<f64>) -> Result<Self> {
        let n = space.enumerable_size()?;
        if weights.len() != n {
            return Err(Error::Space(format!(
                "weight vector length {} does not match space size {n}",
                weights.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Domain(format!("bad weight {w} at state {i}")));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::Domain("weights sum to zero".into()));
        }
        let mass = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self { space, mass })
    }

    pub fn uniform(space: StateSpaceSpec) -> Result<Self> {
        let n = space.enumerable_size()?;
        Ok(Self {
            space,
            mass: vec![1.0 / n as f64; n],
        })
    }

    /// Point mass on `state`.
    pub fn delta(space: StateSpaceSpec, state: &SequenceState) -> Result<Self> {
        let n = space.enumerable_size()?;
        let idx = space.index_of(state)?;
        let mut mass = vec![0.0; n];
        mass[idx] = 1.0;
        Ok(Self { space, mass })
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn prob(&self, state: &SequenceState) -> Result<f64> {
        Ok(self.mass[self.space.index_of(state)?])
    }

    /// Rescales mass to sum exactly 1, clamping tiny negative excursions to 0.
    pub fn renormalize(&mut self) {
        for m in &mut self.mass {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
        let sum: f64 = self.mass.iter().sum();
        if sum > 0.0 {
            for m in &mut self.mass {
                *m /= sum;
            }
        }
    }

    pub(crate) fn from_mass_unchecked(space: StateSpaceSpec, mass: Vec<f64>) -> Self {
        Self { space, mass }
    }


    /// Draws a state index proportional to mass.
    pub fn sample_index(&self, rng: &mut impl rand::Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &m) in self.mass.iter().enumerate() {
            acc += m;
            if u < acc {
                return i;
            }
        }
        self.mass.len() - 1
    }
}

/// Total variation distance `½ Σ |p − q|` between two tables on the same space.
pub fn tv_distance(p: &DistributionTable, q: &DistributionTable) -> Result<f64> {
    if p.space != q.space {
        return Err(Error::Space(
            "tv_distance requires identical state spaces".into(),
        ));
    }
    let sum: f64 = p
        .mass
        .iter()
        .zip(q.mass.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * sum)
}

/// Pearson correlation of the k-mer frequency profiles of two sample sets.
///
/// Windows are counted overlapping within each sequence independently; the
/// profile dimension is `M^k` over data tokens only, so every sequence must
/// be mask-free and length >= k.
pub fn kmer_correlation(
    samples: &[SequenceState],
    reference: &[SequenceState],
    k: usize,
    vocab: u32,
) -> Result<f64> {
    let p = kmer_profile(samples, k, vocab)?;
    let q = kmer_profile(reference, k, vocab)?;
    pearson(&p, &q)
}

/// Normalized k-mer frequency vector of dimension `vocab^k`.
pub fn kmer_profile(sequences: &[SequenceState], k: usize, vocab: u32) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    if sequences.is_empty() {
        return Err(Error::Domain("empty sequence set".into()));
    }
    let dim = (vocab as usize)
        .checked_pow(k as u32)
        .filter(|&d| d <= ENUMERATION_CAP as usize)
        .ok_or_else(|| Error::Domain(format!("k-mer profile dimension {vocab}^{k} too large")))?;
    let mut counts = vec![0f64; dim];
    let mut total = 0f64;
    for seq in sequences {
        if seq.len() < k {
            return Err(Error::Domain(format!(
                "sequence length {} shorter than k={k}",
                seq.len()
            )));
        }
        for window in seq.tokens.windows(k) {
            let mut idx = 0usize;
            for &tok in window {
                if tok < 1 || tok > vocab {
                    return Err(Error::Space(format!(
                        "token {tok} outside data vocabulary 1..={vocab} in k-mer profile"
                    )));
                }
                idx = idx * vocab as usize + (tok as usize - 1);
            }
            counts[idx] += 1.0;
            total += 1.0;
        }
    }
    for c in &mut counts {
        *c /= total;
    }
    Ok(counts)
}

/// Pearson correlation of two equal-length vectors.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Domain("pearson needs two equal vectors of dim >= 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Undefined(
            "correlation undefined: zero-variance frequency vector".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}
