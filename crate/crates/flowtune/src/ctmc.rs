//! CTMC rate evaluation, one-step Euler kernels, factorized trajectory
//! sampling, and exact distribution-level oracles on enumerable spaces.
//!
//! Rates are factorized per position: an instantaneous transition changes at
//! most one token. The Euler sampler draws every position independently from
//! its one-step kernel, so the exact marginal of the discretized chain is the
//! repeated push-forward of the per-position product kernel
//! ([`push_forward_euler`]). The continuous-time reference is a fixed-step
//! RK4 integration of the Kolmogorov forward equation on the assembled joint
//! generator ([`kolmogorov_exact`]).

use rand::Rng;

use crate::error::{Error, Result};
use crate::state::{Condition, DistributionTable, SequenceState, StateSpaceSpec};

/// Default RK4 resolution of the Kolmogorov oracle, in steps per unit time.
pub const KOLMOGOROV_STEPS_PER_UNIT: usize = 100_000;

/// Tolerance below which a negative staying probability is treated as
/// floating-point noise rather than an overstep.
pub const STAY_PROB_TOL: f64 = 1e-9;

/// Instantaneous per-position rates `u_t(., x)` at one `(x, t)`.
///
/// `rates[i][y-1]` is the rate of position `i` jumping to token `y`; the
/// entry at the current token holds the diagonal `-Σ_{y≠x_i} r_i(y)`.
#[derive(Debug, Clone)]
pub struct RateEvaluation {
    pub rates: Vec<Vec<f64>>,
}

impl RateEvaluation {
    /// Builds from off-diagonal rates, filling each diagonal entry so rows sum
    /// to zero. Entries at the current token in `off` are ignored.
    pub fn from_off_diagonal(x: &SequenceState, off: Vec<Vec<f64>>) -> Self {
        let mut rates = off;
        for (i, row) in rates.iter_mut().enumerate() {
            let cur = x.tokens[i] as usize - 1;
            row[cur] = 0.0;
            let total: f64 = row.iter().sum();
            row[cur] = -total;
        }
        Self { rates }
    }

    pub fn zeros(positions: usize, full_vocab: u32) -> Self {
        Self {
            rates: vec![vec![0.0; full_vocab as usize]; positions],
        }
    }

    /// Total jump rate away from the current token at position `i`.
    pub fn total_jump_rate(&self, x: &SequenceState, i: usize) -> f64 {
        let cur = x.tokens[i] as usize - 1;
        self.rates[i]
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != cur)
            .map(|(_, &r)| r)
            .sum()
    }

    /// Checks the rate conditions: off-diagonal entries non-negative and each
    /// row summing to zero within `tol`.
    pub fn validate(&self, x: &SequenceState, tol: f64) -> Result<()> {
        for (i, row) in self.rates.iter().enumerate() {
            let cur = x.tokens[i] as usize - 1;
            let mut sum = 0.0;
            for (y, &r) in row.iter().enumerate() {
                if y != cur && r < -tol {
                    return Err(Error::Domain(format!(
                        "negative off-diagonal rate {r} at position {i}, token {}",
                        y + 1
                    )));
                }
                sum += r;
            }
            if sum.abs() > tol {
                return Err(Error::Domain(format!(
                    "rate row at position {i} sums to {sum}, expected 0"
                )));
            }
        }
        Ok(())
    }
}

/// Uniform time grid `t_k = k·Δt`, `k = 0..K`, with `K = T/Δt` integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 || !dt.is_finite() || dt <= 0.0 {
            return Err(Error::Domain("time grid requires T > 0 and dt > 0".into()));
        }
        let ratio = horizon / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 || steps < 1.0 {
            return Err(Error::Domain(format!(
                "T/dt = {ratio} is not a positive integer"
            )));
        }
        Ok(Self {
            horizon,
            dt,
            steps: steps as usize,
        })
    }

    pub fn time_at(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// How the one-step kernel treats a negative staying probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Error out; verification runs must not silently renormalize.
    Strict,
    /// Clamp negatives to zero and renormalize the position's PMF.
    Clamp,
}

/// Per-position categorical distributions over next tokens for one Euler step.
#[derive(Debug, Clone)]
pub struct StepKernel {
    pub probs: Vec<Vec<f64>>,
    /// Set when clamp mode had to repair a negative staying probability.
    pub clamped: bool,
}

/// One-step transition probabilities `P_i(y) = r_i(y)·Δt` for `y ≠ x_i` and
/// `P_i(x_i) = 1 − Σ_{y≠x_i} r_i(y)·Δt`, per position.
pub fn step_kernel(
    rates: &RateEvaluation,
    x: &SequenceState,
    dt: f64,
    mode: KernelMode,
) -> Result<StepKernel> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::Domain("step_kernel requires dt > 0".into()));
    }
    let mut probs = Vec::with_capacity(rates.rates.len());
    let mut clamped = false;
    for (i, row) in rates.rates.iter().enumerate() {
        let cur = x.tokens[i] as usize - 1;
        let mut pmf = vec![0.0; row.len()];
        let mut jump_total = 0.0;
        for (y, &r) in row.iter().enumerate() {
            if y == cur {
                continue;
            }
            let p = r * dt;
            pmf[y] = p;
            jump_total += p;
        }
        let stay = 1.0 - jump_total;
        if stay < -STAY_PROB_TOL {
            match mode {
                KernelMode::Strict => {
                    return Err(Error::KernelOverstep {
                        position: i,
                        stay_prob: stay,
                    })
                }
                KernelMode::Clamp => clamped = true,
            }
        }
        pmf[cur] = stay.max(0.0);
        let sum: f64 = pmf.iter().sum();
        if (sum - 1.0).abs() > 1e-15 && sum > 0.0 {
            for p in &mut pmf {
                *p /= sum;
            }
        }
        probs.push(pmf);
    }
    Ok(StepKernel { probs, clamped })
}

/// A velocity field `u_t(., x)`; evaluation must be safe for concurrent
/// read-only use. Any conditioning is baked into the field instance.
pub trait RateField: Sync {
    fn rates(&self, x: &SequenceState, t: f64) -> RateEvaluation;
}

impl<F> RateField for F
where
    F: Fn(&SequenceState, f64) -> RateEvaluation + Sync,
{
    fn rates(&self, x: &SequenceState, t: f64) -> RateEvaluation {
        self(x, t)
    }
}

/// Initial state distribution for trajectory sampling.
#[derive(Debug, Clone)]
pub enum SourceDistribution<'a> {
    Delta(&'a SequenceState),
    Table(&'a DistributionTable),
}

impl SourceDistribution<'_> {
    fn draw(&self, rng: &mut impl Rng) -> SequenceState {
        match self {
            SourceDistribution::Delta(s) => (*s).clone(),
            SourceDistribution::Table(t) => t.space.state_at(t.sample_index(rng)),
        }
    }
}

/// One sampled inference path with per-step policy log-probabilities.
///
/// Produced by [`euler_sample`]; the reward, advantage, and condition fields
/// are filled by the rollout layer.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `K+1` states `x_{t_0} .. x_{t_K}`.
    pub states: Vec<SequenceState>,
    /// Per-step total log-probability `Σ_i log P_i(x^i_{t+Δt})`.
    pub step_log_probs: Vec<f64>,
    pub grid: TimeGrid,
    pub reward: f64,
    pub advantage: f64,
    pub condition: Option<Condition>,
    /// Steps on which clamp mode repaired the kernel.
    pub clamped_steps: usize,
}

impl Trajectory {
    pub fn terminal(&self) -> &SequenceState {
        self.states.last().expect("trajectory has K+1 >= 2 states")
    }

    /// Tokens chosen at step `k` (the state entered at `t_{k+1}`).
    pub fn chosen_tokens(&self, k: usize) -> &[u32] {
        &self.states[k + 1].tokens
    }

    pub fn total_log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

/// Simulates one trajectory of the Euler-discretized chain, drawing every
/// position independently from its one-step kernel.
pub fn euler_sample(
    field: &dyn RateField,
    source: SourceDistribution<'_>,
    grid: TimeGrid,
    mode: KernelMode,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let mut state = source.draw(rng);
    let mut states = Vec::with_capacity(grid.steps + 1);
    let mut step_log_probs = Vec::with_capacity(grid.steps);
    let mut clamped_steps = 0usize;
    states.push(state.clone());
    for k in 0..grid.steps {
        let t = grid.time_at(k);
        let rates = field.rates(&state, t);
        let kernel = step_kernel(&rates, &state, grid.dt, mode)?;
        if kernel.clamped {
            clamped_steps += 1;
        }
        let mut log_prob = 0.0;
        for (i, pmf) in kernel.probs.iter().enumerate() {
            let (token, p) = sample_categorical(pmf, rng);
            state.tokens[i] = token;
            log_prob += p.ln();
        }
        states.push(state.clone());
        step_log_probs.push(log_prob);
    }
    Ok(Trajectory {
        states,
        step_log_probs,
        grid,
        reward: 0.0,
        advantage: 0.0,
        condition: None,
        clamped_steps,
    })
}

/// Inverse-CDF draw from a dense PMF; returns the 1-based token and its mass.
fn sample_categorical(pmf: &[f64], rng: &mut impl Rng) -> (u32, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (y, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return (y as u32 + 1, p);
        }
    }
    // numerical tail: fall back to the last positive entry
    let (y, &p) = pmf
        .iter()
        .enumerate()
        .rfind(|&(_, &p)| p > 0.0)
        .expect("kernel PMF has positive mass");
    (y as u32 + 1, p)
}

/// Applies the joint generator assembled from factorized rates:
/// `out(y) = Σ_x u_t(y, x) p(x)`.
pub fn apply_generator(
    space: &StateSpaceSpec,
    field: &dyn RateField,
    t: f64,
    p: &[f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let v = space.full_vocab() as usize;
    let d = space.positions;
    // stride of position i in the lexicographic enumeration
    let mut strides = vec![1usize; d];
    for i in (0..d.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * v;
    }
    for (idx, &mass) in p.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let x = space.state_at(idx);
        let rates = field.rates(&x, t);
        for i in 0..d {
            let cur = x.tokens[i] as usize - 1;
            for (y, &r) in rates.rates[i].iter().enumerate() {
                if y == cur || r == 0.0 {
                    continue;
                }
                let nbr =
                    (idx as isize + (y as isize - cur as isize) * strides[i] as isize) as usize;
                out[nbr] += r * mass;
                out[idx] -= r * mass;
            }
        }
    }
}

/// Integrates the Kolmogorov forward equation `dp/dt = Σ_x u_t(y,x) p_t(x)`
/// with fixed-step RK4; the reference continuous-time oracle.
pub fn kolmogorov_exact(
    field: &dyn RateField,
    p0: &DistributionTable,
    horizon: f64,
    steps_per_unit: usize,
) -> Result<DistributionTable> {
    if !horizon.is_finite() || horizon <= 0.0 || steps_per_unit == 0 {
        return Err(Error::Domain(
            "kolmogorov_exact requires T > 0 and steps_per_unit > 0".into(),
        ));
    }
    let space = p0.space;
    let n = space.enumerable_size()?;
    let total_steps = ((horizon * steps_per_unit as f64).ceil() as usize).max(1);
    let h = horizon / total_steps as f64;
    let mut p = p0.mass().to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 0..total_steps {
        let t = step as f64 * h;
        apply_generator(&space, field, t, &p, &mut k1);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k1[i];
        }
        apply_generator(&space, field, t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k2[i];
        }
        apply_generator(&space, field, t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = p[i] + h * k3[i];
        }
        apply_generator(&space, field, t + h, &tmp, &mut k4);
        for i in 0..n {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let mut table = DistributionTable::from_mass_unchecked(space, p);
    table.renormalize();
    Ok(table)
}

/// Exact terminal marginal of the Euler-discretized, per-position factorized
/// chain: repeated push-forward of the product kernel over the joint space.
pub fn push_forward_euler(
    field: &dyn RateField,
    p0: &DistributionTable,
    grid: TimeGrid,
    mode: KernelMode,
) -> Result<DistributionTable> {
    let snapshots = push_forward_euler_snapshots(field, p0, grid, mode, &[])?;
    Ok(snapshots.terminal)
}

/// Push-forward that additionally records the marginal at requested step
/// indices (used by regularizer expectations and verification sweeps).
pub struct PushForwardSnapshots {
    pub terminal: DistributionTable,
    /// `(step index, marginal at t_k)` for each requested index.
    pub at_steps: Vec<(usize, DistributionTable)>,
}

pub fn push_forward_euler_snapshots(
    field: &dyn RateField,
    p0: &DistributionTable,
    grid: TimeGrid,
    mode: KernelMode,
    snapshot_steps: &[usize],
) -> Result<PushForwardSnapshots> {
    let space = p0.space;
    let n = space.enumerable_size()?;
    let mut p = p0.mass().to_vec();
    let mut next = vec![0.0; n];
    let v = space.full_vocab() as usize;
    let d = space.positions;
    let mut strides = vec![1usize; d];
    for i in (0..d.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * v;
    }
    let mut at_steps = Vec::new();
    for k in 0..=grid.steps {
        if snapshot_steps.contains(&k) {
            let mut table = DistributionTable::from_mass_unchecked(space, p.clone());
            table.renormalize();
            at_steps.push((k, table));
        }
        if k == grid.steps {
            break;
        }
        let t = grid.time_at(k);
        next.iter_mut().for_each(|m| *m = 0.0);
        for (idx, &mass) in p.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let x = space.state_at(idx);
            let rates = field.rates(&x, t);
            let kernel = step_kernel(&rates, &x, grid.dt, mode)?;
            scatter_product_kernel(&kernel, &x, idx, mass, &strides, &mut next, 0, d);
        }
        std::mem::swap(&mut p, &mut next);
    }
    let mut terminal = DistributionTable::from_mass_unchecked(space, p);
    terminal.renormalize();
    Ok(PushForwardSnapshots { terminal, at_steps })
}

/// Distributes `mass` over the product of per-position kernels, accumulating
/// into `out` by walking positions depth-first.
#[allow(clippy::too_many_arguments)]
fn scatter_product_kernel(
    kernel: &StepKernel,
    x: &SequenceState,
    base_idx: usize,
    mass: f64,
    strides: &[usize],
    out: &mut [f64],
    pos: usize,
    d: usize,
) {
    if pos == d {
        out[base_idx] += mass;
        return;
    }
    let cur = x.tokens[pos] as usize - 1;
    for (y, &p) in kernel.probs[pos].iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let idx = (base_idx as isize + (y as isize - cur as isize) * strides[pos] as isize) as usize;
        scatter_product_kernel(kernel, x, idx, mass * p, strides, out, pos + 1, d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d1_space() -> StateSpaceSpec {
        StateSpaceSpec::new(1, 2, false).unwrap()
    }

    /// d=1 two-token chain with constant rate `a` from 1 to 2 and `b` back.
    fn two_state_field(a: f64, b: f64) -> impl RateField {
        move |x: &SequenceState, _t: f64| {
            let mut off = vec![vec![0.0; 2]];
            if x.tokens[0] == 1 {
                off[0][1] = a;
            } else {
                off[0][0] = b;
            }
            RateEvaluation::from_off_diagonal(x, off)
        }
    }

    #[test]
    fn kernel_identity_under_zero_rates() {
        let x = SequenceState::new(vec![1, 2]);
        let rates = RateEvaluation::zeros(2, 2);
        let kernel = step_kernel(&rates, &x, 0.1, KernelMode::Strict).unwrap();
        assert_eq!(kernel.probs[0], vec![1.0, 0.0]);
        assert_eq!(kernel.probs[1], vec![0.0, 1.0]);
    }

    #[test]
    fn kernel_direct_formula() {
        let x = SequenceState::new(vec![1]);
        let rates = RateEvaluation::from_off_diagonal(&x, vec![vec![0.0, 1.0]]);
        let kernel = step_kernel(&rates, &x, 0.1, KernelMode::Strict).unwrap();
        assert!((kernel.probs[0][1] - 0.1).abs() < 1e-15);
        assert!((kernel.probs[0][0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn kernel_strict_overstep_names_position() {
        let x = SequenceState::new(vec![1]);
        let rates = RateEvaluation::from_off_diagonal(&x, vec![vec![0.0, 12.0]]);
        match step_kernel(&rates, &x, 0.1, KernelMode::Strict) {
            Err(Error::KernelOverstep { position, stay_prob }) => {
                assert_eq!(position, 0);
                assert!((stay_prob + 0.2).abs() < 1e-12);
            }
            other => panic!("expected overstep, got {other:?}"),
        }
    }

    #[test]
    fn kernel_clamp_mode_repairs() {
        let x = SequenceState::new(vec![1]);
        let rates = RateEvaluation::from_off_diagonal(&x, vec![vec![0.0, 12.0]]);
        let kernel = step_kernel(&rates, &x, 0.1, KernelMode::Clamp).unwrap();
        assert!(kernel.clamped);
        let sum: f64 = kernel.probs[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(kernel.probs[0][0], 0.0);
    }

    #[test]
    fn euler_sample_zero_rates_is_constant() {
        let space = StateSpaceSpec::new(3, 2, false).unwrap();
        let field = |_x: &SequenceState, _t: f64| RateEvaluation::zeros(3, 2);
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let x0 = SequenceState::new(vec![1, 2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = euler_sample(
            &field,
            SourceDistribution::Delta(&x0),
            grid,
            KernelMode::Strict,
            &mut rng,
        )
        .unwrap();
        assert_eq!(traj.states.len(), 11);
        assert!(traj.states.iter().all(|s| *s == x0));
        assert_eq!(traj.total_log_prob(), 0.0);
        let _ = space;
    }

    #[test]
    fn euler_sample_deterministic_per_seed() {
        let field = two_state_field(1.0, 0.5);
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let x0 = SequenceState::new(vec![1]);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            euler_sample(
                &field,
                SourceDistribution::Delta(&x0),
                grid,
                KernelMode::Strict,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.states, b.states);
        assert_eq!(a.step_log_probs, b.step_log_probs);
    }

    #[test]
    fn euler_sample_absorbing_chain_terminal_mass() {
        // exact discrete-chain value: 1 - 0.9^10 = 0.6513215599
        let field = two_state_field(1.0, 0.0);
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let x0 = SequenceState::new(vec![1]);
        let n = 100_000;
        let mut hits = 0u64;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = euler_sample(
                &field,
                SourceDistribution::Delta(&x0),
                grid,
                KernelMode::Strict,
                &mut rng,
            )
            .unwrap();
            if traj.terminal().tokens[0] == 2 {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        assert!(
            (p_hat - 0.6513215599).abs() < 0.005,
            "empirical terminal mass {p_hat}"
        );
    }

    #[test]
    fn kolmogorov_zero_rates_is_stationary() {
        let space = StateSpaceSpec::new(2, 2, false).unwrap();
        let field = |_x: &SequenceState, _t: f64| RateEvaluation::zeros(2, 2);
        let p0 = DistributionTable::from_weights(space, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p_t = kolmogorov_exact(&field, &p0, 1.0, 1000).unwrap();
        for (a, b) in p0.mass().iter().zip(p_t.mass()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kolmogorov_absorbing_chain_analytic() {
        // p(2) at T=1 is 1 - e^{-1} = 0.6321205588
        let field = two_state_field(1.0, 0.0);
        let p0 = DistributionTable::delta(d1_space(), &SequenceState::new(vec![1])).unwrap();
        let p_t = kolmogorov_exact(&field, &p0, 1.0, 100_000).unwrap();
        assert!((p_t.mass()[1] - 0.632_120_558_8).abs() < 1e-6);
    }

    #[test]
    fn kolmogorov_symmetric_chain_reaches_stationary() {
        let field = two_state_field(1.0, 1.0);
        let p0 = DistributionTable::delta(d1_space(), &SequenceState::new(vec![1])).unwrap();
        let p_t = kolmogorov_exact(&field, &p0, 10.0, 10_000).unwrap();
        assert!((p_t.mass()[0] - 0.5).abs() < 1e-4);
        assert!((p_t.mass()[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn kolmogorov_self_consistent_under_step_doubling() {
        let field = two_state_field(1.3, 0.4);
        let p0 = DistributionTable::delta(d1_space(), &SequenceState::new(vec![1])).unwrap();
        let a = kolmogorov_exact(&field, &p0, 1.0, 10_000).unwrap();
        let b = kolmogorov_exact(&field, &p0, 1.0, 20_000).unwrap();
        assert!(crate::state::tv_distance(&a, &b).unwrap() < 1e-8);
    }

    #[test]
    fn push_forward_absorbing_chain_values() {
        let field = two_state_field(1.0, 0.0);
        let p0 = DistributionTable::delta(d1_space(), &SequenceState::new(vec![1])).unwrap();
        let coarse = push_forward_euler(
            &field,
            &p0,
            TimeGrid::new(1.0, 0.1).unwrap(),
            KernelMode::Strict,
        )
        .unwrap();
        assert!((coarse.mass()[1] - 0.651_321_559_9).abs() < 1e-9);
        let fine = push_forward_euler(
            &field,
            &p0,
            TimeGrid::new(1.0, 0.05).unwrap(),
            KernelMode::Strict,
        )
        .unwrap();
        assert!((fine.mass()[1] - 0.641_514_077_6).abs() < 1e-9);
        // error vs exact 1-e^{-1} halves within ratio ~2.04
        let exact = 0.632_120_558_829_6;
        let e_coarse = (coarse.mass()[1] - exact).abs();
        let e_fine = (fine.mass()[1] - exact).abs();
        assert!((e_coarse - 0.0192).abs() < 1e-4);
        assert!((e_fine - 0.0094).abs() < 1e-4);
        let ratio = e_coarse / e_fine;
        assert!((1.8..2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn push_forward_zero_rates_identity() {
        let space = StateSpaceSpec::new(2, 2, true).unwrap();
        let field = |_x: &SequenceState, _t: f64| RateEvaluation::zeros(2, 3);
        let p0 = DistributionTable::uniform(space).unwrap();
        let out = push_forward_euler(
            &field,
            &p0,
            TimeGrid::new(1.0, 0.25).unwrap(),
            KernelMode::Strict,
        )
        .unwrap();
        for (a, b) in p0.mass().iter().zip(out.mass()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn strict_kernel_rows_sum_to_one_under_random_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let d = rand::Rng::gen_range(&mut rng, 1..4usize);
            let v = rand::Rng::gen_range(&mut rng, 2..5u32);
            let x = SequenceState::new(
                (0..d)
                    .map(|_| rand::Rng::gen_range(&mut rng, 1..=v))
                    .collect(),
            );
            let off: Vec<Vec<f64>> = (0..d)
                .map(|_| {
                    (0..v)
                        .map(|_| rand::Rng::gen_range(&mut rng, 0.0..2.0))
                        .collect()
                })
                .collect();
            let rates = RateEvaluation::from_off_diagonal(&x, off);
            let kernel = step_kernel(&rates, &x, 0.05, KernelMode::Strict).unwrap();
            for pmf in &kernel.probs {
                let sum: f64 = pmf.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "kernel row sums to {sum}");
            }
        }
    }

    /// The factorized push-forward converges to the Kolmogorov solution at
    /// first order: halving Δt roughly halves the terminal TV gap.
    #[test]
    fn push_forward_tv_error_halves_with_dt() {
        let space = StateSpaceSpec::new(2, 3, false).unwrap();
        for seed in [3u64, 17, 51] {
            let model = crate::verify::RandomRateModel::random(space, 1.0, 0.6, seed);
            let p0 = DistributionTable::uniform(space).unwrap();
            let exact = kolmogorov_exact(&model, &p0, 1.0, 20_000).unwrap();
            let tv_at = |dt: f64| {
                let out = push_forward_euler(
                    &model,
                    &p0,
                    TimeGrid::new(1.0, dt).unwrap(),
                    KernelMode::Strict,
                )
                .unwrap();
                crate::state::tv_distance(&out, &exact).unwrap()
            };
            let mut dt = 0.1;
            for _ in 0..3 {
                let ratio = tv_at(dt) / tv_at(dt / 2.0);
                assert!(
                    (1.5..=2.5).contains(&ratio),
                    "seed {seed}, dt {dt}: TV halving ratio {ratio}"
                );
                dt /= 2.0;
            }
        }
    }

    /// The factorized product kernel agrees with the joint linear kernel
    /// `I + Δt·U` to O(Δt²): halving Δt shrinks their one-step TV gap ~4x.
    #[test]
    fn factorized_vs_joint_one_step_second_order() {
        let space = StateSpaceSpec::new(2, 2, false).unwrap();
        // rates at each position depend on the other position's token
        let field = |x: &SequenceState, _t: f64| {
            let mut off = vec![vec![0.0; 2]; 2];
            for i in 0..2 {
                let other = x.tokens[1 - i] as f64;
                let cur = x.tokens[i] as usize - 1;
                off[i][1 - cur] = 0.4 + 0.3 * other;
            }
            RateEvaluation::from_off_diagonal(x, off)
        };
        let p0 = DistributionTable::from_weights(space, vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let gap = |dt: f64| {
            let grid = TimeGrid::new(dt, dt).unwrap();
            let product =
                push_forward_euler(&field, &p0, grid, KernelMode::Strict).unwrap();
            let mut joint = vec![0.0; 4];
            apply_generator(&space, &field, 0.0, p0.mass(), &mut joint);
            let joint_mass: Vec<f64> = p0
                .mass()
                .iter()
                .zip(&joint)
                .map(|(p, g)| p + dt * g)
                .collect();
            let joint = DistributionTable::from_mass_unchecked(space, joint_mass);
            crate::state::tv_distance(&product, &joint).unwrap()
        };
        let g1 = gap(0.08);
        let g2 = gap(0.04);
        let ratio = g1 / g2;
        assert!((3.5..4.5).contains(&ratio), "O(dt^2) ratio {ratio}");
    }
}
