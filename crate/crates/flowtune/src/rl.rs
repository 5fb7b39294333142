//! The inner MDP over inference: trajectory rollouts with stored one-step
//! policy log-probabilities, advantage estimation, and the REINFORCE and PPO
//! updates.
//!
//! The one-step policy is exactly the Euler kernel of the model velocity:
//! from a masked position, jump to token `y` with probability
//! `κ̇/(1−κ)·Δt·p_{1|t}^θ(y|x)` and stay masked otherwise; unmasked positions
//! are frozen. Its log-likelihood is therefore tractable and differentiable,
//! and [`policy_step_pmfs`] is shared bit-for-bit between sampling and
//! re-evaluation so PPO ratios at the first pass equal 1 exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use crate::ctmc::Trajectory;
use crate::ctmc::{RateEvaluation, RateField, TimeGrid};
use crate::error::{Error, Result};
use crate::model::{ForwardCache, GradientBuffer, OptimizerState, PosteriorModel, PROB_FLOOR};
use crate::path::{effective_posterior, posterior_to_velocity, Scheduler};
use crate::seed_mix;
use crate::state::{Condition, SequenceState, StateSpaceSpec};

/// Black-box terminal reward with a declared bound `|r| <= r_max`.
#[derive(Debug, Clone)]
pub struct RewardFn {
    pub kind: RewardKind,
    pub r_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// Number of (overlapping) occurrences of a fixed token pattern.
    MotifCount { pattern: Vec<u32> },
    /// `1 − |freq(token) − target|`: closeness of one token's frequency.
    TokenFreq { token: u32, target: f64 },
    /// Occurrences of the pattern selected by the trajectory's condition.
    MatchCondition { patterns: Vec<Vec<u32>> },
}

impl RewardFn {
    pub fn motif_count(pattern: Vec<u32>, space: &StateSpaceSpec) -> Result<Self> {
        check_pattern(&pattern, space)?;
        let r_max = (space.positions + 1 - pattern.len()) as f64;
        Ok(Self {
            kind: RewardKind::MotifCount { pattern },
            r_max,
        })
    }

    pub fn token_freq(token: u32, target: f64, space: &StateSpaceSpec) -> Result<Self> {
        if token < 1 || token > space.vocab {
            return Err(Error::Domain(format!(
                "token {token} outside data vocabulary"
            )));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Domain("target frequency must lie in [0,1]".into()));
        }
        Ok(Self {
            kind: RewardKind::TokenFreq { token, target },
            r_max: 1.0,
        })
    }

    pub fn match_condition(patterns: Vec<Vec<u32>>, space: &StateSpaceSpec) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::Domain("match_condition needs >= 1 pattern".into()));
        }
        let mut r_max = 0.0f64;
        for p in &patterns {
            check_pattern(p, space)?;
            r_max = r_max.max((space.positions + 1 - p.len()) as f64);
        }
        Ok(Self {
            kind: RewardKind::MatchCondition { patterns },
            r_max,
        })
    }

    /// Registry lookup: `motif_count` / `token_freq` / `match_condition` with
    /// space-separated arguments (patterns joined by `|`).
    pub fn by_name(name: &str, args: &str, space: &StateSpaceSpec) -> Result<Self> {
        match name {
            "motif_count" => Self::motif_count(parse_tokens(args)?, space),
            "token_freq" => {
                let parts: Vec<&str> = args.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(Error::Domain(
                        "token_freq takes `<token> <target>`".into(),
                    ));
                }
                let token = parts[0]
                    .parse()
                    .map_err(|_| Error::Domain(format!("bad token `{}`", parts[0])))?;
                let target = parts[1]
                    .parse()
                    .map_err(|_| Error::Domain(format!("bad target `{}`", parts[1])))?;
                Self::token_freq(token, target, space)
            }
            "match_condition" => {
                let patterns = args
                    .split('|')
                    .map(parse_tokens)
                    .collect::<Result<Vec<_>>>()?;
                Self::match_condition(patterns, space)
            }
            other => Err(Error::Domain(format!("unknown reward `{other}`"))),
        }
    }

    pub fn eval(&self, x: &SequenceState, c: Option<Condition>) -> f64 {
        match &self.kind {
            RewardKind::MotifCount { pattern } => count_occurrences(&x.tokens, pattern),
            RewardKind::TokenFreq { token, target } => {
                let count = x.tokens.iter().filter(|&&t| t == *token).count();
                1.0 - (count as f64 / x.tokens.len() as f64 - target).abs()
            }
            RewardKind::MatchCondition { patterns } => {
                let Condition(tag) = c.expect("match_condition requires a condition");
                count_occurrences(&x.tokens, &patterns[tag as usize])
            }
        }
    }

    /// Validates compatibility with the run before entering the hot loop.
    pub fn validate(&self, space: &StateSpaceSpec, n_conditions: u32) -> Result<()> {
        if let RewardKind::MatchCondition { patterns } = &self.kind {
            if n_conditions == 0 {
                return Err(Error::Domain(
                    "match_condition reward needs a conditional model".into(),
                ));
            }
            if patterns.len() < n_conditions as usize {
                return Err(Error::Domain(format!(
                    "match_condition has {} patterns for {n_conditions} conditions",
                    patterns.len()
                )));
            }
        }
        let _ = space;
        Ok(())
    }
}

fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    let toks: Vec<u32> = s
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Domain(format!("bad pattern token `{t}`")))
        })
        .collect::<Result<_>>()?;
    if toks.is_empty() {
        return Err(Error::Domain("empty token pattern".into()));
    }
    Ok(toks)
}

fn check_pattern(pattern: &[u32], space: &StateSpaceSpec) -> Result<()> {
    if pattern.is_empty() || pattern.len() > space.positions {
        return Err(Error::Domain(format!(
            "pattern length {} outside 1..={}",
            pattern.len(),
            space.positions
        )));
    }
    for &t in pattern {
        if t < 1 || t > space.vocab {
            return Err(Error::Domain(format!(
                "pattern token {t} outside data vocabulary"
            )));
        }
    }
    Ok(())
}

fn count_occurrences(tokens: &[u32], pattern: &[u32]) -> f64 {
    if pattern.len() > tokens.len() {
        return 0.0;
    }
    tokens
        .windows(pattern.len())
        .filter(|w| *w == pattern)
        .count() as f64
}

/// Advantage estimator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageKind {
    Raw,
    MeanBaseline,
    GroupNormalized,
}

#[derive(Debug, Clone, Copy)]
pub struct AdvantageSpec {
    pub kind: AdvantageKind,
    /// Group size for group normalization of unconditional batches;
    /// conditional batches group by tag.
    pub group_size: usize,
}

impl AdvantageSpec {
    pub const MEAN_BASELINE: AdvantageSpec = AdvantageSpec {
        kind: AdvantageKind::MeanBaseline,
        group_size: 0,
    };
}

/// A batch of rollouts sharing one grid and one generating-policy snapshot.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub grid: TimeGrid,
    /// Parameter version of the model that generated the batch.
    pub snapshot: u64,
}

/// The model velocity as a [`RateField`]: posterior forward, no-remask
/// override, then the mixture-path map. Used by the distribution oracles.
pub struct PolicyRates<'a> {
    pub model: &'a PosteriorModel,
    pub sched: &'a Scheduler,
    pub cond: Option<Condition>,
}

impl RateField for PolicyRates<'_> {
    fn rates(&self, x: &SequenceState, t: f64) -> RateEvaluation {
        let space = self.model.space();
        let out = self
            .model
            .forward(x, t, self.cond)
            .expect("policy forward failed");
        let eff = effective_posterior(space, &out.probs, x);
        posterior_to_velocity(space, self.sched, &eff, x, t)
            .expect("policy velocity construction failed")
    }
}

/// Per-position one-step policy PMFs over the full vocabulary at `(x, t)`.
///
/// Masked positions jump to token `y` with probability `coeff·Δt·p(y)` and
/// stay with `1 − coeff·Δt`; unmasked positions are point masses. Both the
/// sampler and the log-prob evaluation use this function, so their
/// probabilities agree bit-for-bit.
pub fn policy_step_pmfs(
    probs: &[Vec<f64>],
    space: &StateSpaceSpec,
    sched: &Scheduler,
    x: &SequenceState,
    t: f64,
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    let mask = space
        .mask_token()
        .ok_or_else(|| Error::Space("policy kernel requires a masked space".into()))?;
    let coeff = sched.velocity_coeff(t)?;
    let jump = coeff * dt;
    let v = space.full_vocab() as usize;
    let mut pmfs = Vec::with_capacity(space.positions);
    for i in 0..space.positions {
        let mut pmf = vec![0.0; v];
        if x.tokens[i] == mask {
            for (y, &p) in probs[i].iter().enumerate() {
                pmf[y] = jump * p;
            }
            pmf[mask as usize - 1] = (1.0 - jump).max(0.0);
        } else {
            pmf[x.tokens[i] as usize - 1] = 1.0;
        }
        pmfs.push(pmf);
    }
    Ok(pmfs)
}

/// One differentiable step log-probability evaluation.
pub struct StepEval {
    pub log_prob: f64,
    /// Set when a zero-probability transition had to be floored.
    pub floored: bool,
    d_probs: Vec<Vec<f64>>,
    cache: ForwardCache,
}

impl StepEval {
    /// Accumulates `scale · ∇_θ log p_t^θ(x_next | x)` into the buffer.
    pub fn backprop(
        &self,
        model: &PosteriorModel,
        scale: f64,
        buf: &mut GradientBuffer,
    ) -> Result<()> {
        if scale == 0.0 {
            return Ok(());
        }
        let scaled: Vec<Vec<f64>> = self
            .d_probs
            .iter()
            .map(|row| row.iter().map(|g| g * scale).collect())
            .collect();
        model.backward(&self.cache, &scaled, buf)
    }
}

/// `log p_t^θ(x_next | x)` summed over positions, with the gradient hooks
/// needed by the policy-gradient updates.
pub fn eval_step(
    model: &PosteriorModel,
    sched: &Scheduler,
    x: &SequenceState,
    x_next: &SequenceState,
    t: f64,
    dt: f64,
    cond: Option<Condition>,
) -> Result<StepEval> {
    let space = *model.space();
    let mask = space
        .mask_token()
        .ok_or_else(|| Error::Space("policy log-prob requires a masked space".into()))?;
    let out = model.forward(x, t, cond)?;
    let coeff = sched.velocity_coeff(t)?;
    let jump = coeff * dt;
    let m = space.vocab as usize;
    let mut log_prob = 0.0;
    let mut floored = false;
    let mut d_probs = vec![vec![0.0; m]; space.positions];
    for i in 0..space.positions {
        let cur = x.tokens[i];
        let next = x_next.tokens[i];
        if cur != mask {
            if next != cur {
                // frozen position cannot move; floored log, no gradient
                log_prob += PROB_FLOOR.ln();
                floored = true;
            }
            continue;
        }
        if next == mask {
            let stay = (1.0 - jump).max(0.0);
            if stay < PROB_FLOOR {
                log_prob += PROB_FLOOR.ln();
                floored = true;
            } else {
                log_prob += stay.ln();
            }
            // schedule-determined: no parameter dependence
        } else {
            let p = out.probs[i][next as usize - 1];
            log_prob += (jump * p).ln();
            d_probs[i][next as usize - 1] = 1.0 / p;
        }
    }
    Ok(StepEval {
        log_prob,
        floored,
        d_probs,
        cache: out.cache,
    })
}

/// Plain step log-probability.
pub fn step_log_prob(
    model: &PosteriorModel,
    sched: &Scheduler,
    x: &SequenceState,
    x_next: &SequenceState,
    t: f64,
    dt: f64,
    cond: Option<Condition>,
) -> Result<f64> {
    Ok(eval_step(model, sched, x, x_next, t, dt, cond)?.log_prob)
}

/// Samples one policy trajectory from the all-mask source.
pub fn sample_policy_trajectory(
    model: &PosteriorModel,
    sched: &Scheduler,
    grid: TimeGrid,
    cond: Option<Condition>,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let space = *model.space();
    let mask = space
        .mask_token()
        .ok_or_else(|| Error::Space("policy sampling requires a masked space".into()))?;
    let mut state = space.all_mask_state()?;
    let mut states = Vec::with_capacity(grid.steps + 1);
    let mut step_log_probs = Vec::with_capacity(grid.steps);
    states.push(state.clone());
    for k in 0..grid.steps {
        let t = grid.time_at(k);
        let out = model.forward(&state, t, cond)?;
        let pmfs = policy_step_pmfs(&out.probs, &space, sched, &state, t, grid.dt)?;
        let mut log_prob = 0.0;
        for (i, pmf) in pmfs.iter().enumerate() {
            let was_masked = state.tokens[i] == mask;
            let (token, p) = draw_categorical(pmf, rng);
            if was_masked {
                log_prob += p.ln();
            }
            state.tokens[i] = token;
        }
        states.push(state.clone());
        step_log_probs.push(log_prob);
    }
    let mut traj = Trajectory {
        states,
        step_log_probs,
        grid,
        reward: 0.0,
        advantage: 0.0,
        condition: cond,
        clamped_steps: 0,
    };
    finalize_masks(model, sched, &mut traj)?;
    Ok(traj)
}

fn draw_categorical(pmf: &[f64], rng: &mut impl Rng) -> (u32, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (y, &p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return (y as u32 + 1, p);
        }
    }
    let (y, &p) = pmf
        .iter()
        .enumerate()
        .rfind(|&(_, &p)| p > 0.0)
        .expect("policy PMF has positive mass");
    (y as u32 + 1, p)
}

/// Replaces any mask tokens remaining after the final step with the posterior
/// argmax (deterministic, outside the policy log-probability). A no-op under
/// the linear schedule, whose final step unmasks everything.
pub fn finalize_masks(
    model: &PosteriorModel,
    sched: &Scheduler,
    traj: &mut Trajectory,
) -> Result<()> {
    let space = *model.space();
    let mask = match space.mask_token() {
        Some(m) => m,
        None => return Ok(()),
    };
    let needs_fix = traj.terminal().tokens.contains(&mask);
    if !needs_fix {
        return Ok(());
    }
    let t = sched.horizon;
    let terminal = traj.states.last().unwrap().clone();
    let out = model.forward(&terminal, t, traj.condition)?;
    let fixed = traj.states.last_mut().unwrap();
    for i in 0..space.positions {
        if fixed.tokens[i] == mask {
            let argmax = out.probs[i]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(y, _)| y as u32 + 1)
                .unwrap();
            fixed.tokens[i] = argmax;
        }
    }
    Ok(())
}

/// Rolls out `m` trajectories in parallel with per-trajectory seeding and
/// evaluates terminal rewards. Conditions, when the model is conditional, are
/// drawn per trajectory (uniformly, or by the given weights).
pub fn rollout(
    model: &PosteriorModel,
    sched: &Scheduler,
    reward: Option<&RewardFn>,
    m: usize,
    grid: TimeGrid,
    seed: u64,
    condition_weights: Option<&[f64]>,
) -> Result<RolloutBatch> {
    if m == 0 {
        return Err(Error::Domain("rollout batch size must be >= 1".into()));
    }
    let n_conditions = model.arch.n_conditions();
    if let Some(r) = reward {
        r.validate(model.space(), n_conditions)?;
    }
    if let Some(w) = condition_weights {
        if w.len() != n_conditions as usize {
            return Err(Error::Domain(format!(
                "{} condition weights for {n_conditions} conditions",
                w.len()
            )));
        }
    }
    let trajectories: Vec<Trajectory> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[seed, i as u64]));
            let cond = if n_conditions > 0 {
                Some(draw_condition(n_conditions, condition_weights, &mut rng))
            } else {
                None
            };
            let mut traj = sample_policy_trajectory(model, sched, grid, cond, &mut rng)?;
            if let Some(r) = reward {
                traj.reward = r.eval(traj.terminal(), cond);
                debug_assert!(traj.reward.abs() <= r.r_max + 1e-12);
            }
            Ok(traj)
        })
        .collect::<Result<_>>()?;
    Ok(RolloutBatch {
        trajectories,
        grid,
        snapshot: model.version(),
    })
}

fn draw_condition(n: u32, weights: Option<&[f64]>, rng: &mut impl Rng) -> Condition {
    match weights {
        None => Condition(rng.gen_range(0..n)),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut u: f64 = rng.gen::<f64>() * total;
            for (i, &wi) in w.iter().enumerate() {
                u -= wi;
                if u < 0.0 {
                    return Condition(i as u32);
                }
            }
            Condition(n - 1)
        }
    }
}

/// Fills advantages: raw rewards, batch-mean baseline, or group-normalized
/// `(r − mean)/(std + 1e-8)` with population std.
pub fn compute_advantages(batch: &mut RolloutBatch, spec: &AdvantageSpec) -> Result<()> {
    let rewards: Vec<f64> = batch.trajectories.iter().map(|t| t.reward).collect();
    match spec.kind {
        AdvantageKind::Raw => {
            for traj in &mut batch.trajectories {
                traj.advantage = traj.reward;
            }
        }
        AdvantageKind::MeanBaseline => {
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            for traj in &mut batch.trajectories {
                traj.advantage = traj.reward - mean;
            }
        }
        AdvantageKind::GroupNormalized => {
            let groups = group_indices(batch, spec)?;
            for group in groups {
                if group.len() < 2 {
                    return Err(Error::Domain(format!(
                        "group-normalized advantage needs groups of >= 2, got {}",
                        group.len()
                    )));
                }
                let n = group.len() as f64;
                let mean = group.iter().map(|&i| rewards[i]).sum::<f64>() / n;
                let var = group
                    .iter()
                    .map(|&i| (rewards[i] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let std = var.sqrt();
                for &i in &group {
                    batch.trajectories[i].advantage = (rewards[i] - mean) / (std + 1e-8);
                }
            }
        }
    }
    Ok(())
}

fn group_indices(batch: &RolloutBatch, spec: &AdvantageSpec) -> Result<Vec<Vec<usize>>> {
    let conditional = batch.trajectories.iter().any(|t| t.condition.is_some());
    if conditional {
        let mut by_tag: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, t) in batch.trajectories.iter().enumerate() {
            let Condition(tag) = t.condition.ok_or_else(|| {
                Error::Domain("mixed conditional/unconditional batch".into())
            })?;
            by_tag.entry(tag).or_default().push(i);
        }
        Ok(by_tag.into_values().collect())
    } else {
        if spec.group_size < 2 {
            return Err(Error::Domain(
                "group-normalized advantage needs group_size >= 2".into(),
            ));
        }
        if !batch.trajectories.len().is_multiple_of(spec.group_size) {
            return Err(Error::Domain(format!(
                "batch size {} not divisible by group size {}",
                batch.trajectories.len(),
                spec.group_size
            )));
        }
        Ok((0..batch.trajectories.len())
            .collect::<Vec<_>>()
            .chunks(spec.group_size)
            .map(|c| c.to_vec())
            .collect())
    }
}

/// The REINFORCE surrogate `(1/M) Σ_m Σ_t log π_θ(a_t|s_t) · Â_m` on a fixed
/// batch; its θ-gradient is the policy-gradient estimator.
pub fn reinforce_surrogate(
    model: &PosteriorModel,
    sched: &Scheduler,
    batch: &RolloutBatch,
    mut grad: Option<(&mut GradientBuffer, f64)>,
) -> Result<f64> {
    let m = batch.trajectories.len() as f64;
    let mut value = 0.0;
    for traj in &batch.trajectories {
        let adv = traj.advantage;
        for k in 0..batch.grid.steps {
            let t = batch.grid.time_at(k);
            let eval = eval_step(
                model,
                sched,
                &traj.states[k],
                &traj.states[k + 1],
                t,
                batch.grid.dt,
                traj.condition,
            )?;
            value += eval.log_prob * adv / m;
            if let Some((buf, scale)) = &mut grad {
                eval.backprop(model, *scale * adv / m, buf)?;
            }
        }
    }
    Ok(value)
}

/// One REINFORCE iteration: ascent on the surrogate. The batch must be
/// on-policy (generated by the current parameter snapshot).
pub fn reinforce_update(
    model: &mut PosteriorModel,
    sched: &Scheduler,
    batch: &RolloutBatch,
    opt: &mut OptimizerState,
    buf: &mut GradientBuffer,
) -> Result<f64> {
    if batch.snapshot != model.version() {
        return Err(Error::OffPolicy {
            batch_snapshot: batch.snapshot,
            model_version: model.version(),
        });
    }
    buf.zero();
    let value = reinforce_surrogate(model, sched, batch, Some((buf, 1.0)))?;
    model.optimizer_step(opt, buf)?;
    Ok(value)
}

/// Diagnostics from one PPO pass over the batch.
#[derive(Debug, Clone, Copy)]
pub struct PpoPass {
    pub surrogate: f64,
    pub mean_ratio: f64,
    pub max_ratio_dev: f64,
    pub clipped_fraction: f64,
}

/// The clipped surrogate `(1/M) Σ_m Σ_t min(ρ Â, clip(ρ, 1±ε) Â)` with ratios
/// recomputed from the current parameters against the stored log-probs.
pub fn ppo_surrogate(
    model: &PosteriorModel,
    sched: &Scheduler,
    batch: &RolloutBatch,
    clip_eps: f64,
    mut grad: Option<(&mut GradientBuffer, f64)>,
) -> Result<PpoPass> {
    let m = batch.trajectories.len() as f64;
    let mut surrogate = 0.0;
    let mut ratio_sum = 0.0;
    let mut max_dev = 0.0f64;
    let mut clipped = 0usize;
    let mut total = 0usize;
    for traj in &batch.trajectories {
        let adv = traj.advantage;
        for k in 0..batch.grid.steps {
            let t = batch.grid.time_at(k);
            let eval = eval_step(
                model,
                sched,
                &traj.states[k],
                &traj.states[k + 1],
                t,
                batch.grid.dt,
                traj.condition,
            )?;
            let ratio = (eval.log_prob - traj.step_log_probs[k]).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite PPO ratio at step {k}"
                )));
            }
            ratio_sum += ratio;
            max_dev = max_dev.max((ratio - 1.0).abs());
            total += 1;
            let unclipped = ratio * adv;
            let clipped_val = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
            surrogate += unclipped.min(clipped_val) / m;
            let saturated =
                (adv > 0.0 && ratio > 1.0 + clip_eps) || (adv < 0.0 && ratio < 1.0 - clip_eps);
            if saturated {
                clipped += 1;
            } else if let Some((buf, scale)) = &mut grad {
                // d/dθ (ρ·Â) = ρ·Â·∇ log π
                eval.backprop(model, *scale * ratio * adv / m, buf)?;
            }
        }
    }
    Ok(PpoPass {
        surrogate,
        mean_ratio: ratio_sum / total as f64,
        max_ratio_dev: max_dev,
        clipped_fraction: clipped as f64 / total as f64,
    })
}

/// One PPO iteration: `epochs` ascent passes on the clipped surrogate. The
/// batch must carry the current snapshot's log-probs (θ_old = θ at entry).
pub fn ppo_update(
    model: &mut PosteriorModel,
    sched: &Scheduler,
    batch: &RolloutBatch,
    clip_eps: f64,
    epochs: usize,
    opt: &mut OptimizerState,
    buf: &mut GradientBuffer,
) -> Result<Vec<PpoPass>> {
    if batch.snapshot != model.version() {
        return Err(Error::OffPolicy {
            batch_snapshot: batch.snapshot,
            model_version: model.version(),
        });
    }
    if epochs == 0 {
        return Err(Error::Domain("ppo needs >= 1 epoch".into()));
    }
    let mut passes = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        buf.zero();
        let pass = ppo_surrogate(model, sched, batch, clip_eps, Some((buf, 1.0)))?;
        model.optimizer_step(opt, buf)?;
        passes.push(pass);
    }
    Ok(passes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Direction, TabularArch};
    use crate::path::SchedulerKind;

    fn sched() -> Scheduler {
        Scheduler::new(SchedulerKind::Linear, 1.0).unwrap()
    }

    fn tiny_model(seed: u64) -> PosteriorModel {
        let space = StateSpaceSpec::new(2, 2, true).unwrap();
        let arch = Architecture::Tabular(TabularArch::new(space, 2, 1.0, 0).unwrap());
        PosteriorModel::random(arch, seed, 0.4)
    }

    #[test]
    fn step_log_prob_examples() {
        let model = tiny_model(1);
        let s = sched();
        // staying fully masked at t=0, dt=0.1: both positions stay with 1-0.1/1
        let x = model.space().all_mask_state().unwrap();
        let lp = step_log_prob(&model, &s, &x, &x, 0.0, 0.1, None).unwrap();
        assert!((lp - 2.0 * (0.9f64).ln()).abs() < 1e-12);
        // unmasked state cannot move: log-prob 0 for staying
        let y = SequenceState::new(vec![1, 2]);
        let lp = step_log_prob(&model, &s, &y, &y, 0.0, 0.1, None).unwrap();
        assert_eq!(lp, 0.0);
        // jump on position 0: log(0.1 * p(tok))
        let mut z = x.clone();
        z.tokens[0] = 2;
        let out = model.forward(&x, 0.0, None).unwrap();
        let lp = step_log_prob(&model, &s, &x, &z, 0.0, 0.1, None).unwrap();
        let expect = (0.1 * out.probs[0][1]).ln() + (0.9f64).ln();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn step_probabilities_sum_to_one_exhaustively() {
        let model = tiny_model(3);
        let s = sched();
        let space = *model.space();
        for x_idx in 0..space.enumerable_size().unwrap() {
            let x = space.state_at(x_idx);
            let mut total = 0.0;
            for y_idx in 0..space.enumerable_size().unwrap() {
                let y = space.state_at(y_idx);
                // transitions that remask or move frozen positions have
                // probability zero under the policy; skip floored evals
                let eval = eval_step(&model, &s, &x, &y, 0.4, 0.1, None).unwrap();
                if !eval.floored {
                    total += eval.log_prob.exp();
                }
            }
            assert!((total - 1.0).abs() < 1e-9, "state {x_idx}: total {total}");
        }
    }

    #[test]
    fn policy_kernel_matches_generic_rate_path() {
        // the closed-form policy PMFs equal step_kernel over
        // posterior_to_velocity(effective posterior) to float noise
        let model = tiny_model(5);
        let s = sched();
        let space = *model.space();
        let x = SequenceState::new(vec![3, 2]);
        let out = model.forward(&x, 0.3, None).unwrap();
        let pmfs = policy_step_pmfs(&out.probs, &space, &s, &x, 0.3, 0.1).unwrap();
        let field = PolicyRates {
            model: &model,
            sched: &s,
            cond: None,
        };
        let rates = field.rates(&x, 0.3);
        let kernel =
            crate::ctmc::step_kernel(&rates, &x, 0.1, crate::ctmc::KernelMode::Strict).unwrap();
        for (a, b) in pmfs.iter().flatten().zip(kernel.probs.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_is_reproducible_and_reward_filled() {
        let model = tiny_model(7);
        let s = sched();
        let grid = TimeGrid::new(1.0, 0.25).unwrap();
        let reward = RewardFn::motif_count(vec![1], model.space()).unwrap();
        let a = rollout(&model, &s, Some(&reward), 6, grid, 99, None).unwrap();
        let b = rollout(&model, &s, Some(&reward), 6, grid, 99, None).unwrap();
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(ta.states, tb.states);
            assert_eq!(ta.step_log_probs, tb.step_log_probs);
            assert_eq!(ta.reward, tb.reward);
        }
        // linear schedule unmasks everything by T
        let mask = model.space().mask_token().unwrap();
        for t in &a.trajectories {
            assert!(!t.terminal().tokens.contains(&mask));
        }
    }

    #[test]
    fn advantage_examples() {
        let model = tiny_model(7);
        let s = sched();
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let mut batch = rollout(&model, &s, None, 2, grid, 1, None).unwrap();
        batch.trajectories[0].reward = 1.0;
        batch.trajectories[1].reward = 3.0;
        compute_advantages(&mut batch, &AdvantageSpec::MEAN_BASELINE).unwrap();
        assert!((batch.trajectories[0].advantage + 1.0).abs() < 1e-12);
        assert!((batch.trajectories[1].advantage - 1.0).abs() < 1e-12);

        batch.trajectories[0].reward = 0.0;
        batch.trajectories[1].reward = 2.0;
        compute_advantages(
            &mut batch,
            &AdvantageSpec {
                kind: AdvantageKind::GroupNormalized,
                group_size: 2,
            },
        )
        .unwrap();
        assert!((batch.trajectories[0].advantage + 1.0).abs() < 1e-6);
        assert!((batch.trajectories[1].advantage - 1.0).abs() < 1e-6);

        // constant rewards: zero advantages under the mean baseline
        batch.trajectories[0].reward = 5.0;
        batch.trajectories[1].reward = 5.0;
        compute_advantages(&mut batch, &AdvantageSpec::MEAN_BASELINE).unwrap();
        assert!(batch.trajectories.iter().all(|t| t.advantage == 0.0));
    }

    #[test]
    fn group_size_violation_rejected() {
        let model = tiny_model(7);
        let s = sched();
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let mut batch = rollout(&model, &s, None, 3, grid, 1, None).unwrap();
        let spec = AdvantageSpec {
            kind: AdvantageKind::GroupNormalized,
            group_size: 2,
        };
        assert!(compute_advantages(&mut batch, &spec).is_err());
    }

    #[test]
    fn reinforce_zero_advantages_leave_model_unchanged() {
        let mut model = tiny_model(11);
        let s = sched();
        let grid = TimeGrid::new(1.0, 0.25).unwrap();
        let mut batch = rollout(&model, &s, None, 4, grid, 2, None).unwrap();
        compute_advantages(&mut batch, &AdvantageSpec::MEAN_BASELINE).unwrap();
        let before = model.params().to_vec();
        let mut opt = OptimizerState::sgd(0.1, Direction::Ascent);
        let mut buf = GradientBuffer::zeros(model.n_params());
        reinforce_update(&mut model, &s, &batch, &mut opt, &mut buf).unwrap();
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn off_policy_batch_rejected() {
        let mut model = tiny_model(13);
        let s = sched();
        let grid = TimeGrid::new(1.0, 0.25).unwrap();
        let mut batch = rollout(&model, &s, None, 2, grid, 3, None).unwrap();
        compute_advantages(&mut batch, &AdvantageSpec::MEAN_BASELINE).unwrap();
        model.params_mut()[0] += 0.01;
        let mut opt = OptimizerState::sgd(0.1, Direction::Ascent);
        let mut buf = GradientBuffer::zeros(model.n_params());
        match reinforce_update(&mut model, &s, &batch, &mut opt, &mut buf) {
            Err(Error::OffPolicy { .. }) => {}
            other => panic!("expected off-policy error, got {other:?}"),
        }
    }

    #[test]
    fn ppo_first_pass_ratios_exactly_one() {
        let mut model = tiny_model(17);
        let s = sched();
        let grid = TimeGrid::new(1.0, 0.2).unwrap();
        let reward = RewardFn::motif_count(vec![2], model.space()).unwrap();
        let mut batch = rollout(&model, &s, Some(&reward), 8, grid, 5, None).unwrap();
        compute_advantages(&mut batch, &AdvantageSpec::MEAN_BASELINE).unwrap();
        let pass = ppo_surrogate(&model, &s, &batch, 0.2, None).unwrap();
        assert_eq!(pass.max_ratio_dev, 0.0, "ratios must be exactly 1 at entry");
        // at ratio 1 the surrogate equals the mean summed advantage over steps
        let expect: f64 = batch
            .trajectories
            .iter()
            .map(|t| t.advantage * grid.steps as f64)
            .sum::<f64>()
            / batch.trajectories.len() as f64;
        assert!((pass.surrogate - expect).abs() < 1e-10);

        // a full update moves parameters when advantages vary
        let mut opt = OptimizerState::adam(1e-2, Direction::Ascent);
        let mut buf = GradientBuffer::zeros(model.n_params());
        let before = model.params().to_vec();
        let passes = ppo_update(&mut model, &s, &batch, 0.2, 3, &mut opt, &mut buf).unwrap();
        assert_eq!(passes.len(), 3);
        assert_eq!(passes[0].max_ratio_dev, 0.0);
        assert!(passes[2].max_ratio_dev > 0.0);
        assert_ne!(model.params(), &before[..]);
    }

    #[test]
    fn ppo_saturated_clip_has_zero_gradient() {
        // positive advantage and ratio far above 1+eps: term contributes no
        // gradient. Construct by shifting θ after rollout (surrogate only).
        let mut model = tiny_model(19);
        let s = sched();
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        let reward = RewardFn::motif_count(vec![1], model.space()).unwrap();
        let mut batch = rollout(&model, &s, Some(&reward), 1, grid, 8, None).unwrap();
        batch.trajectories[0].advantage = 1.0;
        // push every logit the trajectory used upward hard
        for p in model.params_mut() {
            *p += 3.0;
        }
        let mut buf = GradientBuffer::zeros(model.n_params());
        let pass = ppo_surrogate(&model, &s, &batch, 0.05, Some((&mut buf, 1.0))).unwrap();
        if pass.clipped_fraction == 1.0 {
            assert!(buf.grad.iter().all(|&g| g == 0.0));
            assert!((pass.surrogate - 1.05 * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_estimator_equals_score_function_identity() {
        // T = dt = 1: the single step samples the posterior directly, so
        // E[∇ log π · r] must equal Σ_y r(y) ∇ p(y)
        let space = StateSpaceSpec::new(1, 2, true).unwrap();
        let arch = Architecture::Tabular(TabularArch::new(space, 1, 1.0, 0).unwrap());
        let model = PosteriorModel::random(arch, 23, 0.6);
        let s = sched();
        let grid = TimeGrid::new(1.0, 1.0).unwrap();
        let x0 = space.all_mask_state().unwrap();
        let rewards = [0.3, -1.1];
        // direct gradient of J = sum_y p(y) r(y)
        let out = model.forward(&x0, 0.0, None).unwrap();
        let mut direct = GradientBuffer::zeros(model.n_params());
        let upstream = vec![rewards.to_vec()];
        model.backward(&out.cache, &upstream, &mut direct).unwrap();
        // estimator expectation: enumerate both outcomes
        let mut estimator = GradientBuffer::zeros(model.n_params());
        for (y, &r) in rewards.iter().enumerate() {
            let mut next = x0.clone();
            next.tokens[0] = y as u32 + 1;
            let eval = eval_step(&model, &s, &x0, &next, 0.0, 1.0, None).unwrap();
            let p = eval.log_prob.exp();
            eval.backprop(&model, p * r, &mut estimator).unwrap();
        }
        for (a, b) in direct.grad.iter().zip(&estimator.grad) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let _ = grid;
    }
}
