//! Theory harness: quantitative desk-scale experiments confirming the
//! discretization-error scaling of the Euler sampler (value and gradient),
//! the TV-vs-regularizer-gap bounds, and estimator-vs-oracle agreement.
//!
//! The gradient oracle differentiates the joint push-forward recursion
//! `p_{k+1} = (I + Δt·U_{t_k}) p_k` in forward mode, against an RK4-integrated
//! continuous reference of the same augmented system, deliberately avoiding
//! the model's own backward pass.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::ctmc::{
    apply_generator, push_forward_euler, push_forward_euler_snapshots, KernelMode,
    RateEvaluation, RateField, TimeGrid,
};
use crate::error::{Error, Result};
use crate::model::{GradientBuffer, PosteriorModel};
use crate::path::Scheduler;
use crate::regularize::{ce_regularizer, gkl_regularizer, RegKind, RegState};
use crate::rl::{eval_step, policy_step_pmfs, PolicyRates, RewardFn};
use crate::seed_mix;
use crate::state::{tv_distance, DistributionTable, SequenceState, StateSpaceSpec};

/// Slope acceptance band for `O(Δt)` scaling claims.
pub const SLOPE_BAND: (f64, f64) = (0.9, 1.1);
/// Slope ceiling for TV-vs-gap scatter (square-root bounds).
pub const TV_SLOPE_MAX: f64 = 0.6;

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    /// Sweep variable (Δt or the regularizer gap).
    pub x: f64,
    pub measured: f64,
    pub oracle: f64,
    pub error: f64,
}

/// Machine-readable sweep result with a fitted log-log slope.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub check: String,
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
    pub slope: f64,
    pub criterion: String,
    pub pass: bool,
    pub details: Vec<(String, String)>,
}

impl SweepReport {
    /// Structured text: key=value header followed by data rows.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("check={}\n", self.check));
        out.push_str(&format!("config_hash={}\n", self.config_hash));
        out.push_str(&format!("slope={:.6}\n", self.slope));
        out.push_str(&format!("criterion={}\n", self.criterion));
        out.push_str(&format!("pass={}\n", self.pass));
        for (k, v) in &self.details {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str("columns=x measured oracle error\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:.10e} {:.10e} {:.10e} {:.10e}\n",
                p.x, p.measured, p.oracle, p.error
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.report", self.check));
        let mut file = std::fs::File::create(&path)?;
        file.write_all(self.render().as_bytes())?;
        Ok(path)
    }
}

/// Least-squares slope of `ln y` against `ln x` over positive points.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    let data: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if data.len() < 2 {
        return Err(Error::Domain(
            "slope fit needs >= 2 positive points".into(),
        ));
    }
    let n = data.len() as f64;
    let mx = data.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = data.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in &data {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return Err(Error::Domain("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Bounded, smooth, time-modulated random rate family over a product space,
/// with analytic parameter derivatives of every rate entry.
///
/// Rates depend on the position's own token: `r_i(y | x, t) =
/// scale · softplus(θ[i, x_i, y]) · w(t)` with `w(t) = 1 + 0.5 sin(2πt/T)`.
pub struct RandomRateModel {
    pub space: StateSpaceSpec,
    pub horizon: f64,
    pub scale: f64,
    params: Vec<f64>,
    softplus: Vec<f64>,
    sigmoid: Vec<f64>,
}

impl RandomRateModel {
    pub fn random(space: StateSpaceSpec, horizon: f64, scale: f64, seed: u64) -> Self {
        let v = space.full_vocab() as usize;
        let n = space.positions * v * v;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let softplus = params.iter().map(|&z| (1.0 + z.exp()).ln()).collect();
        let sigmoid = params.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        Self {
            space,
            horizon,
            scale,
            params,
            softplus,
            sigmoid,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn w(&self, t: f64) -> f64 {
        1.0 + 0.5 * (2.0 * std::f64::consts::PI * t / self.horizon).sin()
    }

    fn idx(&self, pos: usize, cur: usize, y: usize) -> usize {
        let v = self.space.full_vocab() as usize;
        (pos * v + cur) * v + y
    }

    /// `∂r_i(y|x,t) / ∂θ_q` for the parameter owning that entry.
    fn d_rate(&self, q: usize, t: f64) -> f64 {
        self.scale * self.sigmoid[q] * self.w(t)
    }

    /// Applies `(∂U/∂θ_q) p` for parameter `q = (pos, cur, y)`.
    fn apply_d_generator(&self, q: usize, t: f64, p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let v = self.space.full_vocab() as usize;
        let d = self.space.positions;
        let y = q % v;
        let cur = (q / v) % v;
        let pos = q / (v * v);
        if y == cur {
            return;
        }
        let dr = self.d_rate(q, t);
        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * v;
        }
        for (idx, &mass) in p.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let token = idx / strides[pos] % v;
            if token != cur {
                continue;
            }
            let nbr = (idx as isize + (y as isize - cur as isize) * strides[pos] as isize) as usize;
            out[nbr] += dr * mass;
            out[idx] -= dr * mass;
        }
    }
}

impl RateField for RandomRateModel {
    fn rates(&self, x: &SequenceState, t: f64) -> RateEvaluation {
        let v = self.space.full_vocab() as usize;
        let w = self.w(t);
        let mut off = vec![vec![0.0; v]; self.space.positions];
        for i in 0..self.space.positions {
            let cur = x.tokens[i] as usize - 1;
            for y in 0..v {
                if y != cur {
                    off[i][y] = self.scale * self.softplus[self.idx(i, cur, y)] * w;
                }
            }
        }
        RateEvaluation::from_off_diagonal(x, off)
    }
}

/// Value and full parameter gradient of the expected reward under the joint
/// Euler recursion `p_{k+1} = (I + Δt U) p_k` (forward-mode accumulation).
pub fn joint_euler_value_and_grad(
    model: &RandomRateModel,
    reward: &[f64],
    p0: &DistributionTable,
    grid: TimeGrid,
) -> Result<(f64, Vec<f64>)> {
    let space = model.space;
    let n = space.enumerable_size()?;
    let nq = model.n_params();
    let mut p = p0.mass().to_vec();
    let mut grads = vec![vec![0.0; n]; nq];
    let mut up = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for k in 0..grid.steps {
        let t = grid.time_at(k);
        apply_generator(&space, model, t, &p, &mut up);
        for q in 0..nq {
            // g ← g + Δt (U g + (∂U) p)
            apply_generator(&space, model, t, &grads[q], &mut tmp);
            for i in 0..n {
                grads[q][i] += grid.dt * tmp[i];
            }
            model.apply_d_generator(q, t, &p, &mut tmp);
            for i in 0..n {
                grads[q][i] += grid.dt * tmp[i];
            }
        }
        for i in 0..n {
            p[i] += grid.dt * up[i];
        }
    }
    let value = dot(&p, reward);
    let grad = grads.iter().map(|g| dot(g, reward)).collect();
    Ok((value, grad))
}

/// Continuous-time reference of the same quantities: RK4 on the augmented
/// system `p' = U p`, `g' = U g + (∂U) p`.
pub fn continuous_value_and_grad(
    model: &RandomRateModel,
    reward: &[f64],
    p0: &DistributionTable,
    horizon: f64,
    steps: usize,
) -> Result<(f64, Vec<f64>)> {
    let space = model.space;
    let n = space.enumerable_size()?;
    let nq = model.n_params();
    let h = horizon / steps as f64;
    let mut p = p0.mass().to_vec();
    let mut grads = vec![vec![0.0; n]; nq];

    // augmented derivative at (t, p, g_q): returns (dp, dg for each q)
    let deriv = |t: f64, p: &[f64], grads: &[Vec<f64>]| {
        let mut dp = vec![0.0; n];
        apply_generator(&space, model, t, p, &mut dp);
        let mut dgs = Vec::with_capacity(nq);
        let mut tmp = vec![0.0; n];
        for (q, g) in grads.iter().enumerate() {
            let mut dg = vec![0.0; n];
            apply_generator(&space, model, t, g, &mut dg);
            model.apply_d_generator(q, t, p, &mut tmp);
            for i in 0..n {
                dg[i] += tmp[i];
            }
            dgs.push(dg);
        }
        (dp, dgs)
    };

    for step in 0..steps {
        let t = step as f64 * h;
        let (kp1, kg1) = deriv(t, &p, &grads);
        let p2: Vec<f64> = (0..n).map(|i| p[i] + 0.5 * h * kp1[i]).collect();
        let g2: Vec<Vec<f64>> = (0..nq)
            .map(|q| (0..n).map(|i| grads[q][i] + 0.5 * h * kg1[q][i]).collect())
            .collect();
        let (kp2, kg2) = deriv(t + 0.5 * h, &p2, &g2);
        let p3: Vec<f64> = (0..n).map(|i| p[i] + 0.5 * h * kp2[i]).collect();
        let g3: Vec<Vec<f64>> = (0..nq)
            .map(|q| (0..n).map(|i| grads[q][i] + 0.5 * h * kg2[q][i]).collect())
            .collect();
        let (kp3, kg3) = deriv(t + 0.5 * h, &p3, &g3);
        let p4: Vec<f64> = (0..n).map(|i| p[i] + h * kp3[i]).collect();
        let g4: Vec<Vec<f64>> = (0..nq)
            .map(|q| (0..n).map(|i| grads[q][i] + h * kg3[q][i]).collect())
            .collect();
        let (kp4, kg4) = deriv(t + h, &p4, &g4);
        for i in 0..n {
            p[i] += h / 6.0 * (kp1[i] + 2.0 * kp2[i] + 2.0 * kp3[i] + kp4[i]);
        }
        for q in 0..nq {
            for i in 0..n {
                grads[q][i] +=
                    h / 6.0 * (kg1[q][i] + 2.0 * kg2[q][i] + 2.0 * kg3[q][i] + kg4[q][i]);
            }
        }
    }
    let value = dot(&p, reward);
    let grad = grads.iter().map(|g| dot(g, reward)).collect();
    Ok((value, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// |J − J̃| against Δt: the discrete value from the exact factorized
/// push-forward, the continuous reference from the Kolmogorov equation.
pub fn discretization_value_sweep(
    field: &dyn RateField,
    reward: &[f64],
    p0: &DistributionTable,
    horizon: f64,
    dts: &[f64],
    kolmogorov_steps_per_unit: usize,
) -> Result<SweepReport> {
    if dts.len() < 4 {
        return Err(Error::Domain("sweep needs >= 4 step sizes".into()));
    }
    let exact = crate::ctmc::kolmogorov_exact(field, p0, horizon, kolmogorov_steps_per_unit)?;
    let j_exact = dot(exact.mass(), reward);
    let mut points = Vec::with_capacity(dts.len());
    for &dt in dts {
        let grid = TimeGrid::new(horizon, dt)?;
        let p_t = push_forward_euler(field, p0, grid, KernelMode::Strict)?;
        let j = dot(p_t.mass(), reward);
        points.push(SweepPoint {
            x: dt,
            measured: j,
            oracle: j_exact,
            error: (j - j_exact).abs(),
        });
    }
    let slope = log_log_slope(&points.iter().map(|p| (p.x, p.error)).collect::<Vec<_>>())?;
    let pass = slope >= SLOPE_BAND.0 && slope <= SLOPE_BAND.1;
    Ok(SweepReport {
        check: "discretization_value".into(),
        config_hash: "none".into(),
        points,
        slope,
        criterion: format!("log-log slope in [{}, {}]", SLOPE_BAND.0, SLOPE_BAND.1),
        pass,
        details: vec![("j_exact".into(), format!("{j_exact:.12e}"))],
    })
}

/// `‖∇J − ∇J̃‖_∞` against Δt via the forward-mode recursion oracle.
pub fn discretization_grad_sweep(
    model: &RandomRateModel,
    reward: &[f64],
    p0: &DistributionTable,
    horizon: f64,
    dts: &[f64],
    reference_steps: usize,
) -> Result<SweepReport> {
    if dts.len() < 4 {
        return Err(Error::Domain("sweep needs >= 4 step sizes".into()));
    }
    let (_, grad_exact) = continuous_value_and_grad(model, reward, p0, horizon, reference_steps)?;
    let mut points = Vec::with_capacity(dts.len());
    for &dt in dts {
        let grid = TimeGrid::new(horizon, dt)?;
        let (_, grad) = joint_euler_value_and_grad(model, reward, p0, grid)?;
        let err = grad
            .iter()
            .zip(&grad_exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let norm = grad_exact.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        points.push(SweepPoint {
            x: dt,
            measured: err,
            oracle: norm,
            error: err,
        });
    }
    let slope = log_log_slope(&points.iter().map(|p| (p.x, p.error)).collect::<Vec<_>>())?;
    let pass = slope >= SLOPE_BAND.0 && slope <= SLOPE_BAND.1;
    Ok(SweepReport {
        check: "discretization_grad".into(),
        config_hash: "none".into(),
        points,
        slope,
        criterion: format!("log-log slope in [{}, {}]", SLOPE_BAND.0, SLOPE_BAND.1),
        pass,
        details: Vec::new(),
    })
}

/// Exact regularizer gap between a model and the reference, with the state
/// expectation taken against enumerated reference marginals `p_{t_k}^ref`.
pub fn exact_regularizer_gap(
    model: &PosteriorModel,
    reference: &PosteriorModel,
    sched: &Scheduler,
    kind: RegKind,
    marginals: &[(f64, DistributionTable)],
) -> Result<f64> {
    let mut states = Vec::new();
    let t_w = 1.0 / marginals.len() as f64;
    for (t, table) in marginals {
        for (idx, &mass) in table.mass().iter().enumerate() {
            if mass > 1e-300 {
                states.push(RegState {
                    t: *t,
                    state: table.space.state_at(idx),
                    cond: None,
                    weight: mass * t_w,
                });
            }
        }
    }
    match kind {
        RegKind::Ce => {
            let at_model = ce_regularizer(model, reference, &states, None)?;
            let at_ref = ce_regularizer(reference, reference, &states, None)?;
            Ok(at_model - at_ref)
        }
        RegKind::Gkl => gkl_regularizer(model, reference, sched, &states, None),
        _ => Err(Error::Domain(
            "gap is defined for the ce and gkl regularizers".into(),
        )),
    }
}

/// Reference marginals `p_{t}^ref` on a uniform time grid, computed by a fine
/// factorized push-forward.
pub fn reference_marginals(
    reference: &PosteriorModel,
    sched: &Scheduler,
    fine_dt: f64,
    time_points: usize,
) -> Result<Vec<(f64, DistributionTable)>> {
    let space = *reference.space();
    let grid = TimeGrid::new(sched.horizon, fine_dt)?;
    let p0 = DistributionTable::delta(space, &space.all_mask_state()?)?;
    let field = PolicyRates {
        model: reference,
        sched,
        cond: None,
    };
    let stride = (grid.steps / time_points).max(1);
    let snapshot_steps: Vec<usize> = (0..time_points).map(|j| j * stride).collect();
    let snaps = push_forward_euler_snapshots(&field, &p0, grid, KernelMode::Strict, &snapshot_steps)?;
    Ok(snaps
        .at_steps
        .into_iter()
        .map(|(k, table)| (grid.time_at(k), table))
        .collect())
}

/// Exact terminal TV between two posterior models under a fine Euler grid.
pub fn exact_terminal_tv(
    a: &PosteriorModel,
    b: &PosteriorModel,
    sched: &Scheduler,
    fine_dt: f64,
) -> Result<f64> {
    let space = *a.space();
    let grid = TimeGrid::new(sched.horizon, fine_dt)?;
    let p0 = DistributionTable::delta(space, &space.all_mask_state()?)?;
    let pa = push_forward_euler(
        &PolicyRates {
            model: a,
            sched,
            cond: None,
        },
        &p0,
        grid,
        KernelMode::Strict,
    )?;
    let pb = push_forward_euler(
        &PolicyRates {
            model: b,
            sched,
            cond: None,
        },
        &p0,
        grid,
        KernelMode::Strict,
    )?;
    tv_distance(&pa, &pb)
}

/// Scatter of exact terminal TV against the regularizer gap over random
/// parameter perturbations `θ = θ_ref + σξ`. Passes when the fitted log-log
/// slope is at most [`TV_SLOPE_MAX`] (square-root bound) and the pointwise
/// bound `TV <= C·sqrt(gap)` holds for the fitted constant.
#[allow(clippy::too_many_arguments)]
pub fn tv_bound_sweep(
    reference: &PosteriorModel,
    sched: &Scheduler,
    kind: RegKind,
    sigmas: &[f64],
    directions: usize,
    seed: u64,
    fine_dt: f64,
    gap_time_points: usize,
) -> Result<SweepReport> {
    if sigmas.len() * directions < 4 {
        return Err(Error::Domain("sweep needs >= 4 perturbation points".into()));
    }
    let marginals = reference_marginals(reference, sched, fine_dt, gap_time_points)?;
    let mut points = Vec::new();
    for dir in 0..directions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[seed, dir as u64]));
        let xi: Vec<f64> = (0..reference.n_params())
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        for &sigma in sigmas {
            let mut perturbed = reference.clone();
            for (p, x) in perturbed.params_mut().iter_mut().zip(&xi) {
                *p += sigma * x;
            }
            let tv = exact_terminal_tv(&perturbed, reference, sched, fine_dt)?;
            let gap = exact_regularizer_gap(&perturbed, reference, sched, kind, &marginals)?;
            points.push(SweepPoint {
                x: gap,
                measured: tv,
                oracle: gap.max(0.0).sqrt(),
                error: tv,
            });
        }
    }
    let slope = log_log_slope(
        &points
            .iter()
            .map(|p| (p.x, p.measured))
            .collect::<Vec<_>>(),
    )?;
    // smallest constant making TV <= C sqrt(gap) hold pointwise
    let c_fit = points
        .iter()
        .filter(|p| p.x > 0.0)
        .map(|p| p.measured / p.x.sqrt())
        .fold(0.0f64, f64::max);
    let pointwise = points
        .iter()
        .all(|p| p.measured <= c_fit * p.x.max(0.0).sqrt() + 1e-12);
    let pass = slope <= TV_SLOPE_MAX && pointwise;
    let kind_name = match kind {
        RegKind::Ce => "ce",
        RegKind::Gkl => "gkl",
        _ => "other",
    };
    Ok(SweepReport {
        check: format!("tv_bound_{kind_name}"),
        config_hash: "none".into(),
        points,
        slope,
        criterion: format!("log-log slope of TV vs gap <= {TV_SLOPE_MAX}; TV <= C*sqrt(gap)"),
        pass,
        details: vec![("c_fit".into(), format!("{c_fit:.6e}"))],
    })
}

/// Enumerates every positive-probability policy trajectory, invoking the
/// visitor with the state path and its exact probability.
pub fn enumerate_policy_trajectories(
    model: &PosteriorModel,
    sched: &Scheduler,
    grid: TimeGrid,
    visitor: &mut dyn FnMut(&[SequenceState], f64) -> Result<()>,
) -> Result<()> {
    let space = *model.space();
    let start = space.all_mask_state()?;
    let mut path = vec![start];
    let mut visited = 0usize;
    descend(model, sched, grid, 0, 1.0, &mut path, &mut visited, visitor)
}

#[allow(clippy::too_many_arguments)]
fn descend(
    model: &PosteriorModel,
    sched: &Scheduler,
    grid: TimeGrid,
    k: usize,
    prob: f64,
    path: &mut Vec<SequenceState>,
    visited: &mut usize,
    visitor: &mut dyn FnMut(&[SequenceState], f64) -> Result<()>,
) -> Result<()> {
    if k == grid.steps {
        *visited += 1;
        if *visited > 1_000_000 {
            return Err(Error::NotEnumerable {
                size: *visited as u128,
                cap: 1_000_000,
            });
        }
        return visitor(path, prob);
    }
    let t = grid.time_at(k);
    let x = path.last().unwrap().clone();
    let out = model.forward(&x, t, None)?;
    let pmfs = policy_step_pmfs(&out.probs, model.space(), sched, &x, t, grid.dt)?;
    let d = model.space().positions;
    let supports: Vec<Vec<usize>> = pmfs
        .iter()
        .map(|pmf| {
            pmf.iter()
                .enumerate()
                .filter(|&(_, &p)| p > 0.0)
                .map(|(y, _)| y)
                .collect()
        })
        .collect();
    let mut counter = vec![0usize; d];
    loop {
        let mut p_step = prob;
        let mut next = x.clone();
        for i in 0..d {
            let y = supports[i][counter[i]];
            p_step *= pmfs[i][y];
            next.tokens[i] = y as u32 + 1;
        }
        path.push(next);
        descend(model, sched, grid, k + 1, p_step, path, visited, visitor)?;
        path.pop();
        // odometer over the support lists
        let mut pos = d;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            counter[pos] += 1;
            if counter[pos] < supports[pos].len() {
                break;
            }
            counter[pos] = 0;
        }
    }
}

/// Estimator-vs-oracle agreement on a tiny tabular task.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub config_hash: String,
    /// Exact RL objective by exhaustive trajectory enumeration.
    pub j_trajectories: f64,
    /// Exact objective by terminal-marginal push-forward.
    pub j_marginal: f64,
    pub identity_gap: f64,
    /// Cosine similarity of the Monte-Carlo mean gradient with the exact one.
    pub cosine_similarity: f64,
    /// Worst per-coordinate z-score of the Monte-Carlo mean.
    pub max_z_score: f64,
    /// z-score of the Monte-Carlo mean reward against the exact expectation.
    pub reward_z_score: f64,
    pub mc_samples: usize,
    /// |PPO surrogate at θ_old − Σ advantages| (ratio-one identity).
    pub ppo_identity_gap: f64,
    pub pass: bool,
}

impl EstimatorReport {
    pub fn render(&self) -> String {
        format!(
            "check=estimator_oracle\nconfig_hash={}\nj_trajectories={:.12e}\nj_marginal={:.12e}\nidentity_gap={:.3e}\ncosine_similarity={:.8}\nmax_z_score={:.4}\nreward_z_score={:.4}\nmc_samples={}\nppo_identity_gap={:.3e}\npass={}\n",
            self.config_hash,
            self.j_trajectories,
            self.j_marginal,
            self.identity_gap,
            self.cosine_similarity,
            self.max_z_score,
            self.reward_z_score,
            self.mc_samples,
            self.ppo_identity_gap,
            self.pass
        )
    }

    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("estimator_oracle.report");
        std::fs::File::create(&path)?.write_all(self.render().as_bytes())?;
        Ok(path)
    }
}

/// Exact `J_RL` and its exact gradient by trajectory enumeration.
pub fn exact_rl_objective(
    model: &PosteriorModel,
    sched: &Scheduler,
    reward: &RewardFn,
    grid: TimeGrid,
) -> Result<(f64, Vec<f64>)> {
    let mut j = 0.0;
    let mut buf = GradientBuffer::zeros(model.n_params());
    let mut walk = |path: &[SequenceState], prob: f64| -> Result<()> {
        let r = reward.eval(path.last().unwrap(), None);
        j += prob * r;
        if prob * r != 0.0 {
            for k in 0..grid.steps {
                let eval = eval_step(
                    model,
                    sched,
                    &path[k],
                    &path[k + 1],
                    grid.time_at(k),
                    grid.dt,
                    None,
                )?;
                eval.backprop(model, prob * r, &mut buf)?;
            }
        }
        Ok(())
    };
    enumerate_policy_trajectories(model, sched, grid, &mut walk)?;
    Ok((j, buf.grad))
}

/// Checks the objective identities and estimator unbiasedness:
/// exhaustive `J_RL` vs marginal `J`, Monte-Carlo REINFORCE gradient vs the
/// exact gradient, and the PPO ratio-one surrogate value.
pub fn estimator_oracle_check(
    model: &PosteriorModel,
    sched: &Scheduler,
    reward: &RewardFn,
    grid: TimeGrid,
    mc_samples: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    let space = *model.space();
    let (j_traj, grad_exact) = exact_rl_objective(model, sched, reward, grid)?;

    // marginal route
    let p0 = DistributionTable::delta(space, &space.all_mask_state()?)?;
    let field = PolicyRates {
        model,
        sched,
        cond: None,
    };
    let p_t = push_forward_euler(&field, &p0, grid, KernelMode::Strict)?;
    let j_marginal: f64 = p_t
        .mass()
        .iter()
        .enumerate()
        .map(|(idx, &m)| m * reward.eval(&space.state_at(idx), None))
        .sum();
    let identity_gap = (j_traj - j_marginal).abs();

    // Monte-Carlo REINFORCE gradient with raw terminal reward
    let nq = model.n_params();
    let mut sum = vec![0.0; nq];
    let mut sumsq = vec![0.0; nq];
    let mut reward_sum = 0.0;
    let mut reward_sumsq = 0.0;
    let mut sample_buf = GradientBuffer::zeros(nq);
    for i in 0..mc_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[seed, i as u64]));
        let traj = crate::rl::sample_policy_trajectory(model, sched, grid, None, &mut rng)?;
        let r = reward.eval(traj.terminal(), None);
        reward_sum += r;
        reward_sumsq += r * r;
        sample_buf.zero();
        if r != 0.0 {
            for k in 0..grid.steps {
                let eval = eval_step(
                    model,
                    sched,
                    &traj.states[k],
                    &traj.states[k + 1],
                    grid.time_at(k),
                    grid.dt,
                    None,
                )?;
                eval.backprop(model, r, &mut sample_buf)?;
            }
        }
        for q in 0..nq {
            sum[q] += sample_buf.grad[q];
            sumsq[q] += sample_buf.grad[q] * sample_buf.grad[q];
        }
    }
    let nf = mc_samples as f64;
    let mut max_z = 0.0f64;
    let mut dot_me = 0.0;
    let mut norm_m = 0.0;
    let mut norm_e = 0.0;
    for q in 0..nq {
        let mean = sum[q] / nf;
        let var = (sumsq[q] / nf - mean * mean).max(0.0);
        let stderr = (var / nf).sqrt();
        let dev = (mean - grad_exact[q]).abs();
        if stderr > 0.0 {
            max_z = max_z.max(dev / stderr);
        } else if dev > 1e-12 {
            max_z = f64::INFINITY;
        }
        dot_me += mean * grad_exact[q];
        norm_m += mean * mean;
        norm_e += grad_exact[q] * grad_exact[q];
    }
    let cosine = dot_me / (norm_m.sqrt() * norm_e.sqrt());
    let reward_mean = reward_sum / nf;
    let reward_var = (reward_sumsq / nf - reward_mean * reward_mean).max(0.0);
    let reward_z = (reward_mean - j_marginal).abs() / ((reward_var / nf).sqrt() + 1e-300);

    // PPO ratio-one identity on a small fresh batch
    let mut batch = crate::rl::rollout(model, sched, Some(reward), 16, grid, seed ^ 0xabcd, None)?;
    crate::rl::compute_advantages(&mut batch, &crate::rl::AdvantageSpec::MEAN_BASELINE)?;
    let pass0 = crate::rl::ppo_surrogate(model, sched, &batch, 0.2, None)?;
    let expected: f64 = batch
        .trajectories
        .iter()
        .map(|t| t.advantage * grid.steps as f64)
        .sum::<f64>()
        / batch.trajectories.len() as f64;
    let ppo_identity_gap = (pass0.surrogate - expected).abs();

    let pass = identity_gap < 1e-10
        && cosine > 0.99
        && max_z <= 3.0
        && reward_z <= 3.0
        && ppo_identity_gap < 1e-10;
    Ok(EstimatorReport {
        config_hash: "none".into(),
        j_trajectories: j_traj,
        j_marginal,
        identity_gap,
        cosine_similarity: cosine,
        max_z_score: max_z,
        reward_z_score: reward_z,
        mc_samples,
        ppo_identity_gap,
        pass,
    })
}

// ---- standard desk-scale check instances ----
//
// These fixed setups are shared between the `verify` subcommand and the
// acceptance suite so tolerances and spaces are pinned in exactly one place.

use crate::model::{Architecture, TabularArch};
use crate::path::SchedulerKind;

/// Δt sweep used by the discretization checks.
pub const SWEEP_DTS: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
/// Analytic absorbing-chain errors at Δt = 0.1 and 0.05 (vs `1 − e^{-1}`).
pub const ABSORBING_ERRORS: (f64, f64) = (0.0192, 0.0094);

fn random_reward(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Discretization value scaling: the absorbing-chain analytic errors plus
/// slope fits on five random bounded-rate models over 27 states.
pub fn standard_value_check(seed: u64) -> Result<Vec<SweepReport>> {
    let mut reports = Vec::new();

    // 2-state absorbing chain with its analytic error values
    let chain_space = StateSpaceSpec::new(1, 2, false)?;
    let chain = |x: &SequenceState, _t: f64| {
        let mut off = vec![vec![0.0; 2]];
        if x.tokens[0] == 1 {
            off[0][1] = 1.0;
        }
        RateEvaluation::from_off_diagonal(x, off)
    };
    let p0 = DistributionTable::delta(chain_space, &SequenceState::new(vec![1]))?;
    let mut report =
        discretization_value_sweep(&chain, &[0.0, 1.0], &p0, 1.0, &SWEEP_DTS, 20_000)?;
    report.check = "discretization_value_absorbing".into();
    let e0 = report.points[0].error;
    let e1 = report.points[1].error;
    let analytic_ok =
        (e0 - ABSORBING_ERRORS.0).abs() < 1e-4 && (e1 - ABSORBING_ERRORS.1).abs() < 1e-4;
    report.pass = report.pass && analytic_ok;
    report
        .details
        .push(("analytic_errors_ok".into(), analytic_ok.to_string()));
    reports.push(report);

    let space = StateSpaceSpec::new(3, 3, false)?;
    let n = space.enumerable_size()?;
    let per_model: Result<Vec<SweepReport>> = (0..5u64)
        .into_par_iter()
        .map(|i| {
            let model = RandomRateModel::random(space, 1.0, 0.6, seed_mix(&[seed, 11, i]));
            let reward = random_reward(n, seed_mix(&[seed, 12, i]));
            let p0 = DistributionTable::uniform(space)?;
            let mut report =
                discretization_value_sweep(&model, &reward, &p0, 1.0, &SWEEP_DTS, 20_000)?;
            report.check = format!("discretization_value_model{i}");
            Ok(report)
        })
        .collect();
    reports.extend(per_model?);
    Ok(reports)
}

/// Discretization gradient scaling via the forward-mode recursion oracle on
/// five random bounded-rate models.
pub fn standard_grad_check(seed: u64) -> Result<Vec<SweepReport>> {
    let space = StateSpaceSpec::new(3, 3, false)?;
    let n = space.enumerable_size()?;
    let reports: Result<Vec<SweepReport>> = (0..5u64)
        .into_par_iter()
        .map(|i| {
        let model = RandomRateModel::random(space, 1.0, 0.6, seed_mix(&[seed, 21, i]));
        let reward = random_reward(n, seed_mix(&[seed, 22, i]));
        let p0 = DistributionTable::uniform(space)?;
        let mut report = discretization_grad_sweep(&model, &reward, &p0, 1.0, &SWEEP_DTS, 2000)?;
        report.check = format!("discretization_grad_model{i}");
        // halving ratio between consecutive sweep points
        let mut ratios = Vec::new();
        for w in report.points.windows(2) {
            if w[1].error > 0.0 {
                ratios.push(w[0].error / w[1].error);
            }
        }
        let ratio_ok = ratios.iter().all(|&r| (1.6..=2.5).contains(&r));
        report
            .details
            .push(("halving_ratios_in_band".into(), ratio_ok.to_string()));
        report.pass = report.pass && ratio_ok;
        Ok(report)
        })
        .collect();
    reports
}

/// TV-vs-gap perturbation sweep on the d=2, M=3 masked space.
pub fn standard_tv_check(kind: RegKind, seed: u64) -> Result<SweepReport> {
    let space = StateSpaceSpec::new(2, 3, true)?;
    let sched = Scheduler::new(SchedulerKind::Linear, 1.0)?;
    let arch = Architecture::Tabular(TabularArch::new(space, 2, 1.0, 0)?);
    let reference = PosteriorModel::random(arch, seed_mix(&[seed, 31]), 0.5);
    tv_bound_sweep(
        &reference,
        &sched,
        kind,
        &[1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
        4,
        seed_mix(&[seed, 32]),
        2e-3,
        8,
    )
}

/// Estimator agreement on the 2-position, 2-token, 4-step tabular instance.
pub fn standard_estimator_check(seed: u64, mc_samples: usize) -> Result<EstimatorReport> {
    let space = StateSpaceSpec::new(2, 2, true)?;
    let sched = Scheduler::new(SchedulerKind::Linear, 1.0)?;
    let arch = Architecture::Tabular(TabularArch::new(space, 2, 1.0, 0)?);
    let model = PosteriorModel::random(arch, seed_mix(&[seed, 41]), 0.5);
    let reward = RewardFn::motif_count(vec![1, 2], &space)?;
    let grid = TimeGrid::new(1.0, 0.25)?;
    estimator_oracle_check(&model, &sched, &reward, grid, mc_samples, seed_mix(&[seed, 42]))
}

/// Sampler-vs-oracle agreement: empirical Euler terminal marginal against the
/// exact push-forward within 3σ binomial bands on every state.
#[derive(Debug, Clone)]
pub struct SamplerReport {
    pub config_hash: String,
    pub states: usize,
    pub samples: usize,
    pub max_abs_dev: f64,
    pub max_band_ratio: f64,
    pub pass: bool,
}

impl SamplerReport {
    pub fn render(&self) -> String {
        format!(
            "check=sampler_oracle\nconfig_hash={}\nstates={}\nsamples={}\nmax_abs_dev={:.6e}\nmax_band_ratio={:.4}\npass={}\n",
            self.config_hash, self.states, self.samples, self.max_abs_dev, self.max_band_ratio, self.pass
        )
    }

    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("sampler_oracle.report");
        std::fs::File::create(&path)?.write_all(self.render().as_bytes())?;
        Ok(path)
    }
}

pub fn standard_sampler_check(seed: u64, samples: usize) -> Result<SamplerReport> {
    let space = StateSpaceSpec::new(2, 8, true)?;
    let sched = Scheduler::new(SchedulerKind::Linear, 1.0)?;
    let arch = Architecture::Tabular(TabularArch::new(space, 2, 1.0, 0)?);
    let model = PosteriorModel::random(arch, seed_mix(&[seed, 51]), 0.5);
    let grid = TimeGrid::new(1.0, 0.1)?;

    let n = space.enumerable_size()?;
    let field = PolicyRates {
        model: &model,
        sched: &sched,
        cond: None,
    };
    let p0 = DistributionTable::delta(space, &space.all_mask_state()?)?;
    let exact = push_forward_euler(&field, &p0, grid, KernelMode::Strict)?;

    let terminal_indices: Vec<usize> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(&[seed, 52, i as u64]));
            let traj = crate::rl::sample_policy_trajectory(&model, &sched, grid, None, &mut rng)
                .expect("policy rollout");
            space.index_of(traj.terminal()).expect("terminal in space")
        })
        .collect();
    let mut counts = vec![0usize; n];
    for idx in terminal_indices {
        counts[idx] += 1;
    }

    let nf = samples as f64;
    let mut max_abs_dev = 0.0f64;
    let mut max_band_ratio = 0.0f64;
    let mut pass = true;
    for (idx, &c) in counts.iter().enumerate() {
        let p = exact.mass()[idx];
        let p_hat = c as f64 / nf;
        let dev = (p_hat - p).abs();
        let band = 3.0 * (p * (1.0 - p) / nf).sqrt() + 1e-12;
        max_abs_dev = max_abs_dev.max(dev);
        if band > 0.0 {
            max_band_ratio = max_band_ratio.max(dev / band);
        }
        if dev > band {
            pass = false;
        }
    }
    Ok(SamplerReport {
        config_hash: "none".into(),
        states: n,
        samples,
        max_abs_dev,
        max_band_ratio,
        pass,
    })
}
