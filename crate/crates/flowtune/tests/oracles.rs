//! Distribution-level consistency of the mixture path: pushing the all-mask
//! source forward under velocities built from the true Bayes posterior must
//! reproduce the analytic mixture marginal, corroborated by the Kolmogorov
//! oracle.

use flowtune::ctmc::{
    kolmogorov_exact, push_forward_euler_snapshots, KernelMode, RateEvaluation, TimeGrid,
};
use flowtune::path::{posterior_to_velocity, Scheduler, SchedulerKind};
use flowtune::state::{tv_distance, DistributionTable, SequenceState, StateSpaceSpec};

fn space() -> StateSpaceSpec {
    StateSpaceSpec::new(2, 2, true).unwrap()
}

/// Explicit data distribution over the four mask-free states.
fn data_distribution() -> DistributionTable {
    let sp = space();
    let mask = sp.mask_token().unwrap();
    let mut weights = vec![0.0; sp.enumerable_size().unwrap()];
    let mut w = 1.0;
    for (idx, weight) in weights.iter_mut().enumerate() {
        if !sp.state_at(idx).tokens.contains(&mask) {
            *weight = w;
            w += 1.0;
        }
    }
    DistributionTable::from_weights(sp, weights).unwrap()
}

/// Analytic mixture marginal `p_t = Σ_z p(z) Π_i (κ δ_{z_i} + (1−κ) δ_mask)`.
fn mixture_marginal(data: &DistributionTable, kappa: f64) -> DistributionTable {
    let sp = data.space;
    let mask = sp.mask_token().unwrap();
    let n = sp.enumerable_size().unwrap();
    let mut mass = vec![0.0; n];
    for (z_idx, &pz) in data.mass().iter().enumerate() {
        if pz == 0.0 {
            continue;
        }
        let z = sp.state_at(z_idx);
        for pattern in 0..(1usize << sp.positions) {
            let mut w = pz;
            let mut tokens = Vec::with_capacity(sp.positions);
            for i in 0..sp.positions {
                if pattern >> i & 1 == 1 {
                    w *= kappa;
                    tokens.push(z.tokens[i]);
                } else {
                    w *= 1.0 - kappa;
                    tokens.push(mask);
                }
            }
            mass[sp.index_of(&SequenceState::new(tokens)).unwrap()] += w;
        }
    }
    DistributionTable::from_mass(sp, mass).unwrap()
}

/// True per-position Bayes posterior `p(Z_i = y | X_t = x)` under the
/// mixture path, as a velocity field via the posterior-to-velocity map.
struct TruePosteriorField {
    data: DistributionTable,
    sched: Scheduler,
}

impl flowtune::ctmc::RateField for TruePosteriorField {
    fn rates(&self, x: &SequenceState, t: f64) -> RateEvaluation {
        let sp = self.data.space;
        let mask = sp.mask_token().unwrap();
        let (kappa, _) = self.sched.kappa(t).unwrap();
        let m = sp.vocab as usize;
        let mut numer = vec![vec![0.0; m]; sp.positions];
        let mut total = 0.0;
        for (z_idx, &pz) in self.data.mass().iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            let z = sp.state_at(z_idx);
            let mut w = pz;
            let mut consistent = true;
            for i in 0..sp.positions {
                if x.tokens[i] == mask {
                    w *= 1.0 - kappa;
                } else if x.tokens[i] == z.tokens[i] {
                    w *= kappa;
                } else {
                    consistent = false;
                    break;
                }
            }
            if !consistent || w == 0.0 {
                continue;
            }
            total += w;
            for i in 0..sp.positions {
                numer[i][z.tokens[i] as usize - 1] += w;
            }
        }
        let posterior: Vec<Vec<f64>> = numer
            .into_iter()
            .map(|row| {
                if total > 0.0 {
                    row.into_iter().map(|v| v / total).collect()
                } else {
                    vec![1.0 / m as f64; m]
                }
            })
            .collect();
        posterior_to_velocity(&sp, &self.sched, &posterior, x, t).unwrap()
    }
}

#[test]
fn bayes_posterior_velocity_reproduces_mixture_marginals() {
    let sp = space();
    let sched = Scheduler::new(SchedulerKind::Linear, 1.0).unwrap();
    let data = data_distribution();
    let field = TruePosteriorField {
        data: data.clone(),
        sched,
    };
    let p0 = DistributionTable::delta(sp, &sp.all_mask_state().unwrap()).unwrap();
    let grid = TimeGrid::new(1.0, 1e-3).unwrap();
    let checkpoints = [250usize, 500, 750, 1000];
    let snaps =
        push_forward_euler_snapshots(&field, &p0, grid, KernelMode::Strict, &checkpoints)
            .unwrap();
    for (k, marginal) in &snaps.at_steps {
        let t = grid.time_at(*k);
        let (kappa, _) = sched.kappa(t).unwrap();
        let analytic = mixture_marginal(&data, kappa);
        let tv = tv_distance(marginal, &analytic).unwrap();
        assert!(tv <= 1e-2, "t = {t}: TV to the analytic mixture is {tv}");
    }
    // terminal marginal equals the data distribution
    let tv_end = tv_distance(&snaps.terminal, &data).unwrap();
    assert!(tv_end <= 1e-2, "terminal TV to the data distribution {tv_end}");

    // Kolmogorov oracle agrees with the fine Euler push-forward
    let exact = kolmogorov_exact(&field, &p0, 1.0, 20_000).unwrap();
    let tv_oracle = tv_distance(&snaps.terminal, &exact).unwrap();
    assert!(tv_oracle <= 1e-2, "Euler vs Kolmogorov TV {tv_oracle}");
}
