//! Mixture-path pretraining of the posterior model against a data corpus,
//! using the generalized KL divergence between the conditional velocity and
//! the model velocity as the per-sample loss.
//!
//! The exact-expectation variants ([`exact_cdfm_objective`],
//! [`exact_dfm_objective`]) enumerate time grid × data × noisy states on tiny
//! spaces; the two objectives differ in value but share gradients, which the
//! verification harness checks.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{GradientBuffer, OptimizerState, PosteriorModel};
use crate::path::{sample_xt, Scheduler};
use crate::state::{Condition, DistributionTable, SequenceState, StateSpaceSpec};

/// Training data: explicit samples or an exact distribution table.
#[derive(Debug, Clone)]
pub enum CorpusData {
    Samples(Vec<(SequenceState, Option<Condition>)>),
    Table(DistributionTable),
}

#[derive(Debug, Clone)]
pub struct DataCorpus {
    pub space: StateSpaceSpec,
    pub data: CorpusData,
}

impl DataCorpus {
    pub fn from_samples(
        space: StateSpaceSpec,
        samples: Vec<(SequenceState, Option<Condition>)>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("corpus has no samples".into()));
        }
        for (s, _) in &samples {
            space.check_state(s)?;
            if let Some(mask) = space.mask_token() {
                if s.tokens.contains(&mask) {
                    return Err(Error::Space(format!(
                        "data sample `{s}` contains the mask token"
                    )));
                }
            }
        }
        Ok(Self {
            space,
            data: CorpusData::Samples(samples),
        })
    }

    pub fn from_table(table: DistributionTable) -> Result<Self> {
        let space = table.space;
        if let Some(mask) = space.mask_token() {
            for (idx, &m) in table.mass().iter().enumerate() {
                if m > 0.0 && space.state_at(idx).tokens.contains(&mask) {
                    return Err(Error::Space(
                        "data distribution puts mass on masked states".into(),
                    ));
                }
            }
        }
        Ok(Self {
            space,
            data: CorpusData::Table(table),
        })
    }

    pub fn len(&self) -> usize {
        match &self.data {
            CorpusData::Samples(s) => s.len(),
            CorpusData::Table(t) => t.mass().iter().filter(|&&m| m > 0.0).count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Option<&[(SequenceState, Option<Condition>)]> {
        match &self.data {
            CorpusData::Samples(s) => Some(s),
            CorpusData::Table(_) => None,
        }
    }

    /// Draws one data point (with replacement / proportional to mass).
    pub fn draw(&self, rng: &mut impl Rng) -> (SequenceState, Option<Condition>) {
        match &self.data {
            CorpusData::Samples(s) => s[rng.gen_range(0..s.len())].clone(),
            CorpusData::Table(t) => (t.space.state_at(t.sample_index(rng)), None),
        }
    }

    /// Writes the corpus file format: one sequence per line, tokens as
    /// integers separated by spaces, optional trailing `|c` condition tag.
    pub fn save(&self, path: &Path) -> Result<()> {
        let samples = self
            .samples()
            .ok_or_else(|| Error::Domain("cannot save a table-backed corpus".into()))?;
        let mut file = std::fs::File::create(path)?;
        for (s, c) in samples {
            match c {
                Some(Condition(tag)) => writeln!(file, "{s} |{tag}")?,
                None => writeln!(file, "{s}")?,
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, space: StateSpaceSpec) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut samples = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tokens_part, cond) = match line.split_once('|') {
                Some((toks, tag)) => {
                    let tag: u32 = tag.trim().parse().map_err(|_| Error::Config {
                        line: lineno + 1,
                        msg: format!("bad condition tag `{}`", tag.trim()),
                    })?;
                    (toks, Some(Condition(tag)))
                }
                None => (line, None),
            };
            let tokens: Vec<u32> = tokens_part
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Config {
                        line: lineno + 1,
                        msg: format!("bad token `{t}`"),
                    })
                })
                .collect::<Result<_>>()?;
            samples.push((SequenceState::new(tokens), cond));
        }
        Self::from_samples(space, samples)
    }
}

/// One resolved training example: a noisy state at a sampled time.
#[derive(Debug, Clone)]
pub struct CdfmTarget {
    pub t: f64,
    pub x1: SequenceState,
    pub x_t: SequenceState,
    pub cond: Option<Condition>,
}

/// Samples `t ~ U[0, T−ε]` and `X_t | X_1` for each batch element.
pub fn sample_cdfm_targets(
    space: &StateSpaceSpec,
    sched: &Scheduler,
    batch: &[(SequenceState, Option<Condition>)],
    rng: &mut impl Rng,
) -> Result<Vec<CdfmTarget>> {
    batch
        .iter()
        .map(|(x1, cond)| {
            let t = rng.gen_range(0.0..sched.horizon - sched.eps);
            let draw = sample_xt(space, sched, x1, t, rng)?;
            Ok(CdfmTarget {
                t,
                x1: x1.clone(),
                x_t: draw.x_t,
                cond: *cond,
            })
        })
        .collect()
}

/// Generalized KL between off-diagonal rate vectors plus its gradient in the
/// second argument; `0·log(0/v)` is taken as 0.
fn gkl_with_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(v.len());
    for (&uj, &vj) in u.iter().zip(v) {
        if uj > 0.0 {
            value += uj * (uj / vj).ln() - uj + vj;
            grad.push(1.0 - uj / vj);
        } else {
            value += vj;
            grad.push(1.0);
        }
    }
    (value, grad)
}

/// Per-target loss `Σ_i D_gKL(u_t(·, x_t | x1), u_t^θ(·, x_t))` and, when a
/// buffer is given, its parameter gradient scaled by `grad_scale`.
pub fn cdfm_target_loss(
    model: &PosteriorModel,
    sched: &Scheduler,
    target: &CdfmTarget,
    grad: Option<(&mut GradientBuffer, f64)>,
) -> Result<f64> {
    let space = *model.space();
    let mask = space
        .mask_token()
        .ok_or_else(|| Error::Space("CDFM loss requires a masked space".into()))?;
    let coeff = sched.velocity_coeff(target.t)?;
    let out = model.forward(&target.x_t, target.t, target.cond)?;
    let m = space.vocab as usize;
    let mut loss = 0.0;
    let mut d_probs = vec![vec![0.0; m]; space.positions];
    for i in 0..space.positions {
        let cur = target.x_t.tokens[i];
        let probs = &out.probs[i];
        if cur == mask {
            // off-diagonal set: every data token; conditional rate points at x1_i
            let mut u = vec![0.0; m];
            u[target.x1.tokens[i] as usize - 1] = coeff;
            let v: Vec<f64> = probs.iter().map(|&p| coeff * p).collect();
            let (val, g) = gkl_with_grad(&u, &v);
            loss += val;
            for (y, gy) in g.into_iter().enumerate() {
                d_probs[i][y] = gy * coeff;
            }
        } else {
            // copied position: conditional velocity is zero, loss is the
            // model's total off-diagonal rate
            let cur_idx = cur as usize - 1;
            for (y, &p) in probs.iter().enumerate() {
                if y == cur_idx {
                    continue;
                }
                loss += coeff * p;
                d_probs[i][y] = coeff;
            }
        }
    }
    if let Some((buf, scale)) = grad {
        if scale != 0.0 {
            for row in &mut d_probs {
                for g in row.iter_mut() {
                    *g *= scale;
                }
            }
            model.backward(&out.cache, &d_probs, buf)?;
        }
    }
    Ok(loss)
}

/// Mean CDFM loss over fixed targets; gradient of the mean is accumulated
/// scaled by `grad_scale` when a buffer is given.
pub fn cdfm_loss_on(
    model: &PosteriorModel,
    sched: &Scheduler,
    targets: &[CdfmTarget],
    mut grad: Option<(&mut GradientBuffer, f64)>,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Domain("empty CDFM batch".into()));
    }
    let norm = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    for target in targets {
        let g = grad.as_mut().map(|(buf, scale)| (&mut **buf, *scale * norm));
        total += cdfm_target_loss(model, sched, target, g)?;
    }
    Ok(total * norm)
}

/// Draws a batch of targets and returns the loss with gradient accumulated.
pub fn cdfm_loss(
    model: &PosteriorModel,
    sched: &Scheduler,
    batch: &[(SequenceState, Option<Condition>)],
    rng: &mut impl Rng,
    buf: &mut GradientBuffer,
) -> Result<f64> {
    let targets = sample_cdfm_targets(model.space(), sched, batch, rng)?;
    cdfm_loss_on(model, sched, &targets, Some((buf, 1.0)))
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Minimizes the CDFM loss over corpus draws; aborts on NaN with the step
/// index in the error.
pub fn pretrain_loop(
    model: &mut PosteriorModel,
    sched: &Scheduler,
    corpus: &DataCorpus,
    opt: &mut OptimizerState,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&PosteriorModel, LossRecord) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    if cfg.batch_size == 0 {
        return Err(Error::Domain("pretrain batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buf = GradientBuffer::zeros(model.n_params());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size).map(|_| corpus.draw(&mut rng)).collect();
        buf.zero();
        let loss = cdfm_loss(model, sched, &batch, &mut rng, &mut buf)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining loss became non-finite at step {step}"
            )));
        }
        model.optimizer_step(opt, &mut buf)?;
        let record = LossRecord { step, loss };
        curve.push(record);
        on_step(model, record)?;
    }
    Ok(curve)
}

/// Exact CDFM objective: expectation over a uniform time grid, the data
/// distribution, and all conditional noisy states. Returns the loss and the
/// full parameter gradient.
pub fn exact_cdfm_objective(
    model: &PosteriorModel,
    sched: &Scheduler,
    data: &DistributionTable,
    t_grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let space = *model.space();
    let mask = space
        .mask_token()
        .ok_or_else(|| Error::Space("mixture path requires a mask token".into()))?;
    if t_grid.is_empty() {
        return Err(Error::Domain("empty time grid".into()));
    }
    let mut buf = GradientBuffer::zeros(model.n_params());
    let mut value = 0.0;
    let t_w = 1.0 / t_grid.len() as f64;
    for &t in t_grid {
        let (kappa, _) = sched.kappa(t)?;
        for (z_idx, &pz) in data.mass().iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            let x1 = space.state_at(z_idx);
            // every copy pattern yields a distinct x_t since data is mask-free
            for pattern in 0..(1usize << space.positions) {
                let mut w = pz * t_w;
                let mut tokens = Vec::with_capacity(space.positions);
                for i in 0..space.positions {
                    if pattern >> i & 1 == 1 {
                        w *= kappa;
                        tokens.push(x1.tokens[i]);
                    } else {
                        w *= 1.0 - kappa;
                        tokens.push(mask);
                    }
                }
                if w == 0.0 {
                    continue;
                }
                let target = CdfmTarget {
                    t,
                    x1: x1.clone(),
                    x_t: SequenceState::new(tokens),
                    cond: None,
                };
                value += w * cdfm_target_loss(model, sched, &target, Some((&mut buf, w)))?;
            }
        }
    }
    Ok((value, buf.grad))
}

/// Exact DFM objective: expectation over the time grid and the mixture
/// marginal, with the true velocity computed from the Bayes posterior of the
/// data distribution. Shares gradients with [`exact_cdfm_objective`].
pub fn exact_dfm_objective(
    model: &PosteriorModel,
    sched: &Scheduler,
    data: &DistributionTable,
    t_grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let space = *model.space();
    let mask = space
        .mask_token()
        .ok_or_else(|| Error::Space("mixture path requires a mask token".into()))?;
    if t_grid.is_empty() {
        return Err(Error::Domain("empty time grid".into()));
    }
    let n = space.enumerable_size()?;
    let m = space.vocab as usize;
    let mut buf = GradientBuffer::zeros(model.n_params());
    let mut value = 0.0;
    let t_w = 1.0 / t_grid.len() as f64;
    for &t in t_grid {
        let (kappa, _) = sched.kappa(t)?;
        let coeff = sched.velocity_coeff(t)?;
        // mixture marginal and per-position posterior numerators
        let mut marginal = vec![0.0; n];
        let mut post_num = vec![vec![vec![0.0; m]; space.positions]; n];
        for (z_idx, &pz) in data.mass().iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            let x1 = space.state_at(z_idx);
            for pattern in 0..(1usize << space.positions) {
                let mut w = pz;
                let mut tokens = Vec::with_capacity(space.positions);
                for i in 0..space.positions {
                    if pattern >> i & 1 == 1 {
                        w *= kappa;
                        tokens.push(x1.tokens[i]);
                    } else {
                        w *= 1.0 - kappa;
                        tokens.push(mask);
                    }
                }
                if w == 0.0 {
                    continue;
                }
                let xt = SequenceState::new(tokens);
                let xt_idx = space.index_of(&xt)?;
                marginal[xt_idx] += w;
                for i in 0..space.positions {
                    post_num[xt_idx][i][x1.tokens[i] as usize - 1] += w;
                }
            }
        }
        for xt_idx in 0..n {
            let px = marginal[xt_idx];
            if px == 0.0 {
                continue;
            }
            let x_t = space.state_at(xt_idx);
            let out = model.forward(&x_t, t, None)?;
            let mut d_probs = vec![vec![0.0; m]; space.positions];
            let mut state_loss = 0.0;
            for i in 0..space.positions {
                let cur = x_t.tokens[i];
                let posterior: Vec<f64> =
                    post_num[xt_idx][i].iter().map(|&q| q / px).collect();
                // off-diagonal sets: all data tokens if masked, else y != cur
                let (u, v, idx): (Vec<f64>, Vec<f64>, Vec<usize>) = if cur == mask {
                    (
                        posterior.iter().map(|&q| coeff * q).collect(),
                        out.probs[i].iter().map(|&p| coeff * p).collect(),
                        (0..m).collect(),
                    )
                } else {
                    let cur_idx = cur as usize - 1;
                    let idx: Vec<usize> = (0..m).filter(|&y| y != cur_idx).collect();
                    (
                        idx.iter().map(|&y| coeff * posterior[y]).collect(),
                        idx.iter().map(|&y| coeff * out.probs[i][y]).collect(),
                        idx,
                    )
                };
                let (val, g) = gkl_with_grad(&u, &v);
                state_loss += val;
                for (k, &y) in idx.iter().enumerate() {
                    d_probs[i][y] = g[k] * coeff * px * t_w;
                }
            }
            value += px * t_w * state_loss;
            model.backward(&out.cache, &d_probs, &mut buf)?;
        }
    }
    Ok((value, buf.grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Direction, TabularArch};
    use crate::path::SchedulerKind;

    fn scheduler() -> Scheduler {
        Scheduler::new(SchedulerKind::Linear, 1.0).unwrap()
    }

    fn tiny_model(seed: u64) -> PosteriorModel {
        let space = StateSpaceSpec::new(2, 2, true).unwrap();
        let arch = Architecture::Tabular(TabularArch::new(space, 3, 1.0, 0).unwrap());
        PosteriorModel::random(arch, seed, 0.4)
    }

    #[test]
    fn loss_zero_when_posterior_hits_data_token() {
        // point the posterior at x1 on the masked position: that position's
        // contribution is 0; the copied position still pays the model rate
        let space = StateSpaceSpec::new(2, 2, true).unwrap();
        let arch = Architecture::Tabular(TabularArch::new(space, 1, 1.0, 0).unwrap());
        let mut model = PosteriorModel::zeros(arch.clone());
        let x1 = SequenceState::new(vec![1, 2]);
        let x_t = SequenceState::new(vec![3, 2]);
        let target = CdfmTarget {
            t: 0.5,
            x1: x1.clone(),
            x_t: x_t.clone(),
            cond: None,
        };
        // push the masked position's logit for token 1 very high
        if let Architecture::Tabular(a) = &arch {
            let off = a.offset(&x_t, 0.5, None).unwrap();
            model.params_mut()[off] = 40.0;
            // copied position: posterior concentrated on current token 2
            model.params_mut()[off + 3] = 40.0;
        }
        let loss = cdfm_target_loss(&model, &scheduler(), &target, None).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn fully_copied_state_pays_total_model_rate() {
        let model = tiny_model(3);
        let sched = scheduler();
        let x1 = SequenceState::new(vec![2, 1]);
        let target = CdfmTarget {
            t: 0.5,
            x1: x1.clone(),
            x_t: x1.clone(),
            cond: None,
        };
        let out = model.forward(&x1, 0.5, None).unwrap();
        let coeff = sched.velocity_coeff(0.5).unwrap();
        let expected: f64 = (0..2)
            .map(|i| {
                let cur = x1.tokens[i] as usize - 1;
                coeff
                    * out.probs[i]
                        .iter()
                        .enumerate()
                        .filter(|&(y, _)| y != cur)
                        .map(|(_, &p)| p)
                        .sum::<f64>()
            })
            .sum();
        let loss = cdfm_target_loss(&model, &sched, &target, None).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn cdfm_loss_nonnegative_on_random_draws() {
        let model = tiny_model(7);
        let sched = scheduler();
        let space = *model.space();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus = DataCorpus::from_samples(
            space,
            vec![
                (SequenceState::new(vec![1, 2]), None),
                (SequenceState::new(vec![2, 2]), None),
            ],
        )
        .unwrap();
        for _ in 0..50 {
            let batch: Vec<_> = (0..4).map(|_| corpus.draw(&mut rng)).collect();
            let targets = sample_cdfm_targets(&space, &sched, &batch, &mut rng).unwrap();
            let loss = cdfm_loss_on(&model, &sched, &targets, None).unwrap();
            assert!(loss >= 0.0, "gKL loss must be non-negative, got {loss}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let mut model = tiny_model(9);
        let before = model.params().to_vec();
        let sched = scheduler();
        let corpus = DataCorpus::from_samples(
            *model.space(),
            vec![(SequenceState::new(vec![1, 1]), None)],
        )
        .unwrap();
        let mut opt = OptimizerState::sgd(0.0, Direction::Descent);
        pretrain_loop(
            &mut model,
            &sched,
            &corpus,
            &mut opt,
            &PretrainConfig {
                steps: 5,
                batch_size: 2,
                seed: 0,
            },
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn corpus_rejects_mask_tokens_and_roundtrips_file() {
        let space = StateSpaceSpec::new(2, 2, true).unwrap();
        assert!(DataCorpus::from_samples(
            space,
            vec![(SequenceState::new(vec![3, 1]), None)]
        )
        .is_err());

        let corpus = DataCorpus::from_samples(
            space,
            vec![
                (SequenceState::new(vec![1, 2]), None),
                (SequenceState::new(vec![2, 1]), Some(Condition(3))),
            ],
        )
        .unwrap();
        let mut path = std::env::temp_dir();
        path.push(format!("flowtune-corpus-test-{}", std::process::id()));
        corpus.save(&path).unwrap();
        let loaded = DataCorpus::load(&path, space).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded.samples().unwrap(), corpus.samples().unwrap());
    }

    /// Exact CDFM and DFM expectations share gradients.
    #[test]
    fn cdfm_dfm_gradient_equivalence() {
        let model = tiny_model(21);
        let sched = scheduler();
        let space = *model.space();
        // data on the 4 mask-free states with uneven weights
        let mut weights = vec![0.0; space.enumerable_size().unwrap()];
        let mask = space.mask_token().unwrap();
        let mut w = 1.0;
        for (idx, _) in weights.clone().iter().enumerate() {
            let s = space.state_at(idx);
            if !s.tokens.contains(&mask) {
                weights[idx] = w;
                w += 1.0;
            }
        }
        let data = DistributionTable::from_weights(space, weights).unwrap();
        let t_grid: Vec<f64> = (0..5).map(|k| 0.05 + 0.19 * k as f64).collect();
        let (_, g_cdfm) = exact_cdfm_objective(&model, &sched, &data, &t_grid).unwrap();
        let (_, g_dfm) = exact_dfm_objective(&model, &sched, &data, &t_grid).unwrap();
        let norm: f64 = g_cdfm.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "degenerate test: zero gradient");
        for (a, b) in g_cdfm.iter().zip(&g_dfm) {
            let rel = (a - b).abs() / (a.abs() + 1e-12);
            assert!(rel < 1e-6, "gradient mismatch {a} vs {b}");
        }
    }
}
