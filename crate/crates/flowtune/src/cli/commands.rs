//! Experiment orchestration behind the thin binary: pretrain, finetune,
//! sample, eval, verify, and corpus generation, all driven by a [`RunConfig`].

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{
    check_architecture, load_checkpoint, save_checkpoint_with_meta, Direction, GradientBuffer,
    PosteriorModel,
};
use crate::pretrain::{pretrain_loop, DataCorpus, PretrainConfig};
use crate::regularize::{
    pathwise_kl, total_objective_step, Algorithm, ReferenceModel, RegKind,
};
use crate::rl::{compute_advantages, ppo_update, reinforce_update, rollout, RolloutBatch};
use crate::seed_mix;
use crate::state::{kmer_profile, pearson, tv_distance, DistributionTable, SequenceState};
use crate::verify::{
    standard_estimator_check, standard_grad_check, standard_sampler_check, standard_tv_check,
    standard_value_check,
};

use super::config::RunConfig;
use super::corpus_gen::{make_corpus, CorpusGenerator};
use super::metrics::{MetricsRecord, MetricsWriter};

/// Generates a synthetic corpus into `<out>/corpus.txt`.
pub fn cmd_make_corpus(cfg: &RunConfig, out: &Path, n: usize, seed: u64) -> Result<PathBuf> {
    let space = cfg.space()?;
    let name: String = cfg.optional_or("corpus_gen.generator", "iid-categorical".to_string())?;
    let probs = cfg
        .raw("corpus_gen.probs")
        .map(|_| cfg_f64_list(cfg, "corpus_gen.probs"))
        .transpose()?;
    let probs_b = cfg
        .raw("corpus_gen.probs_b")
        .map(|_| cfg_f64_list(cfg, "corpus_gen.probs_b"))
        .transpose()?;
    let motif = cfg.u32_list("corpus_gen.motif")?;
    let rate: f64 = cfg.optional_or("corpus_gen.rate", 1.0)?;
    let weight_a: f64 = cfg.optional_or("corpus_gen.weight_a", 0.5)?;
    let generator = CorpusGenerator::by_name(&name, &space, probs, probs_b, motif, rate, weight_a)?;
    let corpus = make_corpus(&space, &generator, n, seed)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("corpus.txt");
    write_sequences(
        &path,
        &cfg.hash,
        corpus.samples().expect("generated corpora hold samples"),
    )?;
    Ok(path)
}

fn cfg_f64_list(cfg: &RunConfig, key: &str) -> Result<Vec<f64>> {
    cfg.raw(key)
        .unwrap_or("")
        .split_whitespace()
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Domain(format!("bad number `{v}` in `{key}`")))
        })
        .collect()
}

fn write_sequences(
    path: &Path,
    config_hash: &str,
    samples: &[(SequenceState, Option<crate::state::Condition>)],
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# config_hash={config_hash}")?;
    for (s, c) in samples {
        match c {
            Some(crate::state::Condition(tag)) => writeln!(file, "{s} |{tag}")?,
            None => writeln!(file, "{s}")?,
        }
    }
    Ok(())
}

/// Pretrains a model on the configured corpus; writes loss metrics, periodic
/// checkpoints, and `<out>/pretrained.ckpt`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, seed: u64) -> Result<PathBuf> {
    let sched = cfg.scheduler()?;
    let arch = cfg.architecture()?;
    let corpus_path = cfg.require_path("pretrain.corpus")?;
    let corpus = DataCorpus::load(&corpus_path, cfg.space()?)?;
    let steps: usize = cfg.optional_or("pretrain.steps", 2000)?;
    let batch_size: usize = cfg.optional_or("pretrain.batch_size", 32)?;
    let default_scale = match &arch {
        crate::model::Architecture::Tabular(_) => 0.0,
        crate::model::Architecture::Neural(_) => 1.0,
    };
    let init_scale: f64 = cfg.optional_or("model.init_scale", default_scale)?;
    let mut model = PosteriorModel::random(arch, seed_mix(&[seed, 0x1a17]), init_scale);
    let mut opt = cfg.optimizer("pretrain", Direction::Descent)?;
    let checkpoint_every: usize = cfg.optional_or("pretrain.checkpoint_every", 0)?;
    let log_every: usize = cfg.optional_or("pretrain.log_every", 10)?;

    std::fs::create_dir_all(out)?;
    let mut metrics = MetricsWriter::create(&out.join("pretrain_metrics.log"), &cfg.hash)?;
    let started = Instant::now();
    let out_dir = out.to_path_buf();
    pretrain_loop(
        &mut model,
        &sched,
        &corpus,
        &mut opt,
        &PretrainConfig {
            steps,
            batch_size,
            seed: seed_mix(&[seed, 0x9a3e]),
        },
        |m, record| {
            if log_every > 0 && record.step % log_every == 0 {
                metrics.append_line(&format!(
                    "iter={} loss={:.6e} wall_ms={}",
                    record.step,
                    record.loss,
                    started.elapsed().as_millis()
                ))?;
            }
            if checkpoint_every > 0 && (record.step + 1).is_multiple_of(checkpoint_every) {
                save_checkpoint_with_meta(
                    &out_dir.join(format!("checkpoint_{:06}.ckpt", record.step + 1)),
                    m,
                    None,
                    &[("config_hash", &cfg.hash)],
                )?;
            }
            Ok(())
        },
    )?;
    let path = out.join("pretrained.ckpt");
    save_checkpoint_with_meta(&path, &model, Some(&opt), &[("config_hash", &cfg.hash)])?;
    Ok(path)
}

/// Reward fine-tuning from a pretrained checkpoint with optional
/// regularization; writes per-iteration metrics and `<out>/finetuned.ckpt`.
pub fn cmd_finetune(cfg: &RunConfig, out: &Path, seed: u64) -> Result<PathBuf> {
    let space = cfg.space()?;
    let sched = cfg.scheduler()?;
    let grid = cfg.grid()?;
    let arch = cfg.architecture()?;
    let ckpt_path = cfg.require_path("finetune.init_checkpoint")?;
    let (mut model, _) = load_checkpoint(&ckpt_path)?;
    check_architecture(&model.arch, &arch)?;
    let reward = cfg.reward(&space)?.ok_or(Error::Config {
        line: 0,
        msg: "finetune requires a [reward] section".into(),
    })?;
    let algorithm = cfg.algorithm()?;
    let advantage = cfg.advantage()?;
    let reg_spec = cfg.reg_spec()?;
    let iterations: u64 = cfg.optional_or("finetune.iterations", 100)?;
    let batch_size: usize = cfg.optional_or("finetune.batch_size", 16)?;
    let cond_weights = cfg.condition_weights()?;
    let mut opt = cfg.optimizer("finetune", Direction::Ascent)?;
    let mut buf = GradientBuffer::zeros(model.n_params());
    let mut reference = ReferenceModel::new(model.clone());

    // reference profile for per-iteration naturalness tracking
    let kmer_k: usize = cfg.optional_or("eval.kmer", 3)?;
    let corpus_profile = cfg
        .path("eval.corpus")
        .or_else(|| cfg.path("pretrain.corpus"))
        .and_then(|p| DataCorpus::load(&p, space).ok())
        .and_then(|c| {
            let seqs: Vec<SequenceState> =
                c.samples()?.iter().map(|(s, _)| s.clone()).collect();
            kmer_profile(&seqs, kmer_k, space.vocab).ok()
        });
    let track_tv = space.size() <= 1024;

    std::fs::create_dir_all(out)?;
    let mut metrics = MetricsWriter::create(&out.join("finetune_metrics.log"), &cfg.hash)?;
    let started = Instant::now();
    for iter in 0..iterations {
        let mut batch = rollout(
            &model,
            &sched,
            Some(&reward),
            batch_size,
            grid,
            seed_mix(&[seed, 0xf17e, iter]),
            cond_weights.as_deref(),
        )?;
        compute_advantages(&mut batch, &advantage)?;
        let rewards: Vec<f64> = batch.trajectories.iter().map(|t| t.reward).collect();
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
            / rewards.len() as f64)
            .sqrt();

        let reg_value = match reg_spec.kind {
            RegKind::None => {
                plain_update(&mut model, &sched, &batch, algorithm, &mut opt, &mut buf)?;
                None
            }
            RegKind::PathKl => {
                let v = pathwise_kl(&model, &reference.model, &sched, &batch)?;
                plain_update(&mut model, &sched, &batch, algorithm, &mut opt, &mut buf)?;
                Some(v)
            }
            RegKind::Ce | RegKind::Gkl => {
                let states = reference.states_for_iteration(
                    iter,
                    &reg_spec,
                    &sched,
                    &batch,
                    seed_mix(&[seed, 0x4e5]),
                )?;
                let stats = total_objective_step(
                    &mut model,
                    &reference.model,
                    &sched,
                    &batch,
                    &states,
                    &reg_spec,
                    algorithm,
                    &mut opt,
                    &mut buf,
                )?;
                Some(stats.reg_value)
            }
        };

        let tv_ref = if track_tv {
            crate::verify::exact_terminal_tv(&model, &reference.model, &sched, grid.dt).ok()
        } else {
            None
        };
        let kmer_corr = corpus_profile.as_ref().and_then(|ref_profile| {
            let terminals: Vec<SequenceState> = batch
                .trajectories
                .iter()
                .map(|t| t.terminal().clone())
                .collect();
            kmer_profile(&terminals, kmer_k, space.vocab)
                .ok()
                .and_then(|p| pearson(&p, ref_profile).ok())
        });
        metrics.append(&MetricsRecord {
            iteration: iter as usize,
            reward_mean: mean,
            reward_std: std,
            reg_value,
            tv_ref,
            kmer_corr,
            wall_ms: started.elapsed().as_millis(),
        })?;
    }
    let path = out.join("finetuned.ckpt");
    save_checkpoint_with_meta(&path, &model, Some(&opt), &[("config_hash", &cfg.hash)])?;
    Ok(path)
}

fn plain_update(
    model: &mut PosteriorModel,
    sched: &crate::path::Scheduler,
    batch: &RolloutBatch,
    algorithm: Algorithm,
    opt: &mut crate::model::OptimizerState,
    buf: &mut GradientBuffer,
) -> Result<()> {
    match algorithm {
        Algorithm::Reinforce => {
            reinforce_update(model, sched, batch, opt, buf)?;
        }
        Algorithm::Ppo { clip_eps, epochs } => {
            ppo_update(model, sched, batch, clip_eps, epochs, opt, buf)?;
        }
    }
    Ok(())
}

/// Samples `n` sequences from a checkpoint into `<out>/samples.txt`.
pub fn cmd_sample(cfg: &RunConfig, out: &Path, n: usize, seed: u64) -> Result<PathBuf> {
    let sched = cfg.scheduler()?;
    let grid = cfg.grid()?;
    let ckpt = cfg
        .path("sample.checkpoint")
        .or_else(|| existing(out.join("finetuned.ckpt")))
        .or_else(|| existing(out.join("pretrained.ckpt")))
        .ok_or(Error::Config {
            line: 0,
            msg: "no checkpoint: set `sample.checkpoint` or run pretrain/finetune first".into(),
        })?;
    let (model, _) = load_checkpoint(&ckpt)?;
    let cond_weights = cfg.condition_weights()?;
    let batch = rollout(
        &model,
        &sched,
        None,
        n,
        grid,
        seed_mix(&[seed, 0x5a3d]),
        cond_weights.as_deref(),
    )?;
    std::fs::create_dir_all(out)?;
    let path = out.join("samples.txt");
    let samples: Vec<(SequenceState, Option<crate::state::Condition>)> = batch
        .trajectories
        .iter()
        .map(|t| (t.terminal().clone(), t.condition))
        .collect();
    write_sequences(&path, &cfg.hash, &samples)?;
    Ok(path)
}

fn existing(p: PathBuf) -> Option<PathBuf> {
    p.exists().then_some(p)
}

/// Evaluates `<out>/samples.txt`: mean reward, k-mer correlation against the
/// reference corpus, and (on enumerable spaces) TV to the corpus empirical
/// distribution. Writes `<out>/eval.txt`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<String> {
    let space = cfg.space()?;
    let samples_path = out.join("samples.txt");
    let samples = DataCorpus::load(&samples_path, space)?;
    let sample_pairs = samples.samples().expect("file corpus holds samples");
    let mut line = format!("samples={}", sample_pairs.len());

    if let Some(reward) = cfg.reward(&space)? {
        let mean = sample_pairs
            .iter()
            .map(|(s, c)| reward.eval(s, *c))
            .sum::<f64>()
            / sample_pairs.len() as f64;
        line.push_str(&format!(" mean_reward={mean:.6}"));
    }

    let corpus_path = cfg
        .path("eval.corpus")
        .or_else(|| cfg.path("pretrain.corpus"));
    if let Some(corpus_path) = corpus_path {
        let corpus = DataCorpus::load(&corpus_path, space)?;
        let corpus_seqs: Vec<SequenceState> = corpus
            .samples()
            .expect("file corpus holds samples")
            .iter()
            .map(|(s, _)| s.clone())
            .collect();
        let sample_seqs: Vec<SequenceState> =
            sample_pairs.iter().map(|(s, _)| s.clone()).collect();
        let k: usize = cfg.optional_or("eval.kmer", 3)?;
        match crate::state::kmer_correlation(&sample_seqs, &corpus_seqs, k, space.vocab) {
            Ok(corr) => line.push_str(&format!(" kmer_corr={corr:.6}")),
            Err(e) => line.push_str(&format!(" kmer_corr=undefined({e})")),
        }
        if space.size() <= 10_000 {
            let emp = |seqs: &[SequenceState]| -> Result<DistributionTable> {
                let n = space.enumerable_size()?;
                let mut mass = vec![0.0; n];
                for s in seqs {
                    mass[space.index_of(s)?] += 1.0;
                }
                DistributionTable::from_weights(space, mass)
            };
            let tv = tv_distance(&emp(&sample_seqs)?, &emp(&corpus_seqs)?)?;
            line.push_str(&format!(" tv_corpus={tv:.6}"));
        }
    }
    line.push_str(&format!(" config_hash={}", cfg.hash));
    std::fs::write(out.join("eval.txt"), format!("{line}\n"))?;
    Ok(line)
}

/// Runs a named verification check (or `all`), writing one report file per
/// check under `<out>` and returning whether everything passed.
pub fn cmd_verify(cfg: &RunConfig, out: &Path, check: &str, seed: u64) -> Result<bool> {
    std::fs::create_dir_all(out)?;
    let mut all_pass = true;
    let mut ran_any = false;
    let mut run_reports = |reports: Vec<crate::verify::SweepReport>| -> Result<()> {
        for mut report in reports {
            report.config_hash = cfg.hash.clone();
            report.write(out)?;
            println!("check={} slope={:.4} pass={}", report.check, report.slope, report.pass);
            all_pass &= report.pass;
        }
        Ok(())
    };
    if matches!(check, "discretization_value" | "all") {
        ran_any = true;
        run_reports(standard_value_check(seed)?)?;
    }
    if matches!(check, "discretization_grad" | "all") {
        ran_any = true;
        run_reports(standard_grad_check(seed)?)?;
    }
    if matches!(check, "tv_bound_ce" | "all") {
        ran_any = true;
        run_reports(vec![standard_tv_check(RegKind::Ce, seed)?])?;
    }
    if matches!(check, "tv_bound_gkl" | "all") {
        ran_any = true;
        run_reports(vec![standard_tv_check(RegKind::Gkl, seed)?])?;
    }
    if matches!(check, "estimator_oracle" | "all") {
        ran_any = true;
        let mut report = standard_estimator_check(seed, 100_000)?;
        report.config_hash = cfg.hash.clone();
        report.write(out)?;
        println!(
            "check=estimator_oracle identity_gap={:.2e} cos={:.4} max_z={:.2} pass={}",
            report.identity_gap, report.cosine_similarity, report.max_z_score, report.pass
        );
        all_pass &= report.pass;
    }
    if matches!(check, "sampler_oracle" | "all") {
        ran_any = true;
        let mut report = standard_sampler_check(seed, 100_000)?;
        report.config_hash = cfg.hash.clone();
        report.write(out)?;
        println!(
            "check=sampler_oracle max_band_ratio={:.3} pass={}",
            report.max_band_ratio, report.pass
        );
        all_pass &= report.pass;
    }
    if !ran_any {
        return Err(Error::Domain(format!(
            "unknown check `{check}`; expected one of discretization_value, discretization_grad, tv_bound_ce, tv_bound_gkl, estimator_oracle, sampler_oracle, all"
        )));
    }
    Ok(all_pass)
}
