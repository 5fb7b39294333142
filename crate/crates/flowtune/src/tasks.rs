//! Reference toy tasks with pinned seeds and hyperparameters, shared by the
//! runnable examples and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cli::corpus_gen::{make_corpus, CorpusGenerator};
use crate::ctmc::TimeGrid;
use crate::error::Result;
use crate::model::{Architecture, Direction, GradientBuffer, NeuralArch, OptimizerState, PosteriorModel};
use crate::path::{Scheduler, SchedulerKind};
use crate::pretrain::{pretrain_loop, DataCorpus, PretrainConfig};
use crate::regularize::{total_objective_step, Algorithm, RegKind, RegSpec, ReferenceModel, StateSource};
use crate::rl::{compute_advantages, rollout, AdvantageSpec, RewardFn};
use crate::seed_mix;
use crate::state::{kmer_correlation, SequenceState, StateSpaceSpec};

/// Motif-count sequence design: pretrain on a skewed iid corpus over d=8,
/// M=4 sequences, then fine-tune to plant the `[2, 3]` motif.
pub struct MotifToyTask {
    pub space: StateSpaceSpec,
    pub sched: Scheduler,
    pub grid: TimeGrid,
    pub corpus_probs: Vec<f64>,
    pub corpus_size: usize,
    pub motif: Vec<u32>,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub finetune_iters: u64,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub eval_samples: usize,
}

impl MotifToyTask {
    pub fn new() -> Result<Self> {
        let space = StateSpaceSpec::new(8, 4, true)?;
        let sched = Scheduler::new(SchedulerKind::Linear, 1.0)?;
        let grid = TimeGrid::new(1.0, 0.25)?;
        Ok(Self {
            space,
            sched,
            grid,
            corpus_probs: vec![0.4, 0.3, 0.2, 0.1],
            corpus_size: 600,
            motif: vec![2, 3],
            pretrain_steps: 1200,
            pretrain_batch: 32,
            pretrain_lr: 3e-3,
            finetune_iters: 200,
            finetune_batch: 24,
            finetune_lr: 2e-3,
            eval_samples: 2000,
        })
    }

    pub fn corpus(&self, seed: u64) -> Result<DataCorpus> {
        let generator = CorpusGenerator::IidCategorical {
            probs: self.corpus_probs.clone(),
        };
        make_corpus(&self.space, &generator, self.corpus_size, seed_mix(&[seed, 1]))
    }

    pub fn reward(&self) -> Result<RewardFn> {
        RewardFn::motif_count(self.motif.clone(), &self.space)
    }

    fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture::Neural(NeuralArch::new(
            self.space,
            8,
            48,
            6,
            self.sched.horizon,
            0,
            0,
        )?))
    }

    /// Pretrains the posterior model on the task corpus.
    pub fn pretrain(&self, seed: u64) -> Result<PosteriorModel> {
        let corpus = self.corpus(seed)?;
        let mut model =
            PosteriorModel::random(self.architecture()?, seed_mix(&[seed, 2]), 1.0);
        let mut opt = OptimizerState::adam(self.pretrain_lr, Direction::Descent);
        pretrain_loop(
            &mut model,
            &self.sched,
            &corpus,
            &mut opt,
            &PretrainConfig {
                steps: self.pretrain_steps,
                batch_size: self.pretrain_batch,
                seed: seed_mix(&[seed, 3]),
            },
            |_, _| Ok(()),
        )?;
        Ok(model)
    }

    /// Fine-tunes a copy of `base` for `iters` iterations; returns the tuned
    /// model and the per-iteration mean rewards.
    pub fn finetune(
        &self,
        base: &PosteriorModel,
        algorithm: Algorithm,
        reg: RegSpec,
        iters: u64,
        seed: u64,
    ) -> Result<(PosteriorModel, Vec<f64>)> {
        let reward = self.reward()?;
        let mut model = base.clone();
        let mut reference = ReferenceModel::new(base.clone());
        let mut opt = OptimizerState::adam(self.finetune_lr, Direction::Ascent);
        let mut buf = GradientBuffer::zeros(model.n_params());
        let mut curve = Vec::with_capacity(iters as usize);
        for iter in 0..iters {
            let mut batch = rollout(
                &model,
                &self.sched,
                Some(&reward),
                self.finetune_batch,
                self.grid,
                seed_mix(&[seed, 4, iter]),
                None,
            )?;
            compute_advantages(&mut batch, &AdvantageSpec::MEAN_BASELINE)?;
            curve.push(
                batch.trajectories.iter().map(|t| t.reward).sum::<f64>()
                    / batch.trajectories.len() as f64,
            );
            let states =
                reference.states_for_iteration(iter, &reg, &self.sched, &batch, seed)?;
            total_objective_step(
                &mut model,
                &reference.model,
                &self.sched,
                &batch,
                &states,
                &reg,
                algorithm,
                &mut opt,
                &mut buf,
            )?;
        }
        Ok((model, curve))
    }

    /// Mean reward and 3-mer correlation to the training corpus over fresh
    /// samples from `model`.
    pub fn evaluate(&self, model: &PosteriorModel, seed: u64) -> Result<TaskEval> {
        let reward = self.reward()?;
        let corpus = self.corpus(seed)?;
        let corpus_seqs: Vec<SequenceState> = corpus
            .samples()
            .expect("generated corpus")
            .iter()
            .map(|(s, _)| s.clone())
            .collect();
        let mut terminals = Vec::with_capacity(self.eval_samples);
        let mut total = 0.0;
        for i in 0..self.eval_samples {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed_mix(&[seed, 5, i as u64]));
            let traj = crate::rl::sample_policy_trajectory(
                model, &self.sched, self.grid, None, &mut rng,
            )?;
            total += reward.eval(traj.terminal(), None);
            terminals.push(traj.terminal().clone());
        }
        let kmer_corr = kmer_correlation(&terminals, &corpus_seqs, 3, self.space.vocab)?;
        Ok(TaskEval {
            mean_reward: total / self.eval_samples as f64,
            kmer_corr,
        })
    }

    pub fn gkl_reg(&self, lambda: f64) -> RegSpec {
        RegSpec {
            kind: RegKind::Gkl,
            lambda,
            source: StateSource::ReferenceRollouts,
            refresh_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TaskEval {
    pub mean_reward: f64,
    pub kmer_corr: f64,
}
