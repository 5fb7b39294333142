//! Pretrain a posterior model on a synthetic corpus, then sample from it and
//! compare token statistics against the data.

use flowtune::cli::{make_corpus, CorpusGenerator};
use flowtune::ctmc::TimeGrid;
use flowtune::model::{Architecture, Direction, NeuralArch, OptimizerState, PosteriorModel};
use flowtune::path::{Scheduler, SchedulerKind};
use flowtune::pretrain::{pretrain_loop, PretrainConfig};
use flowtune::rl::sample_policy_trajectory;
use flowtune::state::{kmer_correlation, SequenceState, StateSpaceSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> flowtune::Result<()> {
    let space = StateSpaceSpec::new(8, 4, true)?;
    let sched = Scheduler::new(SchedulerKind::Linear, 1.0)?;
    let grid = TimeGrid::new(1.0, 0.1)?;

    let generator = CorpusGenerator::TwoComponentMixture {
        probs_a: vec![0.55, 0.25, 0.15, 0.05],
        probs_b: vec![0.05, 0.15, 0.25, 0.55],
        weight_a: 0.5,
    };
    let corpus = make_corpus(&space, &generator, 800, 42)?;

    let arch = Architecture::Neural(NeuralArch::new(space, 8, 48, 6, 1.0, 0, 0)?);
    let mut model = PosteriorModel::random(arch, 1, 1.0);
    let mut opt = OptimizerState::adam(3e-3, Direction::Descent);
    let curve = pretrain_loop(
        &mut model,
        &sched,
        &corpus,
        &mut opt,
        &PretrainConfig {
            steps: 1500,
            batch_size: 32,
            seed: 2,
        },
        |_, record| {
            if record.step % 300 == 0 {
                println!("step {:4}  loss {:.4}", record.step, record.loss);
            }
            Ok(())
        },
    )?;
    println!("final loss {:.4}", curve.last().unwrap().loss);

    let samples: Vec<SequenceState> = (0..2000u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(flowtune::seed_mix(&[3, i]));
            sample_policy_trajectory(&model, &sched, grid, None, &mut rng)
                .map(|t| t.terminal().clone())
        })
        .collect::<flowtune::Result<_>>()?;
    let corpus_seqs: Vec<SequenceState> = corpus
        .samples()
        .unwrap()
        .iter()
        .map(|(s, _)| s.clone())
        .collect();
    let corr = kmer_correlation(&samples, &corpus_seqs, 3, space.vocab)?;
    println!("3-mer correlation between samples and corpus: {corr:.4}");
    Ok(())
}
