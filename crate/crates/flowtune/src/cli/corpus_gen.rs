//! Synthetic corpus generators standing in for real sequence datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pretrain::DataCorpus;
use crate::state::{SequenceState, StateSpaceSpec};

#[derive(Debug, Clone)]
pub enum CorpusGenerator {
    /// Independent draws from one categorical distribution per position.
    IidCategorical { probs: Vec<f64> },
    /// Iid background with a fixed motif planted at a random offset in a
    /// `rate` fraction of sequences.
    MotifPlanted {
        probs: Vec<f64>,
        motif: Vec<u32>,
        rate: f64,
    },
    /// Mixture of two iid components.
    TwoComponentMixture {
        probs_a: Vec<f64>,
        probs_b: Vec<f64>,
        weight_a: f64,
    },
}

impl CorpusGenerator {
    pub fn by_name(
        name: &str,
        space: &StateSpaceSpec,
        probs: Option<Vec<f64>>,
        probs_b: Option<Vec<f64>>,
        motif: Option<Vec<u32>>,
        rate: f64,
        weight_a: f64,
    ) -> Result<Self> {
        let default_probs = || vec![1.0 / space.vocab as f64; space.vocab as usize];
        match name {
            "iid-categorical" => Ok(Self::IidCategorical {
                probs: probs.unwrap_or_else(default_probs),
            }),
            "motif-planted" => Ok(Self::MotifPlanted {
                probs: probs.unwrap_or_else(default_probs),
                motif: motif.ok_or_else(|| {
                    Error::Domain("motif-planted generator needs `motif`".into())
                })?,
                rate,
            }),
            "two-component-mixture" => Ok(Self::TwoComponentMixture {
                probs_a: probs.unwrap_or_else(default_probs),
                probs_b: probs_b.ok_or_else(|| {
                    Error::Domain("two-component-mixture needs `probs_b`".into())
                })?,
                weight_a,
            }),
            other => Err(Error::Domain(format!("unknown corpus generator `{other}`"))),
        }
    }

    fn validate(&self, space: &StateSpaceSpec) -> Result<()> {
        let check_probs = |p: &[f64]| -> Result<()> {
            if p.len() != space.vocab as usize {
                return Err(Error::Domain(format!(
                    "{} token probabilities for vocabulary of {}",
                    p.len(),
                    space.vocab
                )));
            }
            if p.iter().any(|&x| x < 0.0) || p.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Domain("bad token probabilities".into()));
            }
            Ok(())
        };
        match self {
            Self::IidCategorical { probs } => check_probs(probs),
            Self::MotifPlanted { probs, motif, rate } => {
                check_probs(probs)?;
                if motif.is_empty() || motif.len() > space.positions {
                    return Err(Error::Domain("motif length out of range".into()));
                }
                if motif.iter().any(|&t| t < 1 || t > space.vocab) {
                    return Err(Error::Domain("motif token out of vocabulary".into()));
                }
                if !(0.0..=1.0).contains(rate) {
                    return Err(Error::Domain("plant rate must lie in [0,1]".into()));
                }
                Ok(())
            }
            Self::TwoComponentMixture {
                probs_a,
                probs_b,
                weight_a,
            } => {
                check_probs(probs_a)?;
                check_probs(probs_b)?;
                if !(0.0..=1.0).contains(weight_a) {
                    return Err(Error::Domain("component weight must lie in [0,1]".into()));
                }
                Ok(())
            }
        }
    }
}

fn draw_token(probs: &[f64], rng: &mut impl Rng) -> u32 {
    let total: f64 = probs.iter().sum();
    let mut u: f64 = rng.gen::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i as u32 + 1;
        }
    }
    probs.len() as u32
}

/// Generates `n` sequences deterministically per seed.
pub fn make_corpus(
    space: &StateSpaceSpec,
    generator: &CorpusGenerator,
    n: usize,
    seed: u64,
) -> Result<DataCorpus> {
    if n == 0 {
        return Err(Error::Domain("corpus size must be >= 1".into()));
    }
    generator.validate(space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let tokens: Vec<u32> = match generator {
            CorpusGenerator::IidCategorical { probs } => {
                (0..space.positions).map(|_| draw_token(probs, &mut rng)).collect()
            }
            CorpusGenerator::MotifPlanted { probs, motif, rate } => {
                let mut tokens: Vec<u32> = (0..space.positions)
                    .map(|_| draw_token(probs, &mut rng))
                    .collect();
                if rng.gen::<f64>() < *rate {
                    let offset = rng.gen_range(0..=space.positions - motif.len());
                    tokens[offset..offset + motif.len()].copy_from_slice(motif);
                }
                tokens
            }
            CorpusGenerator::TwoComponentMixture {
                probs_a,
                probs_b,
                weight_a,
            } => {
                let probs = if rng.gen::<f64>() < *weight_a {
                    probs_a
                } else {
                    probs_b
                };
                (0..space.positions).map(|_| draw_token(probs, &mut rng)).collect()
            }
        };
        samples.push((SequenceState::new(tokens), None));
    }
    DataCorpus::from_samples(*space, samples)
}
