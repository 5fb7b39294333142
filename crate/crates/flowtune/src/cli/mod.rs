//! Configuration, experiment orchestration, metrics emission, and synthetic
//! corpus generation behind the `flowtune` binary.

pub mod commands;
pub mod config;
pub mod corpus_gen;
pub mod metrics;

pub use commands::{cmd_eval, cmd_finetune, cmd_make_corpus, cmd_pretrain, cmd_sample, cmd_verify};
pub use config::RunConfig;
pub use corpus_gen::{make_corpus, CorpusGenerator};
pub use metrics::{MetricsRecord, MetricsWriter};
