//! Run configuration: flat human-readable key-value text with section
//! headers. Every output artifact embeds the file's hash.
//!
//! ```text
//! [space]
//! d = 8
//! vocab = 4
//! mask = true
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::ctmc::TimeGrid;
use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::model::{
    Architecture, Direction, NeuralArch, OptimizerState, TabularArch,
};
use crate::path::{Scheduler, SchedulerKind};
use crate::regularize::{Algorithm, RegKind, RegSpec, StateSource};
use crate::rl::{AdvantageKind, AdvantageSpec, RewardFn};
use crate::state::StateSpaceSpec;

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, (String, usize)>,
    /// FNV-1a hash of the raw config bytes, hex-encoded.
    pub hash: String,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, base_dir)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(Error::Config {
                    line: lineno,
                    msg: format!("unterminated section header `{line}`"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Config {
                line: lineno,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            if section.is_empty() {
                return Err(Error::Config {
                    line: lineno,
                    msg: "key outside any [section]".into(),
                });
            }
            let full = format!("{section}.{}", key.trim());
            if values
                .insert(full.clone(), (value.trim().to_string(), lineno))
                .is_some()
            {
                return Err(Error::Config {
                    line: lineno,
                    msg: format!("duplicate key `{full}`"),
                });
            }
        }
        let hash = format!("{:016x}", fnv1a64(text.as_bytes()));
        Ok(Self {
            values,
            hash,
            base_dir,
        })
    }

    fn entry(&self, key: &str) -> Option<&(String, usize)> {
        self.values.get(key)
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (value, line) = self.entry(key).ok_or(Error::Config {
            line: 0,
            msg: format!("missing required field `{key}`"),
        })?;
        value.parse().map_err(|_| Error::Config {
            line: *line,
            msg: format!("field `{key}` has unparseable value `{value}`"),
        })
    }

    pub fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some((value, line)) => value
                .parse()
                .map(Some)
                .map_err(|_| Error::Config {
                    line: *line,
                    msg: format!("field `{key}` has unparseable value `{value}`"),
                }),
        }
    }

    pub fn optional_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.optional(key)?.unwrap_or(default))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|(v, _)| v.as_str())
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.entry(key) {
            None => Ok(default),
            Some((value, line)) => match value.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(Error::Config {
                    line: *line,
                    msg: format!("field `{key}` expects a boolean, got `{other}`"),
                }),
            },
        }
    }

    /// Path field resolved against the config file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or(Error::Config {
            line: 0,
            msg: format!("missing required path field `{key}`"),
        })
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entry(key) {
            None => Ok(None),
            Some((value, line)) => value
                .split_whitespace()
                .map(|v| {
                    v.parse().map_err(|_| Error::Config {
                        line: *line,
                        msg: format!("field `{key}` has a bad number `{v}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    pub fn u32_list(&self, key: &str) -> Result<Option<Vec<u32>>> {
        match self.entry(key) {
            None => Ok(None),
            Some((value, line)) => value
                .split_whitespace()
                .map(|v| {
                    v.parse().map_err(|_| Error::Config {
                        line: *line,
                        msg: format!("field `{key}` has a bad token `{v}`"),
                    })
                })
                .collect::<Result<Vec<u32>>>()
                .map(Some),
        }
    }

    // ---- typed sections ----

    pub fn space(&self) -> Result<StateSpaceSpec> {
        StateSpaceSpec::new(
            self.require("space.d")?,
            self.require("space.vocab")?,
            self.bool_or("space.mask", true)?,
        )
    }

    pub fn scheduler(&self) -> Result<Scheduler> {
        let kind: SchedulerKind = self.optional_or("scheduler.kind", SchedulerKind::Linear)?;
        let horizon: f64 = self.optional_or("scheduler.horizon", 1.0)?;
        match self.optional::<f64>("scheduler.eps")? {
            Some(eps) => Scheduler::with_eps(kind, horizon, eps),
            None => Scheduler::new(kind, horizon),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        let sched = self.scheduler()?;
        TimeGrid::new(sched.horizon, self.require("grid.dt")?)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let space = self.space()?;
        let sched = self.scheduler()?;
        let conditions: u32 = self.optional_or("model.conditions", 0)?;
        match self.raw("model.backend") {
            Some("tabular") => Ok(Architecture::Tabular(TabularArch::new(
                space,
                self.optional_or("model.time_bins", 4)?,
                sched.horizon,
                conditions,
            )?)),
            Some("neural") | None => Ok(Architecture::Neural(NeuralArch::new(
                space,
                self.optional_or("model.embed_dim", 8)?,
                self.optional_or("model.hidden_dim", 64)?,
                self.optional_or("model.time_features", 8)?,
                sched.horizon,
                conditions,
                self.optional_or("model.cond_dim", 8)?,
            )?)),
            Some(other) => Err(Error::Config {
                line: 0,
                msg: format!("unknown model backend `{other}`"),
            }),
        }
    }

    pub fn reward(&self, space: &StateSpaceSpec) -> Result<Option<RewardFn>> {
        match self.raw("reward.name") {
            None => Ok(None),
            Some(name) => {
                let args = self.raw("reward.args").unwrap_or("");
                RewardFn::by_name(name, args, space).map(Some)
            }
        }
    }

    pub fn reg_spec(&self) -> Result<RegSpec> {
        let kind: RegKind = self.optional_or("regularize.kind", RegKind::None)?;
        let spec = RegSpec {
            kind,
            lambda: self.optional_or("regularize.lambda", 0.0)?,
            source: self.optional_or("regularize.source", StateSource::ReferenceRollouts)?,
            refresh_every: self.optional_or("regularize.refresh_every", 10)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        match self.raw("finetune.algorithm").unwrap_or("reinforce") {
            "reinforce" => Ok(Algorithm::Reinforce),
            "ppo" => Ok(Algorithm::Ppo {
                clip_eps: self.optional_or("finetune.clip_eps", 0.2)?,
                epochs: self.optional_or("finetune.ppo_epochs", 4)?,
            }),
            other => Err(Error::Config {
                line: 0,
                msg: format!("unknown algorithm `{other}`"),
            }),
        }
    }

    pub fn advantage(&self) -> Result<AdvantageSpec> {
        let kind = match self.raw("finetune.advantage").unwrap_or("mean_baseline") {
            "raw" => AdvantageKind::Raw,
            "mean_baseline" => AdvantageKind::MeanBaseline,
            "group_normalized" => AdvantageKind::GroupNormalized,
            other => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("unknown advantage kind `{other}`"),
                })
            }
        };
        Ok(AdvantageSpec {
            kind,
            group_size: self.optional_or("finetune.group_size", 0)?,
        })
    }

    pub fn condition_weights(&self) -> Result<Option<Vec<f64>>> {
        self.f64_list("finetune.condition_weights")
    }

    /// Optimizer for the given section (`pretrain` or `finetune`).
    pub fn optimizer(&self, section: &str, direction: Direction) -> Result<OptimizerState> {
        let lr: f64 = self.optional_or(&format!("{section}.lr"), 1e-3)?;
        match self.raw(&format!("{section}.optimizer")).unwrap_or("adam") {
            "adam" => Ok(OptimizerState::adam(lr, direction)),
            "sgd" => Ok(OptimizerState::sgd(lr, direction)),
            other => Err(Error::Config {
                line: 0,
                msg: format!("unknown optimizer `{other}`"),
            }),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.optional_or("run.seed", 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = "\
# demo config
[space]
d = 4
vocab = 4
mask = true

[scheduler]
kind = linear
horizon = 1.0

[grid]
dt = 0.1

[model]
backend = neural
hidden_dim = 32

[run]
seed = 7
";

    #[test]
    fn parses_sections_and_types() {
        let cfg = RunConfig::parse(DEMO, PathBuf::from(".")).unwrap();
        let space = cfg.space().unwrap();
        assert_eq!(space.positions, 4);
        assert_eq!(space.vocab, 4);
        assert!(space.has_mask);
        assert_eq!(cfg.seed().unwrap(), 7);
        let grid = cfg.grid().unwrap();
        assert_eq!(grid.steps, 10);
        assert_eq!(cfg.hash.len(), 16);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "[space]\nd == 4\n";
        match RunConfig::parse(bad, PathBuf::from(".")) {
            Ok(cfg) => {
                // `d == 4` parses as key `d` with value `= 4`; typed access fails
                let err = cfg.space().unwrap_err();
                match err {
                    Error::Config { line, .. } => assert_eq!(line, 2),
                    other => panic!("unexpected {other:?}"),
                }
            }
            Err(Error::Config { .. }) => {}
            Err(other) => panic!("unexpected {other:?}"),
        }

        let bad = "d = 4\n";
        match RunConfig::parse(bad, PathBuf::from(".")) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("section"));
            }
            other => panic!("expected section error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        let bad = "[run]\nseed = 1\nseed = 2\n";
        assert!(matches!(
            RunConfig::parse(bad, PathBuf::from(".")),
            Err(Error::Config { line: 3, .. })
        ));
    }

    #[test]
    fn same_text_same_hash() {
        let a = RunConfig::parse(DEMO, PathBuf::from(".")).unwrap();
        let b = RunConfig::parse(DEMO, PathBuf::from(".")).unwrap();
        assert_eq!(a.hash, b.hash);
        let c = RunConfig::parse("[run]\nseed = 1\n", PathBuf::from(".")).unwrap();
        assert_ne!(a.hash, c.hash);
    }
}
