//! Line-delimited metrics records: one self-describing key=value line per
//! iteration, append-only, each carrying the run's config hash.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub reg_value: Option<f64>,
    pub tv_ref: Option<f64>,
    pub kmer_corr: Option<f64>,
    pub wall_ms: u128,
}

impl MetricsRecord {
    pub fn render(&self, config_hash: &str) -> String {
        let mut line = format!(
            "iter={} reward_mean={:.6e} reward_std={:.6e}",
            self.iteration, self.reward_mean, self.reward_std
        );
        if let Some(v) = self.reg_value {
            line.push_str(&format!(" reg_value={v:.6e}"));
        }
        if let Some(v) = self.tv_ref {
            line.push_str(&format!(" tv_ref={v:.6e}"));
        }
        if let Some(v) = self.kmer_corr {
            line.push_str(&format!(" kmer_corr={v:.6}"));
        }
        line.push_str(&format!(" config_hash={config_hash} wall_ms={}", self.wall_ms));
        line
    }
}

/// Append-only metrics stream.
pub struct MetricsWriter {
    file: std::fs::File,
    config_hash: String,
}

impl MetricsWriter {
    pub fn create(path: &Path, config_hash: &str) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(Self {
            file: std::fs::File::create(path)?,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", record.render(&self.config_hash))?;
        Ok(())
    }

    pub fn append_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line} config_hash={}", self.config_hash)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_renders_optional_fields() {
        let full = MetricsRecord {
            iteration: 3,
            reward_mean: 1.25,
            reward_std: 0.5,
            reg_value: Some(0.01),
            tv_ref: Some(0.2),
            kmer_corr: Some(0.93),
            wall_ms: 12,
        };
        let line = full.render("deadbeef");
        assert!(line.contains("iter=3"));
        assert!(line.contains("reg_value="));
        assert!(line.contains("config_hash=deadbeef"));

        let minimal = MetricsRecord {
            iteration: 0,
            reward_mean: 0.0,
            reward_std: 0.0,
            reg_value: None,
            tv_ref: None,
            kmer_corr: None,
            wall_ms: 1,
        };
        let line = minimal.render("deadbeef");
        assert!(!line.contains("reg_value="));
        assert!(!line.contains("tv_ref="));
    }
}
