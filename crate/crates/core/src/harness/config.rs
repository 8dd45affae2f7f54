use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::reuse::ReuseConfig;
use crate::sampling::SchedulerConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DIT_REUSE_OUT";

pub const FALLBACK_OUT_DIR: &str = "out";

/// One JSON document describing a run. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Absent means every step is computed.
    #[serde(default)]
    pub reuse: Option<ReuseConfig>,
    #[serde(default = "default_prompts")]
    pub prompts: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Also write per-step oracle/proxy traces of the baseline run.
    #[serde(default)]
    pub trace: bool,
}

fn default_prompts() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::default(),
            scheduler: SchedulerConfig::default(),
            reuse: None,
            prompts: default_prompts(),
            output_dir: None,
            trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.scheduler.validate()?;
        if let Some(r) = &self.reuse {
            r.validate()?;
        }
        if self.prompts.is_empty() {
            return Err(Error::Config("prompts must not be empty".into()));
        }
        Ok(())
    }

    /// `--out` beats the environment, which beats the config file.
    pub fn resolve_output_dir(&self, cli: Option<&Path>) -> PathBuf {
        resolve_output_dir(cli, self.output_dir.as_deref())
    }
}

pub fn resolve_output_dir(cli: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    config.map_or_else(|| PathBuf::from(FALLBACK_OUT_DIR), Path::to_path_buf)
}
