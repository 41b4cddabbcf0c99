//! TOML configuration file mirroring the library configs, with CLI flags
//! taking precedence over file values. Unknown keys are hard errors, and the
//! effective configuration is echoed before any work starts.

use std::path::Path;

use maemi_core::fusion::FusionConfig;
use maemi_core::trainer::TrainConfig;
use maemi_core::vision::VisionConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Teacher-client settings for live data generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            endpoint: "http://localhost:8080/v1/chat/completions".to_string(),
            model: "teacher".to_string(),
            api_key_env: "MAEMI_TEACHER_API_KEY".to_string(),
            timeout_secs: 60,
            max_retries: 3,
        }
    }
}

/// The full config file: one section per library config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub vision: VisionConfig,
    pub fusion: FusionConfig,
    pub teacher: TeacherConfig,
}

impl CliConfig {
    /// Load from a TOML file, or defaults when no file is given. Unknown
    /// keys anywhere in the file are rejected.
    pub fn load(path: Option<&Path>) -> Result<CliConfig> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }

    /// Echo the effective configuration (after flag overrides) to stderr.
    pub fn echo(&self) {
        let rendered = toml::to_string_pretty(self).unwrap_or_default();
        for line in rendered.lines() {
            eprintln!("config: {line}");
        }
    }
}
