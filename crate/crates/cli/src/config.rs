use std::fs;
use std::path::{Path, PathBuf};

use panoflow_core::fusion::FusionConfig;
use panoflow_core::model::ModelConfig;
use panoflow_core::subnets::DEFAULT_LAMBDA;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run can be configured with. Missing keys take defaults;
/// command-line flags override the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Square input side in pixels; a multiple of 128.
    pub size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub workers: Option<usize>,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub image: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            size: 512,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            workers: None,
            model: ModelConfig::default(),
            fusion: FusionConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Applies `task=n` stage overrides.
    pub fn set_stages(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for item in overrides {
            let (task, n) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--stages expects task=n, got `{item}`")))?;
            let n: usize = n.parse().map_err(|_| CliError::Usage(format!("--stages {task}: `{n}` is not a count")))?;
            let stages = &mut self.model.subnet.stages;
            match task {
                "cls" => stages.cls = n,
                "reg" => stages.reg = n,
                "stuff" => stages.stuff = n,
                "thing" => stages.thing = n,
                _ => return Err(CliError::Usage(format!("--stages: unknown task `{task}` (cls, reg, stuff, thing)"))),
            }
        }
        Ok(())
    }

    pub fn disable_flows(&mut self, names: &[String]) -> Result<(), CliError> {
        for name in names {
            self.model.subnet.flows.set(name, false).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(CliError::Usage(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.workers == Some(0) {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        self.model.validate()?;
        self.fusion.validate()?;
        Ok(())
    }
}
