//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episodic::RunConfig;
use crate::error::{Error, Result};

const CASESTUDY: &str = include_str!("../../configs/casestudy.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub dump_scores: bool,
    /// Independent repetitions of the run, each under its own seed roots.
    #[serde(default = "one")]
    pub repetitions: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// The shipped case-study preset.
    pub fn casestudy() -> Self {
        Self::parse(CASESTUDY, "casestudy.toml").expect("shipped preset parses")
    }

    pub fn casestudy_text() -> &'static str {
        CASESTUDY
    }

    /// Parse TOML text; `origin` names the source in error messages, which
    /// carry line and column when the parser reports a location.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    Error::Config(format!("{origin}:{line}:{col}: {msg}"))
                }
                None => Error::Config(format!("{origin}: {msg}")),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.output.repetitions == 0 {
            return Err(Error::Config("output.repetitions must be at least 1".into()));
        }
        Ok(())
    }
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}
