//! Experiment configuration: TOML file with `[model]`, `[test]`, `[mc]`,
//! `[output]` blocks (plus `[calibrate]` for the battery command).
//! Precedence is flags > file > defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelBlock>,
    pub test: Option<TestBlock>,
    pub mc: Option<McBlock>,
    pub output: Option<OutputBlock>,
    pub calibrate: Option<CalibrateBlock>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub n: Option<usize>,
    pub sigma: Option<f64>,
    pub sigma_lo: Option<f64>,
    pub sigma_hi: Option<f64>,
    /// zero | spike | flat | mixed
    pub family: Option<String>,
    pub k: Option<usize>,
    pub amplitude: Option<f64>,
    pub delta: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestBlock {
    /// hc | bulk | inter | combined | hc-var | bulk-var | inter-var |
    /// combined-var | s4
    pub kind: Option<String>,
    pub k0: Option<usize>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateBlock {
    pub tests: Option<Vec<String>>,
    pub k0s: Option<Vec<usize>>,
    pub families: Option<Vec<String>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, String> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(FileConfig::default()),
        }
    }
}

/// flags > file > defaults, field by field.
pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn pick_opt<T: Clone>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}
