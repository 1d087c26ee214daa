//! Run configuration files.
//!
//! A file has a top-level `preset` and the sections `[model]`, `[driver]`,
//! `[terminal]` and `[run]`. Keys in `[run]` carry the names of the
//! command-line flags, which take precedence over the file.
//!
//! ```toml
//! preset = "custom"
//!
//! [model]
//! T = 1.0
//! x0 = 0.0
//! b = 0.0
//! sigma = 1.5
//!
//! [driver]
//! coefficients = [0.0, 0.0, 0.0, -1.0]   # f(y, z) = -y^3
//! z = 0.0
//!
//! [terminal]
//! kind = "quadratic"
//! scale = 1.0
//!
//! [run]
//! scheme = "fp"
//! Ns = [5, 10, 20]
//! R0 = 2.0
//! alpha = 0.249
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub model: Option<ModelSection>,
    pub driver: Option<DriverSection>,
    pub terminal: Option<TerminalSection>,
    pub run: Option<RunSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub x0: Option<f64>,
    pub b: Option<f64>,
    pub sigma: Option<f64>,
}

/// Polynomial driver `Σ coefficients[k] y^k + z · z_var`, with optional
/// overrides of the derived constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    pub coefficients: Option<Vec<f64>>,
    pub z: Option<f64>,
    pub monotonicity: Option<f64>,
    pub lipschitz_y: Option<f64>,
    pub degree: Option<u32>,
    pub lipschitz_z: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    /// `quadratic`, `clamp` or `constant`.
    pub kind: String,
    pub scale: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub slope: Option<f64>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunSection {
    pub scheme: Option<String>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "Ns")]
    pub ns: Option<Vec<usize>>,
    #[serde(rename = "R0")]
    pub r0: Option<f64>,
    pub alpha: Option<f64>,
    pub trunc_mode: Option<String>,
    pub epsilon: Option<f64>,
    pub weights: Option<String>,
    pub eta: Option<f64>,
    pub grid_extent: Option<i64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub no_timing: Option<bool>,
    pub seed: Option<u64>,
    #[serde(rename = "proxy-N")]
    pub proxy_n: Option<usize>,
    pub fd_dx: Option<f64>,
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    toml::from_str(text).map_err(|e| FbsdeError::Config(format!("config file: {e}")))
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FbsdeError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let text = r#"
preset = "custom"
[model]
T = 1.0
sigma = 1.5
[driver]
coefficients = [0.0, 0.0, 0.0, -1.0]
[terminal]
kind = "quadratic"
scale = 1.0
[run]
scheme = "fp"
Ns = [5, 10, 20]
R0 = 2.0
trunc-mode = "mollified"
grid-extent = 40
proxy-N = 60
"#;
        let c = parse_config(text).unwrap();
        assert_eq!(c.preset.as_deref(), Some("custom"));
        assert_eq!(c.model.unwrap().horizon, Some(1.0));
        let run = c.run.unwrap();
        assert_eq!(run.ns, Some(vec![5, 10, 20]));
        assert_eq!(run.r0, Some(2.0));
        assert_eq!(run.trunc_mode.as_deref(), Some("mollified"));
        assert_eq!(run.grid_extent, Some(40));
        assert_eq!(run.proxy_n, Some(60));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse_config("[run]\nsteps = 3\n"), Err(FbsdeError::Config(_))));
        assert!(parse_config("colour = 1").is_err());
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(parse_config("").unwrap(), FileConfig::default());
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_config(&dir.path().join("nope.toml")), Err(FbsdeError::Config(_))));
    }
}
