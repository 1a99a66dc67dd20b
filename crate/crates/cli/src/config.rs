//! Optional TOML configuration. Command-line flags override it; it overrides
//! the built-in defaults.

use std::path::Path;

use hazefork::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub omega: Option<usize>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub dehaze: DehazeSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub threshold: Option<f64>,
    pub patches_per_image: Option<usize>,
    pub beta_min: Option<f32>,
    pub beta_max: Option<f32>,
    pub airlight_min: Option<f32>,
    pub airlight_max: Option<f32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub loss: Option<String>,
    pub gamma: Option<f64>,
    pub spec: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DehazeSection {
    pub threshold: Option<f64>,
    pub stride_divisor: Option<usize>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub cg_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub t_weights: Option<Vec<f64>>,
    pub a_weights: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Flag, then config file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg: FileConfig = toml::from_str("seed = 4\n[train]\nepochs = 3\nloss = \"l3\"\n[dehaze]\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.epochs, Some(3));
        assert_eq!(cfg.dehaze.lambda, Some(0.5));
        assert!(toml::from_str::<FileConfig>("[train]\nepoch = 3\n").is_err());
    }
}
