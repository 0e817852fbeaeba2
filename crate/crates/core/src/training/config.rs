//! TOML experiment files with `[network]`, `[training]` and `[data]`
//! tables. Every key is optional and falls back to its default.
//!
//! ```
//! use hdan::training::ExperimentConfig;
//! let cfg = ExperimentConfig::from_toml_str(
//!     "[network]\ngrowth_rate = 8\n\n[training]\nmax_epochs = 3\n\n[training.patch]\npatch_size = [32, 32, 32]\nstride = [16, 16, 16]\n",
//! )
//! .unwrap();
//! assert_eq!(cfg.network.growth_rate, 8);
//! assert_eq!(cfg.training.patch.stride, [16; 3]);
//! assert_eq!(cfg.training.initial_lr, 1e-3);
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate a config file. A missing file is a configuration
    /// error, not an I/O failure.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), strip(&e))))?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            cfg.data.manifest = Some(dir.join(m));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::InvalidConfig(m) => m.clone(),
        e => e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        for text in [
            "[training]\nlearning_rate = 1\n",
            "[nope]\n",
            "[training]\ninitial_lr = -1.0\n",
            "[network]\nca_reduction = 7\n",
            "[training]\noptimizer = \"rmsprop\"\n",
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_validation(), "{text}: {err}");
        }
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = ExperimentConfig::load(Path::new("/definitely/not/here.toml")).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(err.is_validation());
    }

    #[test]
    fn manifest_resolves_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "[data]\nmanifest = \"m.csv\"\n[training]\noptimizer = \"sgd_momentum\"\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.data.manifest, Some(dir.path().join("m.csv")));
        assert_eq!(
            cfg.training.optimizer,
            super::super::OptimizerKind::SgdMomentum
        );
    }
}
