//! Pipeline configuration (TOML or JSON, strict schema).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::focal::{CropSpec, PerturbSpec};
use crate::fusion::PatchConfig;
use crate::seg::SegParams;
use crate::volume::GridSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// `<exam>.txt` report files.
    pub reports_dir: PathBuf,
    /// `<exam>_pet.nii[.gz]` and `<exam>_ct.nii[.gz]`; defaults to `reports_dir`.
    pub volumes_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            reports_dir: PathBuf::from("reports"),
            volumes_dir: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PathsConfig {
    pub fn volumes_dir(&self) -> &Path {
        self.volumes_dir.as_deref().unwrap_or(&self.reports_dir)
    }
}

/// `perturb.rng_seed` is the base seed of a run: per-lesion perturbation
/// seeds are derived from it and the reference encoder weights use it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub seg: SegParams,
    pub perturb: PerturbSpec,
    pub crop: CropSpec,
    pub patch: PatchConfig,
    pub paths: PathsConfig,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            seg: SegParams::default(),
            perturb: PerturbSpec::default(),
            crop: CropSpec::default(),
            patch: PatchConfig::default(),
            paths: PathsConfig::default(),
            workers: 1,
        }
    }
}

impl PipelineConfig {
    /// `.json` files are read as JSON, anything else as TOML. Validated.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let parse_err = |msg: String| ConfigError::Parse {
            path: path.to_owned(),
            msg,
        };
        let cfg: Self = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn base_seed(&self) -> u64 {
        self.perturb.rng_seed
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.grid.validate().map_err(|e| inv(&e))?;
        self.seg.validate().map_err(|e| inv(&e))?;
        self.perturb.validate().map_err(|e| inv(&e))?;
        self.crop.validate().map_err(|e| inv(&e))?;
        self.patch.validate().map_err(|e| inv(&e))?;
        let grid = self.patch.global().token_grid(self.grid.target_dims).map_err(|e| inv(&e))?;
        if grid.iter().any(|g| g % self.patch.pool_factor != 0) {
            return Err(ConfigError::Invalid(format!(
                "token grid {grid:?} is not divisible by pool_factor {}",
                self.patch.pool_factor
            )));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        Ok(())
    }
}
