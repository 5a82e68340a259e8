//! The declarative run configuration, stored as TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{DataSpec, ModelShape};
use crate::lowrank::{LayerBuildConfig, Pairing, StopRule};
use crate::quantizers::ActQuantKind;
use crate::rotation::RotationKind;
use crate::volts::{Budgets, CalibConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub num_samples: usize,
    pub delta1: f64,
    pub delta2: f64,
    pub budgets: Budgets,
}

/// Layer build settings shared by every layer. The stopping rule comes from
/// the budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDefaults {
    pub bits_w: u32,
    pub bits_a: u32,
    pub rank: usize,
    pub rotation: RotationKind,
    pub act: ActQuantKind,
    pub pairing: Pairing,
    pub sign_seed: u64,
}

/// Seeds swept by the ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub seed_start: u64,
    pub seed_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSpec {
    /// Tokens per forward pass used for operation counts.
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelShape,
    pub data: DataSpec,
    pub calibration: CalibrationSection,
    pub layer: LayerDefaults,
    pub benchmark: BenchmarkSpec,
    pub report: ReportSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let calib = CalibConfig::default();
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: "out".into(),
            model: ModelShape::default(),
            data: DataSpec::default(),
            calibration: CalibrationSection {
                num_samples: calib.num_samples,
                delta1: calib.delta1,
                delta2: calib.delta2,
                budgets: calib.budgets,
            },
            layer: LayerDefaults {
                bits_w: calib.layer.bits_w,
                bits_a: calib.layer.bits_a,
                rank: calib.layer.rank,
                rotation: calib.layer.rotation,
                act: calib.layer.act,
                pairing: calib.layer.pairing,
                sign_seed: calib.layer.sign_seed,
            },
            benchmark: BenchmarkSpec {
                seed_start: 0,
                seed_count: 100,
            },
            report: ReportSpec { tokens: 1024 },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!("unsupported config version {}", self.version)));
        }
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir must not be empty"));
        }
        self.model.spec(self.seed).validate()?;
        self.data.validate()?;
        if let Some(&channels) = self.model.dims.first() {
            self.data.longtail(self.seed, channels).validate()?;
        }
        self.calib_config().validate()?;
        self.calib_config().layer.validate()?;
        if self.benchmark.seed_count == 0 {
            return Err(Error::config("benchmark needs at least one seed"));
        }
        if self.report.tokens == 0 {
            return Err(Error::config("report needs at least one token"));
        }
        Ok(())
    }

    pub fn calib_config(&self) -> CalibConfig {
        let l = &self.layer;
        CalibConfig {
            delta1: self.calibration.delta1,
            delta2: self.calibration.delta2,
            num_samples: self.calibration.num_samples,
            seed: self.seed,
            budgets: self.calibration.budgets,
            layer: LayerBuildConfig {
                bits_w: l.bits_w,
                bits_a: l.bits_a,
                rank: l.rank,
                rotation: l.rotation,
                act: l.act,
                stop: StopRule::fixed(self.calibration.budgets.frozen),
                pairing: l.pairing,
                sign_seed: l.sign_seed,
            },
        }
    }

    /// Seeds of the ablation sweep.
    pub fn benchmark_seeds(&self) -> std::ops::Range<u64> {
        let b = &self.benchmark;
        b.seed_start..b.seed_start.saturating_add(b.seed_count)
    }
}
