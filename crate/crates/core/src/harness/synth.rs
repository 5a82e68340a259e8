//! Seeded synthetic layer stacks and long-tail activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FpLayer, FpModel};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{ActBatch, Matrix};

const WEIGHT_STREAM: u64 = 1;
const BIAS_STREAM: u64 = 2;
const CHANNEL_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;
const DRIFT_STREAM: u64 = 5;

/// Weight entries are drawn from this distribution and divided by
/// `sqrt(fan_in)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightDist {
    Gaussian { sigma: f64 },
    /// Student-t with `nu` degrees of freedom.
    HeavyTail { nu: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BiasDist {
    Zero,
    Gaussian { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModelSpec {
    pub seed: u64,
    pub depth: usize,
    /// `depth + 1` widths; layer `i` maps `dims[i]` to `dims[i + 1]`.
    pub dims: Vec<usize>,
    pub weight_dist: WeightDist,
    pub bias_dist: BiasDist,
}

impl SyntheticModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            if self.dims.len() > 1 {
                return Err(Error::config("depth 0 takes at most one width"));
            }
        } else if self.dims.len() != self.depth + 1 {
            return Err(Error::config(format!(
                "depth {} needs {} widths, got {}",
                self.depth,
                self.depth + 1,
                self.dims.len()
            )));
        }
        if self.dims.iter().any(|&d| !d.is_power_of_two()) {
            return Err(Error::config(format!("widths {:?} must be powers of two", self.dims)));
        }
        match self.weight_dist {
            WeightDist::Gaussian { sigma } if !(sigma.is_finite() && sigma > 0.0) => {
                Err(Error::config(format!("weight sigma {sigma} must be positive")))
            }
            WeightDist::HeavyTail { nu } if !(nu.is_finite() && nu > 0.0) => {
                Err(Error::config(format!("degrees of freedom {nu} must be positive")))
            }
            _ => Ok(()),
        }?;
        match self.bias_dist {
            BiasDist::Gaussian { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                Err(Error::config(format!("bias sigma {sigma} must be non-negative")))
            }
            _ => Ok(()),
        }
    }
}

/// Deterministic stack of `(W, b)` pairs.
pub fn gen_model(spec: &SyntheticModelSpec) -> Result<FpModel> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let (fan_in, fan_out) = (spec.dims[i], spec.dims[i + 1]);
        let norm = 1.0 / (fan_in as f64).sqrt();
        let mut rng = Rng::new(derive_seed(spec.seed, WEIGHT_STREAM, i as u64));
        let w = match spec.weight_dist {
            WeightDist::Gaussian { sigma } => Matrix::from_fn(fan_in, fan_out, |_, _| sigma * norm * rng.gaussian())?,
            WeightDist::HeavyTail { nu } => Matrix::from_fn(fan_in, fan_out, |_, _| norm * rng.student_t(nu))?,
        };
        let mut rng = Rng::new(derive_seed(spec.seed, BIAS_STREAM, i as u64));
        let b = match spec.bias_dist {
            BiasDist::Zero => vec![0.0; fan_out],
            BiasDist::Gaussian { sigma } => (0..fan_out).map(|_| sigma * rng.gaussian()).collect(),
        };
        layers.push(FpLayer::new(w, b)?);
    }
    FpModel::new(layers)
}

/// Gaussian activations with a few high-gain channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    /// Picks the outlier channels and seeds the per-sample streams.
    pub seed: u64,
    pub batch: usize,
    pub tokens: usize,
    pub channels: usize,
    pub base_scale: f64,
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    /// Log-standard-deviation of a per-sample amplitude factor on the outlier
    /// channels. It changes how strongly outliers drive each layer from one
    /// sample to the next; 0 disables it.
    pub depth_drift: f64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.tokens == 0 || self.channels == 0 {
            return Err(Error::config("long-tail batches need B, N, C >= 1"));
        }
        if self.outlier_channels >= self.channels {
            return Err(Error::config(format!(
                "{} outlier channels out of {}",
                self.outlier_channels, self.channels
            )));
        }
        if !(self.outlier_gain.is_finite() && self.outlier_gain >= 1.0) {
            return Err(Error::config(format!("outlier gain {} must be >= 1", self.outlier_gain)));
        }
        if !(self.base_scale.is_finite() && self.base_scale > 0.0) {
            return Err(Error::config(format!("base scale {} must be positive", self.base_scale)));
        }
        if !(self.depth_drift.is_finite() && self.depth_drift >= 0.0) {
            return Err(Error::config(format!("drift {} must be non-negative", self.depth_drift)));
        }
        Ok(())
    }

    /// The outlier channel indices, sorted.
    pub fn outlier_set(&self) -> Vec<usize> {
        let mut set = Rng::new(derive_seed(self.seed, CHANNEL_STREAM, 0)).choose_distinct(self.channels, self.outlier_channels);
        set.sort_unstable();
        set
    }
}

/// Sample `index` of the stream described by `spec`. All samples share the
/// outlier channels.
pub fn gen_sample(spec: &LongTailSpec, index: u64) -> Result<ActBatch> {
    spec.validate()?;
    let c = spec.channels;
    let mut gain = vec![spec.base_scale; c];
    let amplitude = if spec.depth_drift > 0.0 {
        (spec.depth_drift * Rng::new(derive_seed(spec.seed, DRIFT_STREAM, index)).gaussian()).exp()
    } else {
        1.0
    };
    for ch in spec.outlier_set() {
        gain[ch] *= spec.outlier_gain * amplitude;
    }
    let mut rng = Rng::new(derive_seed(spec.seed, NOISE_STREAM, index));
    let n = spec.batch * spec.tokens * c;
    let data = (0..n).map(|i| gain[i % c] * rng.gaussian()).collect();
    ActBatch::new(spec.batch, spec.tokens, c, data)
}

pub fn gen_longtail(spec: &LongTailSpec) -> Result<ActBatch> {
    gen_sample(spec, 0)
}

/// Samples `start .. start + count`.
pub fn gen_dataset(spec: &LongTailSpec, start: u64, count: usize) -> Result<Vec<ActBatch>> {
    (start..start + count as u64).map(|i| gen_sample(spec, i)).collect()
}
