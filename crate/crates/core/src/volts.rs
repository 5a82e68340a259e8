//! Variance-oriented layer sensitivity.
//!
//! A calibration pass records, for every linear layer and every sample, the
//! mean of the layer's input. The population variance of that statistic over
//! the samples sorts layers into three classes, and each class gets its own
//! optimizer budget.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{build_prepared, LayerBuildConfig, PreparedWeight, QuantizedLinear, StopRule};
use crate::model::{layer_id, FpModel, LayerStack, QuantModel};
use crate::quantizers::ActQuantKind;
use crate::rng::derive_seed;
use crate::rotation::RotationDescriptor;
use crate::tensor::{channel_abs_max, ActBatch, Matrix};

/// Mean over every entry of a `B x N x C` batch.
pub fn channel_mean(x: &ActBatch) -> f64 {
    let data = x.as_slice();
    data.iter().sum::<f64>() / data.len() as f64
}

fn matrix_mean(x: &Matrix) -> f64 {
    x.as_slice().iter().sum::<f64>() / x.as_slice().len() as f64
}

/// Per-sample input statistic of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer_id: String,
    /// Indexed by calibration sample.
    pub per_sample_mu: Vec<f64>,
}

/// Population variance of the per-sample statistic.
pub fn layer_variance(stat: &LayerStat) -> Result<f64> {
    let mu = &stat.per_sample_mu;
    if mu.len() < 2 {
        return Err(Error::Calibration(format!(
            "variance requires ≥ 2 samples (layer {} has {})",
            stat.layer_id,
            mu.len()
        )));
    }
    let m = mu.len() as f64;
    let mean = mu.iter().sum::<f64>() / m;
    Ok(mu.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityClass {
    /// Initialized once, not adapted.
    Frozen,
    /// A short, fixed number of rounds.
    Light,
    /// Optimized until convergence.
    Full,
}

impl SensitivityClass {
    pub fn name(self) -> &'static str {
        match self {
            SensitivityClass::Frozen => "frozen",
            SensitivityClass::Light => "light",
            SensitivityClass::Full => "full",
        }
    }
}

/// Optimizer rounds per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub frozen: usize,
    pub light: usize,
    /// Round cap of the full class.
    pub full_cap: usize,
    /// Relative improvement below which the full class stops.
    pub full_tol: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            frozen: 1,
            light: 30,
            full_cap: StopRule::DEFAULT_CAP,
            full_tol: StopRule::DEFAULT_TOL,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<()> {
        if self.frozen == 0 || self.light == 0 || self.full_cap == 0 {
            return Err(Error::config("every budget needs at least one round"));
        }
        if !(self.frozen <= self.light && self.light <= self.full_cap) {
            return Err(Error::config("budgets must satisfy frozen <= light <= full_cap"));
        }
        if !(self.full_tol.is_finite() && self.full_tol >= 0.0) {
            return Err(Error::config(format!("invalid convergence tolerance {}", self.full_tol)));
        }
        Ok(())
    }

    /// Nominal round count of a class (the cap for the full class).
    pub fn rounds(&self, class: SensitivityClass) -> usize {
        match class {
            SensitivityClass::Frozen => self.frozen,
            SensitivityClass::Light => self.light,
            SensitivityClass::Full => self.full_cap,
        }
    }

    pub fn stop_rule(&self, class: SensitivityClass) -> StopRule {
        match class {
            SensitivityClass::Frozen => StopRule::fixed(self.frozen),
            SensitivityClass::Light => StopRule::fixed(self.light),
            SensitivityClass::Full => StopRule::Converge {
                tol: self.full_tol,
                cap: self.full_cap,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer_id: String,
    pub variance: f64,
    pub class: SensitivityClass,
    pub budget_rounds: usize,
}

/// Per-layer variance and class, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensitivityReport {
    pub layers: Vec<LayerSensitivity>,
}

impl SensitivityReport {
    pub fn count(&self, class: SensitivityClass) -> usize {
        self.layers.iter().filter(|l| l.class == class).count()
    }

    /// Aligned table sorted by descending variance.
    pub fn table(&self) -> String {
        let mut rows: Vec<&LayerSensitivity> = self.layers.iter().collect();
        rows.sort_by(|a, b| b.variance.total_cmp(&a.variance).then_with(|| a.layer_id.cmp(&b.layer_id)));
        let mut out = format!("{:<12} {:>14} {:>8} {:>8}\n", "layer", "variance", "class", "rounds");
        for r in rows {
            let _ = writeln!(
                out,
                "{:<12} {:>14.6e} {:>8} {:>8}",
                r.layer_id,
                r.variance,
                r.class.name(),
                r.budget_rounds
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub num_samples: usize,
    pub seed: u64,
    pub budgets: Budgets,
    /// Layer build settings; the stopping rule is replaced per class.
    pub layer: LayerBuildConfig,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            delta1: 0.001,
            delta2: 0.075,
            num_samples: 50,
            seed: 0,
            budgets: Budgets::default(),
            layer: LayerBuildConfig {
                bits_w: 4,
                bits_a: 4,
                rank: 32,
                rotation: crate::rotation::RotationKind::WalshHadamard,
                act: ActQuantKind::Draq,
                stop: StopRule::fixed(1),
                pairing: Default::default(),
                sign_seed: 0,
            },
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta1.is_finite() && self.delta2.is_finite() && 0.0 <= self.delta1 && self.delta1 < self.delta2) {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 <= delta1 < delta2, got {} and {}",
                self.delta1, self.delta2
            )));
        }
        self.budgets.validate()
    }

    pub fn class_of(&self, variance: f64) -> SensitivityClass {
        if variance < self.delta1 {
            SensitivityClass::Frozen
        } else if variance < self.delta2 {
            SensitivityClass::Light
        } else {
            SensitivityClass::Full
        }
    }

    /// Build settings for layer `index` of the given class.
    pub fn layer_config(&self, index: usize, class: SensitivityClass) -> LayerBuildConfig {
        LayerBuildConfig {
            stop: self.budgets.stop_rule(class),
            sign_seed: derive_seed(self.layer.sign_seed, 0x5167, index as u64),
            ..self.layer.clone()
        }
    }
}

/// Assigns classes and budgets to `(layer_id, variance)` pairs.
pub fn classify(variances: &[(String, f64)], cfg: &CalibConfig) -> Result<SensitivityReport> {
    cfg.validate()?;
    let layers = variances
        .iter()
        .map(|(id, v)| {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Calibration(format!("layer {id} has invalid variance {v}")));
            }
            let class = cfg.class_of(*v);
            Ok(LayerSensitivity {
                layer_id: id.clone(),
                variance: *v,
                class,
                budget_rounds: cfg.budgets.rounds(class),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport { layers })
}

/// Arms of the sensitivity-scheme ablation ([`Scheme::ALL`]) plus the
/// initialization-only baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Every layer initialized only; the no-optimization baseline.
    UniformFrozen,
    UniformLight,
    UniformFull,
    FrozenLight,
    FrozenFull,
    ThreeTier,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::UniformLight,
        Scheme::UniformFull,
        Scheme::FrozenLight,
        Scheme::FrozenFull,
        Scheme::ThreeTier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::UniformFrozen => "uniform-frozen",
            Scheme::UniformLight => "uniform-light",
            Scheme::UniformFull => "uniform-full",
            Scheme::FrozenLight => "frozen+light",
            Scheme::FrozenFull => "frozen+full",
            Scheme::ThreeTier => "three-tier",
        }
    }

    pub fn parse(name: &str) -> Result<Scheme> {
        Scheme::ALL
            .into_iter()
            .chain([Scheme::UniformFrozen])
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::config(format!("unknown scheme {name:?}")))
    }

    /// The class every layer gets, for the schemes that ignore statistics.
    pub fn uniform_class(self) -> Option<SensitivityClass> {
        match self {
            Scheme::UniformFrozen => Some(SensitivityClass::Frozen),
            Scheme::UniformLight => Some(SensitivityClass::Light),
            Scheme::UniformFull => Some(SensitivityClass::Full),
            _ => None,
        }
    }

    fn remap(self, class: SensitivityClass) -> SensitivityClass {
        use SensitivityClass::*;
        match (self, class) {
            (Scheme::UniformFrozen, _) => Frozen,
            (Scheme::UniformLight, _) => Light,
            (Scheme::UniformFull, _) => Full,
            (Scheme::FrozenLight | Scheme::FrozenFull, Frozen) => Frozen,
            (Scheme::FrozenLight, _) => Light,
            (Scheme::FrozenFull, _) => Full,
            (Scheme::ThreeTier, c) => c,
        }
    }
}

/// Report giving all `depth` layers the same class, for builds without a
/// statistics pass. Variances are recorded as zero.
pub fn uniform_report(depth: usize, class: SensitivityClass, budgets: &Budgets) -> SensitivityReport {
    SensitivityReport {
        layers: (0..depth)
            .map(|i| LayerSensitivity {
                layer_id: layer_id(i),
                variance: 0.0,
                class,
                budget_rounds: budgets.rounds(class),
            })
            .collect(),
    }
}

/// Reassigns classes per `scheme`, keeping the variances.
pub fn ablation_scheme(report: &SensitivityReport, scheme: Scheme, budgets: &Budgets) -> SensitivityReport {
    SensitivityReport {
        layers: report
            .layers
            .iter()
            .map(|l| {
                let class = scheme.remap(l.class);
                LayerSensitivity {
                    class,
                    budget_rounds: budgets.rounds(class),
                    ..l.clone()
                }
            })
            .collect(),
    }
}

/// Statistics of one calibration pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibStats {
    pub stats: Vec<LayerStat>,
    /// Per-layer channel maxima of the rotated inputs over the whole dataset.
    pub rotated_chan_max: Vec<Vec<f64>>,
}

/// Runs every sample through `model`, recording each layer's input mean and
/// the channel maxima of its rotated input.
pub fn collect_stats(model: &FpModel, dataset: &[ActBatch], cfg: &CalibConfig) -> Result<CalibStats> {
    if model.is_empty() {
        return Err(Error::Calibration("model has no layers".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Calibration("calibration dataset is empty".into()));
    }
    let depth = model.depth();
    let rotations = (0..depth)
        .map(|i| {
            let c = cfg.layer_config(i, SensitivityClass::Frozen);
            RotationDescriptor::new(model.layer_dims(i).0, c.rotation, c.sign_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mu = vec![Vec::with_capacity(dataset.len()); depth];
    let mut chan_max: Vec<Vec<f64>> = (0..depth).map(|i| vec![0.0; model.layer_dims(i).0]).collect();
    for sample in dataset {
        if sample.channels() != model.in_dim() {
            return Err(Error::dim(format!(
                "sample has {} channels, model takes {}",
                sample.channels(),
                model.in_dim()
            )));
        }
        let trace = model.forward_trace(&sample.to_matrix())?;
        for i in 0..depth {
            mu[i].push(matrix_mean(&trace[i]));
            let m = channel_abs_max(&rotations[i].rotate_input(&trace[i])?)?;
            for (acc, v) in chan_max[i].iter_mut().zip(m) {
                *acc = acc.max(v);
            }
        }
    }
    let stats = mu
        .into_iter()
        .enumerate()
        .map(|(i, per_sample_mu)| LayerStat {
            layer_id: layer_id(i),
            per_sample_mu,
        })
        .collect();
    Ok(CalibStats {
        stats,
        rotated_chan_max: chan_max,
    })
}

/// Variances of the collected statistics, keyed by layer id.
pub fn variances(stats: &[LayerStat]) -> Result<Vec<(String, f64)>> {
    stats
        .iter()
        .map(|s| Ok((s.layer_id.clone(), layer_variance(s)?)))
        .collect()
}

/// Builds every layer of `model` with the budget `report` assigns it.
pub fn build_with_report(
    model: &FpModel,
    report: &SensitivityReport,
    cfg: &CalibConfig,
    rotated_chan_max: Option<&[Vec<f64>]>,
) -> Result<QuantModel> {
    let prepared = prepare_model(model, cfg)?;
    build_prepared_model(model, &prepared, report, cfg, rotated_chan_max)
}

/// Rotated weights and SVD inits of every layer.
pub fn prepare_model(model: &FpModel, cfg: &CalibConfig) -> Result<Vec<PreparedWeight>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let c = cfg.layer_config(i, SensitivityClass::Frozen);
            PreparedWeight::new(&l.w, c.rotation, c.sign_seed, c.rank).map_err(|e| numeric(i, e))
        })
        .collect()
}

fn numeric(i: usize, e: Error) -> Error {
    match e {
        Error::Numeric { .. } | Error::Config(_) => e,
        other => Error::Numeric {
            layer: layer_id(i),
            msg: other.to_string(),
        },
    }
}

/// Like [`build_with_report`] with precomputed inits.
pub fn build_prepared_model(
    model: &FpModel,
    prepared: &[PreparedWeight],
    report: &SensitivityReport,
    cfg: &CalibConfig,
    rotated_chan_max: Option<&[Vec<f64>]>,
) -> Result<QuantModel> {
    if report.layers.len() != model.depth() || prepared.len() != model.depth() {
        return Err(Error::dim(format!(
            "{} report entries and {} prepared weights for {} layers",
            report.layers.len(),
            prepared.len(),
            model.depth()
        )));
    }
    if cfg.layer.act == ActQuantKind::Static && rotated_chan_max.is_none() {
        return Err(Error::config("static activation quantizer needs calibration statistics"));
    }
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| -> Result<QuantizedLinear> {
            let c = cfg.layer_config(i, report.layers[i].class);
            let chan_max = rotated_chan_max.map(|m| m[i].as_slice());
            build_prepared(&prepared[i], &l.b, &c, chan_max).map_err(|e| numeric(i, e))
        })
        .collect::<Result<Vec<_>>>()?;
    QuantModel::new(layers)
}

/// Statistics pass, classification and build.
pub fn calibrate_model(
    model: &FpModel,
    dataset: &[ActBatch],
    cfg: &CalibConfig,
) -> Result<(QuantModel, SensitivityReport)> {
    cfg.validate()?;
    let stats = collect_stats(model, dataset, cfg)?;
    let report = classify(&variances(&stats.stats)?, cfg)?;
    let q = build_with_report(model, &report, cfg, Some(&stats.rotated_chan_max))?;
    Ok((q, report))
}
