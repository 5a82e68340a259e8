//! The seeded benchmark: one synthetic model plus calibration and evaluation
//! data per seed, and the arms each ablation axis compares.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{eval_model_error, ErrorMetrics};
use super::synth::{gen_dataset, gen_model, BiasDist, LongTailSpec, SyntheticModelSpec, WeightDist};
use crate::error::{Error, Result};
use crate::lowrank::PreparedWeight;
use crate::model::FpModel;
use crate::quantizers::{ActQuantKind, ActQuantizer};
use crate::rng::derive_seed;
use crate::tensor::{channel_abs_max, frob_norm, ActBatch};
use crate::volts::{
    ablation_scheme, build_prepared_model, classify, collect_stats, prepare_model, variances, CalibConfig,
    CalibStats, Scheme, SensitivityReport,
};

const MODEL_STREAM: u64 = 100;
const DATA_STREAM: u64 = 101;
/// Evaluation samples are drawn from this index on, disjoint from
/// calibration samples.
const EVAL_OFFSET: u64 = 1 << 32;

/// Model architecture without a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub depth: usize,
    pub dims: Vec<usize>,
    pub weight_dist: WeightDist,
    pub bias_dist: BiasDist,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            depth: 4,
            dims: vec![256, 512, 512, 512, 256],
            weight_dist: WeightDist::Gaussian { sigma: 0.5 },
            bias_dist: BiasDist::Zero,
        }
    }
}

impl ModelShape {
    pub fn spec(&self, seed: u64) -> SyntheticModelSpec {
        SyntheticModelSpec {
            seed,
            depth: self.depth,
            dims: self.dims.clone(),
            weight_dist: self.weight_dist,
            bias_dist: self.bias_dist,
        }
    }
}

/// Input data of the benchmark, without a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub batch: usize,
    pub tokens: usize,
    pub base_scale: f64,
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    pub depth_drift: f64,
    pub eval_samples: usize,
    /// Evaluation inputs of the activation-scaling axis are multiplied by
    /// this, so they exceed the ranges seen during calibration.
    pub eval_range_scale: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            batch: 1,
            tokens: 32,
            base_scale: 0.08,
            outlier_channels: 8,
            outlier_gain: 100.0,
            depth_drift: 0.75,
            eval_samples: 4,
            eval_range_scale: 2.0,
        }
    }
}

impl DataSpec {
    pub fn longtail(&self, seed: u64, channels: usize) -> LongTailSpec {
        LongTailSpec {
            seed,
            batch: self.batch,
            tokens: self.tokens,
            channels,
            base_scale: self.base_scale,
            outlier_channels: self.outlier_channels,
            outlier_gain: self.outlier_gain,
            depth_drift: self.depth_drift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_samples == 0 {
            return Err(Error::config("need at least one evaluation sample"));
        }
        if !(self.eval_range_scale.is_finite() && self.eval_range_scale > 0.0) {
            return Err(Error::config("evaluation range scale must be positive"));
        }
        Ok(())
    }
}

/// Everything one benchmark seed needs.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub model: FpModel,
    pub calib: Vec<ActBatch>,
    pub eval: Vec<ActBatch>,
}

pub fn instance(shape: &ModelShape, data: &DataSpec, num_samples: usize, seed: u64) -> Result<Instance> {
    data.validate()?;
    let model = gen_model(&shape.spec(derive_seed(seed, MODEL_STREAM, 0)))?;
    if model.is_empty() {
        return Err(Error::config("benchmark model has no layers"));
    }
    let lt = data.longtail(derive_seed(seed, DATA_STREAM, 0), shape.dims[0]);
    Ok(Instance {
        seed,
        calib: gen_dataset(&lt, 0, num_samples)?,
        eval: gen_dataset(&lt, EVAL_OFFSET, data.eval_samples)?,
        model,
    })
}

/// Relative reconstruction errors of activation quantizers on the raw input
/// of the first layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationErrors {
    pub seed: u64,
    pub draq: f64,
    pub minmax: f64,
    /// DRAQ on inputs scaled past the calibration range.
    pub draq_wide: f64,
    /// Static per-channel ranges from calibration on the same scaled inputs.
    pub static_wide: f64,
}

pub fn activation_errors(inst: &Instance, bits: u32, range_scale: f64) -> Result<ActivationErrors> {
    let calib = crate::tensor::Matrix::vstack(&inst.calib.iter().map(ActBatch::to_matrix).collect::<Vec<_>>())?;
    let chan_max = channel_abs_max(&calib)?;
    let x = inst.eval[0].to_matrix();
    let wide = x.scale(range_scale);
    let rel = |q: &ActQuantizer, x: &crate::tensor::Matrix| -> Result<f64> {
        Ok(frob_norm(&q.apply(x)?.sub(x)?) / frob_norm(x))
    };
    let draq = ActQuantizer::new(ActQuantKind::Draq, bits, None)?;
    Ok(ActivationErrors {
        seed: inst.seed,
        draq: rel(&draq, &x)?,
        minmax: rel(&ActQuantizer::new(ActQuantKind::Minmax, bits, None)?, &x)?,
        draq_wide: rel(&draq, &wide)?,
        static_wide: rel(&ActQuantizer::new(ActQuantKind::Static, bits, Some(&chan_max))?, &wide)?,
    })
}

/// The ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    ActivationScaling,
    Qao,
    SensitivityScheme,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::ActivationScaling, Axis::Qao, Axis::SensitivityScheme];

    pub fn name(self) -> &'static str {
        match self {
            Axis::ActivationScaling => "activation-scaling",
            Axis::Qao => "qao",
            Axis::SensitivityScheme => "sensitivity-scheme",
        }
    }

    pub fn parse(name: &str) -> Result<Axis> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::config(format!("unknown ablation axis {name:?}")))
    }

    pub fn arms(self) -> Vec<Arm> {
        let base = Arm {
            name: String::new(),
            act: None,
            scheme: Scheme::ThreeTier,
            bits: None,
            wide_eval: false,
        };
        let named = |name: &str| Arm {
            name: name.into(),
            ..base.clone()
        };
        match self {
            Axis::ActivationScaling => vec![
                Arm {
                    act: Some(ActQuantKind::PerToken),
                    wide_eval: true,
                    ..named("No scaling")
                },
                Arm {
                    act: Some(ActQuantKind::Static),
                    wide_eval: true,
                    ..named("Calibrated Scaling")
                },
                Arm {
                    act: Some(ActQuantKind::Draq),
                    wide_eval: true,
                    ..named("DRAQ")
                },
            ],
            Axis::Qao => vec![
                Arm {
                    scheme: Scheme::UniformFrozen,
                    ..named("No QAO")
                },
                named("With QAO"),
            ],
            Axis::SensitivityScheme => Scheme::ALL
                .into_iter()
                .map(|s| Arm {
                    scheme: s,
                    ..named(s.name())
                })
                .collect(),
        }
    }
}

/// One configuration compared in an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    /// Overrides the configured activation quantizer.
    pub act: Option<ActQuantKind>,
    pub scheme: Scheme,
    /// Overrides the configured `(bits_w, bits_a)`.
    pub bits: Option<(u32, u32)>,
    /// Evaluate on inputs scaled by the configured range scale.
    pub wide_eval: bool,
}

impl Arm {
    /// Initialization-only arms at the given bit-widths.
    pub fn bit_width(bits_w: u32, bits_a: u32, scheme: Scheme) -> Arm {
        Arm {
            name: format!("W{bits_w}A{bits_a}"),
            act: None,
            scheme,
            bits: Some((bits_w, bits_a)),
            wide_eval: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub metrics: ErrorMetrics,
    pub total_rounds: usize,
}

/// Calibration state of one instance, shared by all arms.
pub struct SeedContext<'a> {
    pub inst: &'a Instance,
    pub cfg: CalibConfig,
    pub stats: CalibStats,
    pub report: SensitivityReport,
    pub prepared: Vec<PreparedWeight>,
}

impl<'a> SeedContext<'a> {
    pub fn new(inst: &'a Instance, cfg: &CalibConfig) -> Result<Self> {
        cfg.validate()?;
        let stats = collect_stats(&inst.model, &inst.calib, cfg)?;
        let report = classify(&variances(&stats.stats)?, cfg)?;
        let prepared = prepare_model(&inst.model, cfg)?;
        Ok(SeedContext {
            inst,
            cfg: cfg.clone(),
            stats,
            report,
            prepared,
        })
    }

    pub fn run(&self, arm: &Arm, range_scale: f64) -> Result<ArmResult> {
        let mut cfg = self.cfg.clone();
        if let Some(act) = arm.act {
            cfg.layer.act = act;
        }
        if let Some((bw, ba)) = arm.bits {
            cfg.layer.bits_w = bw;
            cfg.layer.bits_a = ba;
        }
        let report = ablation_scheme(&self.report, arm.scheme, &cfg.budgets);
        let q = build_prepared_model(
            &self.inst.model,
            &self.prepared,
            &report,
            &cfg,
            Some(&self.stats.rotated_chan_max),
        )?;
        let metrics = if arm.wide_eval {
            let wide: Vec<ActBatch> = self.inst.eval.iter().map(|x| x.scale(range_scale)).collect();
            eval_model_error(&self.inst.model, &q, &wide)?
        } else {
            eval_model_error(&self.inst.model, &q, &self.inst.eval)?
        };
        Ok(ArmResult {
            arm: arm.name.clone(),
            seed: self.inst.seed,
            metrics,
            total_rounds: q.total_qao_rounds(),
        })
    }
}

/// Per-arm aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub mean_rel_frob: f64,
    pub mean_sqnr_db: f64,
    pub total_rounds: usize,
    /// Seeds on which this arm had the lowest error.
    pub wins: usize,
    pub winner: bool,
}

/// Summaries in the order arms first appear in `results`.
pub fn summarize(results: &[ArmResult]) -> Vec<ArmSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut by_arm: BTreeMap<String, Vec<&ArmResult>> = BTreeMap::new();
    let mut by_seed: BTreeMap<u64, Vec<&ArmResult>> = BTreeMap::new();
    for r in results {
        if !by_arm.contains_key(&r.arm) {
            order.push(r.arm.clone());
        }
        by_arm.entry(r.arm.clone()).or_default().push(r);
        by_seed.entry(r.seed).or_default().push(r);
    }
    let mut wins: BTreeMap<&str, usize> = BTreeMap::new();
    for rs in by_seed.values() {
        if let Some(best) = rs.iter().min_by(|a, b| a.metrics.rel_frob.total_cmp(&b.metrics.rel_frob)) {
            *wins.entry(best.arm.as_str()).or_default() += 1;
        }
    }
    let mut out: Vec<ArmSummary> = order
        .iter()
        .map(|arm| {
            let rs = &by_arm[arm];
            let n = rs.len() as f64;
            ArmSummary {
                arm: arm.clone(),
                seeds: rs.len(),
                mean_rel_frob: rs.iter().map(|r| r.metrics.rel_frob).sum::<f64>() / n,
                mean_sqnr_db: rs.iter().map(|r| r.metrics.sqnr_db).sum::<f64>() / n,
                total_rounds: rs.iter().map(|r| r.total_rounds).sum(),
                wins: wins.get(arm.as_str()).copied().unwrap_or(0),
                winner: false,
            }
        })
        .collect();
    if let Some(best) = out
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_rel_frob.total_cmp(&b.1.mean_rel_frob))
        .map(|(i, _)| i)
    {
        out[best].winner = true;
    }
    out
}

pub fn render_summary(rows: &[ArmSummary]) -> String {
    let mut out = format!(
        "{:<20} {:>6} {:>14} {:>10} {:>8} {:>6} {:>7}\n",
        "arm", "seeds", "rel_frob", "sqnr_db", "rounds", "wins", "winner"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>14.6e} {:>10.3} {:>8} {:>6} {:>7}",
            r.arm,
            r.seeds,
            r.mean_rel_frob,
            r.mean_sqnr_db,
            r.total_rounds,
            r.wins,
            if r.winner { "*" } else { "" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::LayerBuildConfig;
    use crate::volts::SensitivityClass;

    fn small_shape() -> ModelShape {
        ModelShape {
            depth: 2,
            dims: vec![32, 64, 16],
            ..ModelShape::default()
        }
    }

    fn small_cfg() -> CalibConfig {
        let mut cfg = CalibConfig::default();
        cfg.num_samples = 6;
        cfg.layer.rank = 4;
        cfg.budgets.light = 3;
        cfg.budgets.full_cap = 6;
        cfg
    }

    #[test]
    fn instances_are_deterministic() {
        let data = DataSpec::default();
        let a = instance(&small_shape(), &data, 3, 5).unwrap();
        let b = instance(&small_shape(), &data, 3, 5).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.calib, b.calib);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.calib.len(), 3);
        assert_eq!(a.eval.len(), data.eval_samples);
        assert_ne!(a.calib[0], a.eval[0]);
    }

    #[test]
    fn lossless_arm_matches_fp() {
        let inst = instance(&small_shape(), &DataSpec::default(), 4, 1).unwrap();
        let cfg = CalibConfig {
            layer: LayerBuildConfig::lossless(),
            ..small_cfg()
        };
        let ctx = SeedContext::new(&inst, &cfg).unwrap();
        let r = ctx.run(&Arm::bit_width(16, 16, Scheme::UniformFrozen), 2.0).unwrap();
        assert!(r.metrics.rel_frob < 1e-9, "{}", r.metrics.rel_frob);
    }

    #[test]
    fn axes_have_expected_arms() {
        let names = |a: Axis| a.arms().into_iter().map(|a| a.name).collect::<Vec<_>>();
        assert_eq!(names(Axis::Qao), vec!["No QAO", "With QAO"]);
        assert_eq!(names(Axis::ActivationScaling), vec!["No scaling", "Calibrated Scaling", "DRAQ"]);
        assert_eq!(names(Axis::SensitivityScheme).len(), 5);
        assert!(Axis::parse("nope").is_err());
    }

    #[test]
    fn arms_run_and_summarize() {
        let inst = instance(&small_shape(), &DataSpec::default(), 6, 2).unwrap();
        let ctx = SeedContext::new(&inst, &small_cfg()).unwrap();
        let results: Vec<ArmResult> = Axis::Qao.arms().iter().map(|a| ctx.run(a, 2.0).unwrap()).collect();
        assert_eq!(results[0].total_rounds, 2);
        let summary = summarize(&results);
        assert_eq!(summary.len(), 2);
        assert_eq!(summary.iter().filter(|s| s.winner).count(), 1);
        assert_eq!(summary.iter().map(|s| s.wins).sum::<usize>(), 1);
        assert_eq!(render_summary(&summary).lines().count(), 3);
        assert!(ctx.report.layers.iter().all(|l| l.class <= SensitivityClass::Full));
    }

    #[test]
    fn activation_errors_are_finite() {
        let inst = instance(&small_shape(), &DataSpec::default(), 4, 3).unwrap();
        let e = activation_errors(&inst, 4, 2.0).unwrap();
        for v in [e.draq, e.minmax, e.draq_wide, e.static_wide] {
            assert!(v.is_finite() && v > 0.0);
        }
    }
}
