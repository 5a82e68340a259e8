//! Effective parameter and operation counts.
//!
//! Quantized weights count `bits / 16` of a 16-bit parameter and quantized
//! matmuls `max(bits_w, bits_a) / 16` of a 16-bit multiply-accumulate pair.
//! Full-precision extras (bias, low-rank factors, the rotation) are counted
//! in full. Quantizer scales, zero points and the per-element rescaling they
//! imply are not counted, nor are bias additions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::lowrank::QuantizedLinear;
use crate::model::FpModel;
use crate::rotation::RotationKind;

/// What the counting model needs to know about one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub rotation: RotationKind,
    /// Whether the layer stores a (non-zero) bias.
    pub has_bias: bool,
}

impl LayerShape {
    pub fn of_quantized(layer: &QuantizedLinear) -> Self {
        LayerShape {
            in_dim: layer.in_dim(),
            out_dim: layer.out_dim(),
            rank: layer.rank(),
            rotation: layer.rotation().kind(),
            has_bias: layer.bias().iter().any(|b| *b != 0.0),
        }
    }

    /// Shapes of `model` as it would be built with `rank` and `rotation`.
    pub fn of_model(model: &FpModel, rank: usize, rotation: RotationKind) -> Vec<Self> {
        model
            .layers()
            .iter()
            .map(|l| LayerShape {
                in_dim: l.w.rows(),
                out_dim: l.w.cols(),
                rank: rank.min(l.w.rows().min(l.w.cols())),
                rotation,
                has_bias: l.b.iter().any(|b| *b != 0.0),
            })
            .collect()
    }

    /// The same layer with no low-rank branch and no rotation.
    pub fn baseline(&self) -> Self {
        LayerShape {
            rank: 0,
            rotation: RotationKind::Identity,
            ..*self
        }
    }
}

/// Effective parameter count, in millions.
pub fn effective_params(shapes: &[LayerShape], bits_w: u32) -> f64 {
    let mut total = 0.0;
    for s in shapes {
        let (m, n, r) = (s.in_dim as f64, s.out_dim as f64, s.rank as f64);
        total += m * n * f64::from(bits_w) / 16.0;
        total += r * (m + n);
        if s.has_bias {
            total += n;
        }
    }
    total / 1e6
}

/// Effective operation count for `tokens` input tokens, in billions.
pub fn effective_ops(shapes: &[LayerShape], tokens: usize, bits_w: u32, bits_a: u32) -> f64 {
    let t = tokens as f64;
    let bits = f64::from(bits_w.max(bits_a));
    let mut total = 0.0;
    for s in shapes {
        let (m, n, r) = (s.in_dim as f64, s.out_dim as f64, s.rank as f64);
        total += 2.0 * t * m * n * bits / 16.0;
        total += 2.0 * t * (m * r + r * n);
        if s.rotation != RotationKind::Identity {
            total += t * m * m.log2();
        }
    }
    total / 1e9
}

/// One row of the compression table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub config_name: String,
    pub bits_w: u32,
    pub bits_a: u32,
    pub eff_params_m: f64,
    pub eff_ops_g: f64,
    pub params_reduction_pct: f64,
    pub ops_reduction_pct: f64,
}

fn reduction(quant: f64, fp: f64) -> f64 {
    if fp == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - quant / fp)
    }
}

/// Rows for the 16-bit baseline followed by each `(bits_w, bits_a)` pair.
/// The baseline is the same layers without rank or rotation at 16 bits.
pub fn compression_table(shapes: &[LayerShape], tokens: usize, configs: &[(u32, u32)]) -> Vec<CompressionReport> {
    let base: Vec<LayerShape> = shapes.iter().map(LayerShape::baseline).collect();
    let fp_params = effective_params(&base, 16);
    let fp_ops = effective_ops(&base, tokens, 16, 16);
    let mut rows = vec![CompressionReport {
        config_name: "W16A16".into(),
        bits_w: 16,
        bits_a: 16,
        eff_params_m: fp_params,
        eff_ops_g: fp_ops,
        params_reduction_pct: 0.0,
        ops_reduction_pct: 0.0,
    }];
    for &(bw, ba) in configs {
        let p = effective_params(shapes, bw);
        let o = effective_ops(shapes, tokens, bw, ba);
        rows.push(CompressionReport {
            config_name: format!("W{bw}A{ba}"),
            bits_w: bw,
            bits_a: ba,
            eff_params_m: p,
            eff_ops_g: o,
            params_reduction_pct: reduction(p, fp_params),
            ops_reduction_pct: reduction(o, fp_ops),
        });
    }
    rows
}

/// Aligned plaintext table: config, Params / M (reduction), Ops / G (reduction).
pub fn render_table(rows: &[CompressionReport]) -> String {
    let mut out = format!("{:<8} {:>24} {:>24}\n", "Config", "Params / M (↓ Ratio)", "Ops / G (↓ Ratio)");
    for r in rows {
        let params = format!("{:.4} (↓{:.2}%)", r.eff_params_m, r.params_reduction_pct);
        let ops = format!("{:.4} (↓{:.2}%)", r.eff_ops_g, r.ops_reduction_pct);
        let _ = writeln!(out, "{:<8} {:>24} {:>24}", r.config_name, params, ops);
    }
    out
}
