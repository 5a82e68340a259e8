//! The two-branch quantized linear layer.
//!
//! `y = x_hat L1 L2 + Q_A(x_hat) deq(W_R) + b` with `x_hat = x Q`. Both
//! branches see the rotated input and the factors approximate the rotated
//! weight `Q^T W`, so without quantization the layer computes `x W + b`.

use serde::{Deserialize, Serialize};

use super::qao::{qao_from_init, Pairing, QaoInit, QaoOptions, StopRule};
use super::svd::{LowRank, SubspaceOptions};
use crate::error::{Error, Result};
use crate::quantizers::{check_bits, dequantize, ActQuantKind, ActQuantizer, QuantizedTensor};
use crate::rotation::{RotationDescriptor, RotationKind};
use crate::tensor::{matmul, Matrix};

/// Residual weights and activations at this width are kept in full precision.
pub const LOSSLESS_BITS: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBuildConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub rank: usize,
    pub rotation: RotationKind,
    pub act: ActQuantKind,
    pub stop: StopRule,
    #[serde(default)]
    pub pairing: Pairing,
    /// Seed of the sign diagonal for randomized rotations.
    #[serde(default)]
    pub sign_seed: u64,
}

impl LayerBuildConfig {
    /// 16-bit weights, full-precision activations, no rank, no rotation.
    pub fn lossless() -> Self {
        LayerBuildConfig {
            bits_w: LOSSLESS_BITS,
            bits_a: LOSSLESS_BITS,
            rank: 0,
            rotation: RotationKind::Identity,
            act: ActQuantKind::None,
            stop: StopRule::fixed(1),
            pairing: Pairing::Consistent,
            sign_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits_w)?;
        if self.act != ActQuantKind::None {
            check_bits(self.bits_a)?;
        }
        match self.stop {
            StopRule::Fixed { rounds: 0 } => Err(Error::config("qao needs at least one round")),
            StopRule::Converge { cap: 0, .. } => Err(Error::config("qao round cap must be at least 1")),
            _ => Ok(()),
        }
    }
}

/// The residual branch weight.
#[derive(Clone, Debug, PartialEq)]
pub enum ResidualWeight {
    Quantized(QuantizedTensor),
    Full(Matrix),
}

impl ResidualWeight {
    pub fn dequantized(&self) -> Matrix {
        match self {
            ResidualWeight::Quantized(q) => dequantize(q),
            ResidualWeight::Full(m) => m.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            ResidualWeight::Quantized(q) => q.shape(),
            ResidualWeight::Full(m) => m.shape(),
        }
    }

    /// Bit-width the weights are stored at.
    pub fn bits(&self) -> u32 {
        match self {
            ResidualWeight::Quantized(q) => q.params().bits(),
            ResidualWeight::Full(_) => LOSSLESS_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    rotation: RotationDescriptor,
    factors: LowRank,
    residual: ResidualWeight,
    bias: Vec<f64>,
    act: ActQuantizer,
    deq: Matrix,
    qao_trace: Vec<f64>,
}

impl QuantizedLinear {
    pub fn new(
        rotation: RotationDescriptor,
        factors: LowRank,
        residual: ResidualWeight,
        bias: Vec<f64>,
        act: ActQuantizer,
        qao_trace: Vec<f64>,
    ) -> Result<Self> {
        let (in_dim, out_dim) = residual.shape();
        if rotation.dim() != in_dim
            || factors.l1.shape() != (in_dim, factors.rank())
            || factors.l2.shape() != (factors.rank(), out_dim)
            || bias.len() != out_dim
        {
            return Err(Error::dim(format!(
                "inconsistent layer parts: rotation {}, residual {:?}, l1 {:?}, l2 {:?}, bias {}",
                rotation.dim(),
                residual.shape(),
                factors.l1.shape(),
                factors.l2.shape(),
                bias.len()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite {
                index: bias.iter().position(|b| !b.is_finite()).unwrap_or(0),
            });
        }
        if let ActQuantizer::Static { chan_max, .. } = &act {
            if chan_max.len() != in_dim {
                return Err(Error::dim(format!(
                    "static quantizer has {} channels, layer input has {in_dim}",
                    chan_max.len()
                )));
            }
        }
        let deq = residual.dequantized();
        Ok(QuantizedLinear {
            rotation,
            factors,
            residual,
            bias,
            act,
            deq,
            qao_trace,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.deq.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.deq.cols()
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    pub fn rotation(&self) -> &RotationDescriptor {
        &self.rotation
    }

    pub fn factors(&self) -> &LowRank {
        &self.factors
    }

    pub fn residual(&self) -> &ResidualWeight {
        &self.residual
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn act(&self) -> &ActQuantizer {
        &self.act
    }

    /// Residual errors of the optimizer rounds that built this layer.
    pub fn qao_trace(&self) -> &[f64] {
        &self.qao_trace
    }

    /// Number of optimizer rounds that built this layer.
    pub fn qao_rounds(&self) -> usize {
        self.qao_trace.len()
    }

    /// Effective weight in the original basis, `Q (L1 L2 + deq(W_R))`.
    pub fn effective_weight(&self) -> Result<Matrix> {
        let mut w = self.deq.clone();
        if self.rank() > 0 {
            w = w.add(&self.factors.product())?;
        }
        crate::rotation::fwht(&w, &self.rotation, crate::rotation::Side::Left)
    }

    /// `x` is `tokens x in_dim`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "layer expects {} input channels, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let x_hat = self.rotation.rotate_input(x)?;
        let mut y = matmul(&self.act.apply(&x_hat)?, &self.deq)?;
        if self.rank() > 0 {
            let low = matmul(&matmul(&x_hat, &self.factors.l1)?, &self.factors.l2)?;
            y = y.add(&low)?;
        }
        y.add_row_vector(&self.bias)
    }
}

/// Builds a layer from `w` (`in x out`) and `bias`. A static activation
/// quantizer needs [`build_layer_calibrated`].
pub fn build_layer(w: &Matrix, bias: &[f64], config: &LayerBuildConfig) -> Result<QuantizedLinear> {
    build_layer_calibrated(w, bias, config, None)
}

/// Like [`build_layer`]; `chan_max` holds per-channel maxima of the rotated
/// calibration inputs and is used by the static activation quantizer.
pub fn build_layer_calibrated(
    w: &Matrix,
    bias: &[f64],
    config: &LayerBuildConfig,
    chan_max: Option<&[f64]>,
) -> Result<QuantizedLinear> {
    config.validate()?;
    let prepared = PreparedWeight::new(w, config.rotation, config.sign_seed, config.rank)?;
    build_prepared(&prepared, bias, config, chan_max)
}

/// A rotated weight with its SVD initialization, reusable across builds that
/// differ only in bit-widths, activation quantizer or optimizer budget.
#[derive(Clone, Debug)]
pub struct PreparedWeight {
    rotation: RotationDescriptor,
    w_hat: Matrix,
    init: QaoInit,
}

impl PreparedWeight {
    pub fn new(w: &Matrix, rotation: RotationKind, sign_seed: u64, rank: usize) -> Result<Self> {
        let rotation = RotationDescriptor::new(w.rows(), rotation, sign_seed)?;
        let w_hat = rotation.rotate_weight(w)?;
        let init = QaoInit::new(&w_hat, rank, SubspaceOptions::default())?;
        Ok(PreparedWeight { rotation, w_hat, init })
    }

    pub fn rotation(&self) -> &RotationDescriptor {
        &self.rotation
    }

    pub fn rank(&self) -> usize {
        self.init.factors().rank()
    }
}

/// Builds a layer from a prepared weight. `config` must agree with the
/// rotation and rank the weight was prepared with.
pub fn build_prepared(
    prepared: &PreparedWeight,
    bias: &[f64],
    config: &LayerBuildConfig,
    chan_max: Option<&[f64]>,
) -> Result<QuantizedLinear> {
    config.validate()?;
    let rotation = &prepared.rotation;
    if rotation.kind() != config.rotation || rotation.sign_seed() != config.sign_seed || prepared.rank() != config.rank {
        return Err(Error::config("layer config does not match the prepared weight"));
    }
    let out_dim = prepared.w_hat.cols();
    if bias.len() != out_dim {
        return Err(Error::dim(format!("bias has {} entries for {out_dim} outputs", bias.len())));
    }
    let mut opts = QaoOptions::new(config.rank, config.bits_w, config.stop);
    opts.pairing = config.pairing;
    let res = qao_from_init(&prepared.w_hat, prepared.init.clone(), &opts)?;
    let residual = if config.bits_w >= LOSSLESS_BITS {
        ResidualWeight::Full(prepared.w_hat.sub(&res.factors.product())?)
    } else {
        ResidualWeight::Quantized(res.w_r)
    };
    let act = if config.bits_a >= LOSSLESS_BITS {
        ActQuantizer::new(ActQuantKind::None, config.bits_a, None)?
    } else {
        ActQuantizer::new(config.act, config.bits_a, chan_max)?
    };
    QuantizedLinear::new(rotation.clone(), res.factors, residual, bias.to_vec(), act, res.err_trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::{fit_qparams, quantize, ste_grad, Granularity};
    use crate::rng::Rng;
    use crate::tensor::frob_norm;

    fn random(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| scale * rng.gaussian()).unwrap()
    }

    fn fp_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
        matmul(x, w).unwrap().add_row_vector(b).unwrap()
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        frob_norm(&a.sub(b).unwrap()) / frob_norm(b)
    }

    fn config(bits: u32, rank: usize, rotation: RotationKind, act: ActQuantKind) -> LayerBuildConfig {
        LayerBuildConfig {
            bits_w: bits,
            bits_a: bits,
            rank,
            rotation,
            act,
            stop: StopRule::fixed(1),
            pairing: Pairing::Consistent,
            sign_seed: 3,
        }
    }

    #[test]
    fn lossless_matches_fp() {
        let w = random(32, 16, 1, 0.2);
        let b: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let x = random(10, 32, 2, 1.0);
        let layer = build_layer(&w, &b, &LayerBuildConfig::lossless()).unwrap();
        assert!(rel(&layer.forward(&x).unwrap(), &fp_forward(&x, &w, &b)) < 1e-9);
    }

    #[test]
    fn lossless_any_rank_and_rotation_matches_fp() {
        let w = random(64, 32, 3, 0.2);
        let b = vec![0.5; 32];
        let x = random(12, 64, 4, 1.0);
        for kind in [RotationKind::Identity, RotationKind::WalshHadamard, RotationKind::RandomizedHadamard] {
            for rank in [0, 4, 32] {
                let layer = build_layer(&w, &b, &config(16, rank, kind, ActQuantKind::None)).unwrap();
                assert_eq!(layer.rank(), rank);
                assert!(rel(&layer.forward(&x).unwrap(), &fp_forward(&x, &w, &b)) < 1e-6);
            }
        }
    }

    #[test]
    fn rank_zero_has_empty_factors() {
        let layer = build_layer(&random(8, 4, 1, 1.0), &[0.0; 4], &config(4, 0, RotationKind::Identity, ActQuantKind::None)).unwrap();
        assert_eq!(layer.factors().l1.shape(), (8, 0));
        assert_eq!(layer.factors().l2.shape(), (0, 4));
    }

    #[test]
    fn zero_input_gives_bias() {
        let b: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let layer = build_layer(&random(16, 8, 5, 1.0), &b, &config(4, 4, RotationKind::WalshHadamard, ActQuantKind::Draq)).unwrap();
        let y = layer.forward(&Matrix::zeros(3, 16)).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &b[..]);
        }
    }

    #[test]
    fn shape_errors() {
        let w = random(8, 4, 1, 1.0);
        assert!(build_layer(&w, &[0.0; 3], &LayerBuildConfig::lossless()).is_err());
        assert!(build_layer(&random(6, 4, 1, 1.0), &[0.0; 4], &config(4, 0, RotationKind::WalshHadamard, ActQuantKind::None)).is_err());
        let layer = build_layer(&w, &[0.0; 4], &LayerBuildConfig::lossless()).unwrap();
        assert!(layer.forward(&Matrix::zeros(2, 7)).is_err());
        let mut bad = LayerBuildConfig::lossless();
        bad.bits_w = 1;
        assert!(build_layer(&w, &[0.0; 4], &bad).is_err());
        assert!(build_layer(&w, &[0.0; 4], &config(4, 0, RotationKind::Identity, ActQuantKind::Static)).is_err());
    }

    #[test]
    fn scalar_layer() {
        let (a, b) = (1.7, -0.3);
        let layer = build_layer(&Matrix::new(1, 1, vec![a]).unwrap(), &[b], &config(4, 0, RotationKind::Identity, ActQuantKind::None)).unwrap();
        let step = match layer.residual() {
            ResidualWeight::Quantized(q) => q.params().scale()[0],
            ResidualWeight::Full(_) => unreachable!(),
        };
        for x in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            let y = layer.forward(&Matrix::new(1, 1, vec![x]).unwrap()).unwrap().get(0, 0);
            assert!((y - (a * x + b)).abs() <= step * x.abs() + 1e-12, "x = {x}");
        }
    }

    #[test]
    fn full_pipeline_beats_weak_baseline() {
        // One outlier channel in the inputs.
        let w = random(256, 32, 7, 1.0 / 16.0);
        let b = vec![0.0; 32];
        let mut x = random(32, 256, 8, 1.0);
        for r in 0..32 {
            x = x.with_entry(r, 17, x.get(r, 17) * 100.0).unwrap();
        }
        let fp = fp_forward(&x, &w, &b);
        let strong = build_layer(&w, &b, &config(4, 32, RotationKind::WalshHadamard, ActQuantKind::Draq)).unwrap();
        let weak = build_layer(&w, &b, &config(4, 0, RotationKind::Identity, ActQuantKind::Minmax)).unwrap();
        let e_strong = rel(&strong.forward(&x).unwrap(), &fp);
        let e_weak = rel(&weak.forward(&x).unwrap(), &fp);
        assert!(e_strong < e_weak, "{e_strong} vs {e_weak}");
    }

    #[test]
    fn effective_weight_reconstructs_lossless() {
        let w = random(16, 8, 9, 1.0);
        let layer = build_layer(&w, &[0.0; 8], &config(16, 3, RotationKind::RandomizedHadamard, ActQuantKind::None)).unwrap();
        assert!(layer.effective_weight().unwrap().max_abs_diff(&w).unwrap() < 1e-12);
    }

    #[test]
    fn prepared_weight_is_shared_across_bit_widths() {
        let w = random(32, 16, 11, 0.3);
        let b = vec![0.0; 16];
        let prepared = PreparedWeight::new(&w, RotationKind::WalshHadamard, 3, 4).unwrap();
        for bits in [4, 6, 8] {
            let c = config(bits, 4, RotationKind::WalshHadamard, ActQuantKind::Draq);
            assert_eq!(build_prepared(&prepared, &b, &c, None).unwrap(), build_layer(&w, &b, &c).unwrap());
        }
        let other = config(4, 2, RotationKind::WalshHadamard, ActQuantKind::Draq);
        assert!(build_prepared(&prepared, &b, &other, None).is_err());
    }

    #[test]
    fn finite_difference_matches_ste() {
        // Sensitivity of the output to one residual entry, with the
        // quantization parameters held fixed.
        let mut rng = Rng::new(21);
        let r = Matrix::from_fn(8, 4, |_, _| rng.gaussian()).unwrap();
        let p = fit_qparams(&r, 4, false, Granularity::PerChannel).unwrap();
        let x = Matrix::from_fn(1, 8, |_, c| 0.5 + c as f64).unwrap();
        let out = |m: &Matrix| matmul(&x, &dequantize(&quantize(m, &p).unwrap())).unwrap();
        let (mut interior, mut clipped) = (0, 0);
        for i in 0..8 {
            for j in 0..4 {
                let s = p.scale()[j];
                let h = s / 2.0;
                let (lo, hi) = p.representable_range(j);
                for w in [r.get(i, j), hi + 5.0 * s, lo - 5.0 * s] {
                    let plus = out(&r.with_entry(i, j, w + h).unwrap()).get(0, j);
                    let minus = out(&r.with_entry(i, j, w - h).unwrap()).get(0, j);
                    let fd = (plus - minus) / (2.0 * h);
                    let predicted = ste_grad(w, lo, hi) * x.get(0, i);
                    if w - h >= lo && w + h <= hi {
                        interior += 1;
                        assert!((fd - predicted).abs() <= 0.1 * predicted.abs(), "({i},{j}) fd {fd} ste {predicted}");
                    } else if w - h > hi || w + h < lo {
                        clipped += 1;
                        assert!(fd.abs() < 1e-12);
                        assert_eq!(predicted, 0.0);
                    }
                }
            }
        }
        assert!(interior > 10 && clipped == 64, "{interior} {clipped}");
    }

    #[test]
    fn sixteen_bit_activations_pass_through() {
        let w = random(16, 8, 31, 0.4);
        let b = vec![0.1; 8];
        let x = random(5, 16, 32, 2.0);
        let cfg = LayerBuildConfig {
            act: ActQuantKind::Draq,
            ..LayerBuildConfig::lossless()
        };
        let layer = build_layer(&w, &b, &cfg).unwrap();
        assert_eq!(layer.act().kind(), ActQuantKind::None);
        assert!(rel(&layer.forward(&x).unwrap(), &fp_forward(&x, &w, &b)) < 1e-12);
    }
}
