//! Uniform affine quantization, pre-scaling, the dynamic-range adaptive
//! activation quantizer and the straight-through gradient.
//!
//! Integer convention: `q = clamp(round(x / s) + zp, lo, hi)` and
//! `x_hat = s * (q - zp)`. Symmetric quantizers use `zp = 0` and the signed
//! range `[-2^(n-1), 2^(n-1) - 1]`; asymmetric ones use the unsigned range
//! `[0, 2^n - 1]` with a non-negative zero point. Rounding is half away from
//! zero (`f64::round`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{channel_abs_max, Matrix};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Which axis shares one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    /// One scale per column.
    PerChannel,
    /// One scale per row.
    PerToken,
}

impl Granularity {
    fn groups(self, rows: usize, cols: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => cols,
            Granularity::PerToken => rows,
        }
    }

    #[inline]
    fn group_of(self, r: usize, c: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => c,
            Granularity::PerToken => r,
        }
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!("bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]")))
    }
}

/// Integer clip range for a bit-width and signedness.
pub fn clip_range(bits: u32, symmetric: bool) -> (i64, i64) {
    if symmetric {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// Largest positive level of a signed `bits`-bit code, `2^(n-1) - 1`.
pub fn signed_qmax(bits: u32) -> f64 {
    ((1i64 << (bits - 1)) - 1) as f64
}

#[derive(Deserialize)]
struct RawQuantParams {
    bits: u32,
    symmetric: bool,
    granularity: Granularity,
    scale: Vec<f64>,
    zero_point: Vec<i64>,
}

/// Scale, zero point and clip range of one quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuantParams")]
pub struct QuantParams {
    bits: u32,
    symmetric: bool,
    granularity: Granularity,
    scale: Vec<f64>,
    zero_point: Vec<i64>,
}

impl TryFrom<RawQuantParams> for QuantParams {
    type Error = Error;

    fn try_from(raw: RawQuantParams) -> Result<Self> {
        QuantParams::new(raw.bits, raw.symmetric, raw.granularity, raw.scale, raw.zero_point)
    }
}

impl QuantParams {
    pub fn new(
        bits: u32,
        symmetric: bool,
        granularity: Granularity,
        scale: Vec<f64>,
        zero_point: Vec<i64>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if scale.is_empty() || scale.len() != zero_point.len() {
            return Err(Error::config(format!(
                "{} scales with {} zero points",
                scale.len(),
                zero_point.len()
            )));
        }
        if granularity == Granularity::PerTensor && scale.len() != 1 {
            return Err(Error::config("per-tensor params need exactly one scale"));
        }
        if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config(format!("scale {s} is not strictly positive")));
        }
        let (lo, hi) = clip_range(bits, symmetric);
        if symmetric && zero_point.iter().any(|&z| z != 0) {
            return Err(Error::config("symmetric params need zero points of 0"));
        }
        if zero_point.iter().any(|&z| z < lo || z > hi) {
            return Err(Error::config(format!("zero point outside [{lo}, {hi}]")));
        }
        Ok(QuantParams {
            bits,
            symmetric,
            granularity,
            scale,
            zero_point,
        })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn zero_point(&self) -> &[i64] {
        &self.zero_point
    }

    pub fn clip_lo(&self) -> i64 {
        clip_range(self.bits, self.symmetric).0
    }

    pub fn clip_hi(&self) -> i64 {
        clip_range(self.bits, self.symmetric).1
    }

    /// Real-valued interval `[s*(lo - zp), s*(hi - zp)]` that a group can
    /// represent without clipping.
    pub fn representable_range(&self, group: usize) -> (f64, f64) {
        let s = self.scale[group];
        let z = self.zero_point[group] as f64;
        (s * (self.clip_lo() as f64 - z), s * (self.clip_hi() as f64 - z))
    }

    fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        let groups = self.granularity.groups(rows, cols);
        if groups != self.scale.len() {
            return Err(Error::dim(format!(
                "{:?} params with {} scales applied to {rows}x{cols}",
                self.granularity,
                self.scale.len()
            )));
        }
        Ok(())
    }
}

/// Min-max fit of quantization parameters per group.
///
/// Symmetric: `s = max|x| / (2^(n-1) - 1)`. Asymmetric:
/// `s = (max - min) / (2^n - 1)`, `zp = clamp(round(-min / s), lo, hi)`.
/// Zero-range groups fall back to `s = 1, zp = 0`.
pub fn fit_qparams(x: &Matrix, bits: u32, symmetric: bool, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::dim("cannot fit quantization params on an empty tensor"));
    }
    let groups = granularity.groups(x.rows(), x.cols());
    let mut mins = vec![f64::INFINITY; groups];
    let mut maxs = vec![f64::NEG_INFINITY; groups];
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            let g = granularity.group_of(r, c);
            mins[g] = mins[g].min(v);
            maxs[g] = maxs[g].max(v);
        }
    }
    let (lo, hi) = clip_range(bits, symmetric);
    let mut scale = Vec::with_capacity(groups);
    let mut zero_point = Vec::with_capacity(groups);
    for (&mn, &mx) in mins.iter().zip(&maxs) {
        if symmetric {
            let amax = mn.abs().max(mx.abs());
            scale.push(if amax > 0.0 { amax / signed_qmax(bits) } else { 1.0 });
            zero_point.push(0);
        } else if mx > mn {
            let s = (mx - mn) / hi as f64;
            scale.push(s);
            zero_point.push(((-mn / s).round() as i64).clamp(lo, hi));
        } else {
            scale.push(1.0);
            zero_point.push(0);
        }
    }
    QuantParams::new(bits, symmetric, granularity, scale, zero_point)
}

/// Integer codes together with the parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    ints: Matrix,
    params: QuantParams,
}

impl QuantizedTensor {
    /// Wraps existing codes, checking that every entry is an integer in the
    /// clip range.
    pub fn from_parts(ints: Matrix, params: QuantParams) -> Result<Self> {
        params.check_shape(ints.rows(), ints.cols())?;
        let (lo, hi) = (params.clip_lo() as f64, params.clip_hi() as f64);
        if let Some(v) = ints.as_slice().iter().find(|v| v.fract() != 0.0 || **v < lo || **v > hi) {
            return Err(Error::Format(format!("code {v} is not an integer in [{lo}, {hi}]")));
        }
        Ok(QuantizedTensor { ints, params })
    }

    pub fn ints(&self) -> &Matrix {
        &self.ints
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ints.shape()
    }
}

/// `clamp(round(x / s) + zp, lo, hi)` elementwise.
pub fn quantize(x: &Matrix, p: &QuantParams) -> Result<QuantizedTensor> {
    p.check_shape(x.rows(), x.cols())?;
    let (lo, hi) = (p.clip_lo() as f64, p.clip_hi() as f64);
    let mut ints = x.clone();
    let cols = x.cols();
    for (i, v) in ints.data_mut().iter_mut().enumerate() {
        let g = p.granularity.group_of(i / cols, i % cols);
        *v = ((*v / p.scale[g]).round() + p.zero_point[g] as f64).clamp(lo, hi);
    }
    Ok(QuantizedTensor { ints, params: p.clone() })
}

/// `s * (q - zp)` elementwise.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let p = &q.params;
    let cols = q.ints.cols();
    let mut out = q.ints.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = p.granularity.group_of(i / cols, i % cols);
        *v = p.scale[g] * (*v - p.zero_point[g] as f64);
    }
    out
}

/// Quantize then dequantize.
pub fn fake_quantize(x: &Matrix, p: &QuantParams) -> Result<Matrix> {
    Ok(dequantize(&quantize(x, p)?))
}

/// Migration strength used when none is given.
pub const DEFAULT_SMOOTH_ALPHA: f64 = 0.5;

/// Per-channel migration scale `s_i = x_max_i^alpha / w_max_i^(1 - alpha)`.
///
/// Channels where either maximum is zero pass through with `s_i = 1`.
pub fn smooth_scale(x_max: &[f64], w_max: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if x_max.len() != w_max.len() {
        return Err(Error::dim(format!("{} activation maxima vs {} weight maxima", x_max.len(), w_max.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    if x_max.iter().chain(w_max).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::config("channel maxima must be finite and non-negative"));
    }
    Ok(x_max
        .iter()
        .zip(w_max)
        .map(|(&xm, &wm)| {
            if xm == 0.0 || wm == 0.0 {
                1.0
            } else {
                xm.powf(alpha) / wm.powf(1.0 - alpha)
            }
        })
        .collect())
}

/// Applies a migration scale: returns `(X diag(s)^-1, diag(s) W)` for
/// activations `X` (tokens x C) and weights `W` (C x out).
pub fn apply_smoothing(x: &Matrix, w: &Matrix, s: &[f64]) -> Result<(Matrix, Matrix)> {
    let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    Ok((x.scale_columns(&inv)?, w.scale_rows(s)?))
}

/// Output of the dynamic-range adaptive quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct DraqResult {
    /// Per-token symmetric codes of the channel-normalized tensor.
    pub q: QuantizedTensor,
    /// Channel scales `s` (column maxima of `|X|`).
    pub chan_scale: Vec<f64>,
    /// Token scales `d` (row maxima of `|X s^-1|`).
    pub token_scale: Vec<f64>,
    /// Number of pre-rounding values the clamp had to change.
    pub clamped: usize,
}

impl DraqResult {
    /// `d * codes / (2^(n-1) - 1) * s`.
    pub fn reconstruct(&self) -> Matrix {
        dequantize(&self.q)
            .scale_columns(&self.chan_scale)
            .expect("channel scale length fixed at construction")
    }
}

/// Dynamic-range adaptive quantization of a `tokens x channels` activation.
///
/// Columns are normalized by their absolute maxima so every entry lies in
/// `[-1, 1]`, then each row is quantized symmetrically against its own
/// absolute maximum. Zero maxima are replaced by 1 so exact zeros
/// reconstruct exactly.
pub fn draq_quantize(x: &Matrix, bits: u32) -> Result<DraqResult> {
    check_bits(bits)?;
    let chan_scale: Vec<f64> = channel_abs_max(x)?
        .into_iter()
        .map(|m| if m > 0.0 { m } else { 1.0 })
        .collect();
    // X s^-1 computed as a division so |x / max| <= 1 holds exactly.
    let normalized = Matrix::from_parts(
        x.rows(),
        x.cols(),
        x.as_slice()
            .chunks_exact(x.cols())
            .flat_map(|row| row.iter().zip(&chan_scale).map(|(v, s)| v / s))
            .collect(),
    );
    let qmax = signed_qmax(bits);
    let (lo, hi) = clip_range(bits, true);
    let mut token_scale = Vec::with_capacity(x.rows());
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    let mut clamped = 0;
    for r in 0..x.rows() {
        let row = normalized.row(r);
        let d = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d = if d > 0.0 { d } else { 1.0 };
        token_scale.push(d);
        for &v in row {
            let pre = (qmax * (v / d)).round();
            let c = pre.clamp(lo as f64, hi as f64);
            if c != pre {
                clamped += 1;
            }
            codes.push(c);
        }
    }
    let params = QuantParams::new(
        bits,
        true,
        Granularity::PerToken,
        token_scale.iter().map(|d| d / qmax).collect(),
        vec![0; x.rows()],
    )?;
    Ok(DraqResult {
        q: QuantizedTensor {
            ints: Matrix::from_parts(x.rows(), x.cols(), codes),
            params,
        },
        chan_scale,
        token_scale,
        clamped,
    })
}

/// Straight-through gradient of the clamp: 1 on the closed interval
/// `[lo, hi]`, 0 outside.
pub fn ste_grad(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&x) {
        1.0
    } else {
        0.0
    }
}

/// Activation quantizer kinds selectable per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActQuantKind {
    /// Full-precision activations.
    None,
    /// Dynamic-range adaptive (channel then token normalization).
    Draq,
    /// Per-tensor asymmetric min-max.
    Minmax,
    /// Per-token symmetric, no channel adaptation.
    PerToken,
    /// Per-channel symmetric with ranges frozen from calibration data.
    Static,
}

/// A configured activation quantizer, including any frozen calibration state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActQuantizer {
    None,
    Draq { bits: u32 },
    Minmax { bits: u32 },
    PerToken { bits: u32 },
    Static { bits: u32, chan_max: Vec<f64> },
}

impl ActQuantizer {
    /// Builds a quantizer of `kind`. `chan_max` is required for
    /// [`ActQuantKind::Static`] and ignored otherwise.
    pub fn new(kind: ActQuantKind, bits: u32, chan_max: Option<&[f64]>) -> Result<Self> {
        if kind != ActQuantKind::None {
            check_bits(bits)?;
        }
        Ok(match kind {
            ActQuantKind::None => ActQuantizer::None,
            ActQuantKind::Draq => ActQuantizer::Draq { bits },
            ActQuantKind::Minmax => ActQuantizer::Minmax { bits },
            ActQuantKind::PerToken => ActQuantizer::PerToken { bits },
            ActQuantKind::Static => {
                let chan_max = chan_max
                    .ok_or_else(|| Error::config("static activation quantizer needs calibration ranges"))?;
                if chan_max.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::config("calibration ranges must be finite and non-negative"));
                }
                ActQuantizer::Static {
                    bits,
                    chan_max: chan_max.to_vec(),
                }
            }
        })
    }

    pub fn kind(&self) -> ActQuantKind {
        match self {
            ActQuantizer::None => ActQuantKind::None,
            ActQuantizer::Draq { .. } => ActQuantKind::Draq,
            ActQuantizer::Minmax { .. } => ActQuantKind::Minmax,
            ActQuantizer::PerToken { .. } => ActQuantKind::PerToken,
            ActQuantizer::Static { .. } => ActQuantKind::Static,
        }
    }

    pub fn bits(&self) -> Option<u32> {
        match self {
            ActQuantizer::None => None,
            ActQuantizer::Draq { bits }
            | ActQuantizer::Minmax { bits }
            | ActQuantizer::PerToken { bits }
            | ActQuantizer::Static { bits, .. } => Some(*bits),
        }
    }

    /// Quantize-dequantize `x` (tokens x channels).
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            ActQuantizer::None => Ok(x.clone()),
            ActQuantizer::Draq { bits } => Ok(draq_quantize(x, *bits)?.reconstruct()),
            ActQuantizer::Minmax { bits } => {
                fake_quantize(x, &fit_qparams(x, *bits, false, Granularity::PerTensor)?)
            }
            ActQuantizer::PerToken { bits } => {
                fake_quantize(x, &fit_qparams(x, *bits, true, Granularity::PerToken)?)
            }
            ActQuantizer::Static { bits, chan_max } => {
                if chan_max.len() != x.cols() {
                    return Err(Error::dim(format!(
                        "static quantizer has {} channels, input has {}",
                        chan_max.len(),
                        x.cols()
                    )));
                }
                let qmax = signed_qmax(*bits);
                let scale = chan_max
                    .iter()
                    .map(|&m| if m > 0.0 { m / qmax } else { 1.0 })
                    .collect();
                let p = QuantParams::new(*bits, true, Granularity::PerChannel, scale, vec![0; x.cols()])?;
                fake_quantize(x, &p)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::frob_norm;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian()).unwrap()
    }

    #[test]
    fn invalid_bits_rejected() {
        let x = Matrix::identity(2);
        assert!(matches!(fit_qparams(&x, 1, true, Granularity::PerTensor), Err(Error::Config(_))));
        assert!(fit_qparams(&x, 17, true, Granularity::PerTensor).is_err());
        assert!(draq_quantize(&x, 1).is_err());
    }

    #[test]
    fn fit_degenerate_and_closed_forms() {
        let p = fit_qparams(&Matrix::zeros(3, 3), 4, true, Granularity::PerTensor).unwrap();
        assert_eq!((p.scale(), p.zero_point()), (&[1.0][..], &[0][..]));

        let x = Matrix::from_rows(&[&[7.0, -3.0], &[0.5, 2.0]]).unwrap();
        let p = fit_qparams(&x, 4, true, Granularity::PerTensor).unwrap();
        assert_eq!(p.scale(), &[1.0]);
        assert_eq!((p.clip_lo(), p.clip_hi()), (-8, 7));

        let x = Matrix::from_rows(&[&[0.0, 7.5], &[3.0, 1.0]]).unwrap();
        let p = fit_qparams(&x, 4, false, Granularity::PerTensor).unwrap();
        assert_eq!(p.scale(), &[0.5]);
        assert_eq!(p.zero_point(), &[0]);
        assert_eq!((p.clip_lo(), p.clip_hi()), (0, 15));
    }

    #[test]
    fn granularity_group_counts() {
        let x = random(5, 3, 1);
        assert_eq!(fit_qparams(&x, 8, true, Granularity::PerChannel).unwrap().scale().len(), 3);
        assert_eq!(fit_qparams(&x, 8, false, Granularity::PerToken).unwrap().scale().len(), 5);
        let p = fit_qparams(&x, 8, true, Granularity::PerChannel).unwrap();
        assert!(matches!(quantize(&x.transpose(), &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn on_grid_values_round_trip() {
        let p = QuantParams::new(4, false, Granularity::PerTensor, vec![0.25], vec![3]).unwrap();
        // x = s * (k - zp) for every code k in [0, 15].
        let x = Matrix::from_fn(1, 16, |_, k| 0.25 * (k as f64 - 3.0)).unwrap();
        let q = quantize(&x, &p).unwrap();
        assert_eq!(dequantize(&q), x);
        assert_eq!(q.ints().row(0), (0..16).map(|k| k as f64).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn clipping_to_range() {
        let p = QuantParams::new(4, true, Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        let x = Matrix::from_rows(&[&[1000.0, -1000.0]]).unwrap();
        assert_eq!(quantize(&x, &p).unwrap().ints().as_slice(), &[7.0, -8.0]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let p = QuantParams::new(8, true, Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        let x = Matrix::from_rows(&[&[0.5, -0.5, 2.5, -2.5]]).unwrap();
        assert_eq!(quantize(&x, &p).unwrap().ints().as_slice(), &[1.0, -1.0, 3.0, -3.0]);
    }

    #[test]
    fn rounding_bound_holds_on_unclipped_entries() {
        let x = random(64, 64, 5);
        for (sym, gran) in [
            (true, Granularity::PerTensor),
            (false, Granularity::PerChannel),
            (false, Granularity::PerToken),
        ] {
            let p = fit_qparams(&x, 4, sym, gran).unwrap();
            let xh = fake_quantize(&x, &p).unwrap();
            for r in 0..64 {
                for c in 0..64 {
                    let g = gran.group_of(r, c);
                    let (lo, hi) = p.representable_range(g);
                    let v = x.get(r, c);
                    if v >= lo && v <= hi {
                        assert!((v - xh.get(r, c)).abs() <= p.scale()[g] / 2.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dequantize_zero_and_idempotence() {
        let p = QuantParams::new(4, true, Granularity::PerTensor, vec![0.3], vec![0]).unwrap();
        let q = QuantizedTensor::from_parts(Matrix::zeros(2, 2), p).unwrap();
        assert_eq!(dequantize(&q), Matrix::zeros(2, 2));

        let x = random(16, 16, 9);
        let p = fit_qparams(&x, 4, false, Granularity::PerChannel).unwrap();
        let q1 = quantize(&x, &p).unwrap();
        let q2 = quantize(&dequantize(&q1), &p).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn dequantize_matches_scalar_oracle() {
        let x = random(32, 32, 21);
        let p = fit_qparams(&x, 6, false, Granularity::PerChannel).unwrap();
        let q = quantize(&x, &p).unwrap();
        let xh = dequantize(&q);
        for r in 0..32 {
            for c in 0..32 {
                let s = p.scale()[c];
                let z = p.zero_point()[c] as f64;
                let code = ((x.get(r, c) / s).round() + z).clamp(0.0, 63.0);
                assert_eq!(q.ints().get(r, c), code);
                assert_eq!(xh.get(r, c), s * (code - z));
            }
        }
    }

    #[test]
    fn from_parts_rejects_out_of_range_codes() {
        let p = QuantParams::new(2, true, Granularity::PerTensor, vec![1.0], vec![0]).unwrap();
        assert!(QuantizedTensor::from_parts(Matrix::from_rows(&[&[2.0]]).unwrap(), p.clone()).is_err());
        assert!(QuantizedTensor::from_parts(Matrix::from_rows(&[&[0.5]]).unwrap(), p).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(QuantParams::new(4, true, Granularity::PerTensor, vec![0.0], vec![0]).is_err());
        assert!(QuantParams::new(4, true, Granularity::PerTensor, vec![1.0], vec![1]).is_err());
        assert!(QuantParams::new(4, false, Granularity::PerTensor, vec![1.0], vec![16]).is_err());
        assert!(QuantParams::new(4, false, Granularity::PerTensor, vec![1.0, 1.0], vec![0, 0]).is_err());
    }

    #[test]
    fn params_json_round_trip() {
        let x = random(8, 4, 2);
        let p = fit_qparams(&x, 4, false, Granularity::PerChannel).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"granularity\":\"per-channel\""));
        let back: QuantParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let bad = json.replace("\"bits\":4", "\"bits\":40");
        assert!(serde_json::from_str::<QuantParams>(&bad).is_err());
    }

    #[test]
    fn smooth_scale_cases() {
        assert_eq!(smooth_scale(&[3.0, 0.7], &[3.0, 0.7], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(smooth_scale(&[4.0], &[1.0], 0.5).unwrap(), vec![2.0]);
        assert_eq!(smooth_scale(&[0.0, 5.0], &[2.0, 0.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(smooth_scale(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(smooth_scale(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn smoothing_preserves_product() {
        let x = random(6, 4, 1);
        let w = random(4, 3, 2);
        let s = smooth_scale(&channel_abs_max(&x).unwrap(), &channel_abs_max(&w.transpose()).unwrap(), 0.5).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        let a = crate::tensor::matmul(&x, &w).unwrap();
        let b = crate::tensor::matmul(&xs, &ws).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn draq_constant_and_zero() {
        let x = Matrix::from_fn(4, 5, |_, _| -2.5).unwrap();
        let d = draq_quantize(&x, 4).unwrap();
        assert!(d.q.ints().as_slice().iter().all(|&v| v == -7.0));
        assert_eq!(d.reconstruct(), x);

        let z = draq_quantize(&Matrix::zeros(3, 4), 4).unwrap();
        assert_eq!(z.reconstruct(), Matrix::zeros(3, 4));
        assert_eq!(z.chan_scale, vec![1.0; 4]);
        assert_eq!(z.token_scale, vec![1.0; 3]);
    }

    #[test]
    fn draq_beats_per_tensor_minmax_on_outlier_channel() {
        let mut x = random(64, 32, 17);
        for r in 0..64 {
            let v = x.get(r, 5) * 100.0;
            x = x.with_entry(r, 5, v).unwrap();
        }
        let draq = draq_quantize(&x, 4).unwrap().reconstruct();
        let minmax = ActQuantizer::Minmax { bits: 4 }.apply(&x).unwrap();
        assert!(frob_norm(&x.sub(&draq).unwrap()) < frob_norm(&x.sub(&minmax).unwrap()));
    }

    #[test]
    fn draq_error_non_increasing_in_bits() {
        for seed in 0..10 {
            let x = random(32, 16, seed);
            let errs: Vec<f64> = [4, 6, 8]
                .iter()
                .map(|&b| frob_norm(&x.sub(&draq_quantize(&x, b).unwrap().reconstruct()).unwrap()))
                .collect();
            assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
        }
    }

    #[test]
    fn ste_cases() {
        assert_eq!(ste_grad(0.0, -8.0, 7.0), 1.0);
        assert_eq!(ste_grad(100.0, -8.0, 7.0), 0.0);
        assert_eq!(ste_grad(-8.0, -8.0, 7.0), 1.0);
        assert_eq!(ste_grad(7.0, -8.0, 7.0), 1.0);
    }

    #[test]
    fn ste_matches_clamp_finite_differences() {
        let (lo, hi) = (-8.0, 7.0);
        let h = 1e-6;
        for i in 0..400 {
            let x = -20.0 + i as f64 * 0.1 + 0.013;
            if (x - lo).abs() < 1e-3 || (x - hi).abs() < 1e-3 {
                continue;
            }
            let fd = ((x + h).clamp(lo, hi) - (x - h).clamp(lo, hi)) / (2.0 * h);
            assert!((fd - ste_grad(x, lo, hi)).abs() < 1e-6, "x={x} fd={fd}");
        }
    }

    #[test]
    fn static_quantizer_clips_beyond_calibrated_range() {
        let q = ActQuantizer::new(ActQuantKind::Static, 4, Some(&[1.0, 2.0])).unwrap();
        let x = Matrix::from_rows(&[&[3.0, 1.0]]).unwrap();
        let y = q.apply(&x).unwrap();
        assert_eq!(y.get(0, 0), 1.0);
        assert!(ActQuantizer::new(ActQuantKind::Static, 4, None).is_err());
        assert!(q.apply(&Matrix::zeros(1, 3)).is_err());
    }

    proptest! {
        #[test]
        fn per_tensor_symmetric_contraction(seed in 0u64..10_000, bits in 2u32..=12) {
            let x = random(12, 9, seed);
            let p = fit_qparams(&x, bits, true, Granularity::PerTensor).unwrap();
            let xh = fake_quantize(&x, &p).unwrap();
            // Symmetric min-max fit never clips except at -2^(n-1) which is below -max.
            prop_assert!(x.max_abs_diff(&xh).unwrap() <= p.scale()[0] / 2.0 + 1e-12);
        }

        #[test]
        fn draq_range_and_clamp_noop(seed in 0u64..10_000, bits in 2u32..=16, gain in 1.0f64..1000.0) {
            let mut x = random(10, 8, seed);
            x = x.scale_columns(&[gain, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.01]).unwrap();
            let d = draq_quantize(&x, bits).unwrap();
            prop_assert_eq!(d.clamped, 0);
            let normalized = x.scale_columns(&d.chan_scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>()).unwrap();
            prop_assert!(normalized.max_abs() <= 1.0 + 1e-15);
            prop_assert!(d.token_scale.iter().all(|&t| t <= 1.0 + 1e-15));
        }
    }
}
