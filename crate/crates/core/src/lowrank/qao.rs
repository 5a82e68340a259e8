//! Alternating optimization of the low-rank branch against the quantized
//! residual.
//!
//! Quantization parameters are fitted once, on the residual of the SVD
//! initialization, and held fixed afterwards. Each round records the error of
//! the current pair, keeps the best factors seen so far, re-factors the
//! weight with the quantized residual removed and re-quantizes what is left.

use serde::{Deserialize, Serialize};

use super::svd::{LowRank, SubspaceOptions, TruncatedSvd};
use crate::error::{Error, Result};
use crate::quantizers::{check_bits, dequantize, fit_qparams, quantize, Granularity, QuantParams, QuantizedTensor};
use crate::rotation::RotationDescriptor;
use crate::tensor::{frob_norm, Matrix};

/// How many rounds to run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum StopRule {
    /// Exactly this many rounds.
    Fixed { rounds: usize },
    /// Stop once a round improves the best error by less than `tol`
    /// (relative), or after `cap` rounds.
    Converge { tol: f64, cap: usize },
}

impl StopRule {
    pub const DEFAULT_TOL: f64 = 1e-4;
    pub const DEFAULT_CAP: usize = 200;

    pub fn fixed(rounds: usize) -> Self {
        StopRule::Fixed { rounds }
    }

    pub fn converge() -> Self {
        StopRule::Converge {
            tol: Self::DEFAULT_TOL,
            cap: Self::DEFAULT_CAP,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            StopRule::Fixed { rounds: 0 } => Err(Error::config("qao needs at least one round")),
            StopRule::Converge { cap: 0, .. } => Err(Error::config("qao round cap must be at least 1")),
            StopRule::Converge { tol, .. } if !(tol.is_finite() && tol >= 0.0) => {
                Err(Error::config(format!("invalid convergence tolerance {tol}")))
            }
            _ => Ok(()),
        }
    }

    /// Upper bound on the number of rounds.
    pub fn max_rounds(&self) -> usize {
        match *self {
            StopRule::Fixed { rounds } => rounds,
            StopRule::Converge { cap, .. } => cap,
        }
    }
}

/// Which residual is returned next to the best factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// The residual quantized against the best factors.
    #[default]
    Consistent,
    /// The residual of the final update, whatever round the best factors
    /// came from.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QaoOptions {
    pub rank: usize,
    pub bits: u32,
    pub stop: StopRule,
    pub pairing: Pairing,
    pub svd: SubspaceOptions,
}

impl QaoOptions {
    pub fn new(rank: usize, bits: u32, stop: StopRule) -> Self {
        QaoOptions {
            rank,
            bits,
            stop,
            pairing: Pairing::default(),
            svd: SubspaceOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct QaoResult {
    pub w_r: QuantizedTensor,
    pub factors: LowRank,
    pub err_star: f64,
    /// Error of the pair at the start of every executed round; entry 0 is the
    /// plain SVD-then-quantize error.
    pub err_trace: Vec<f64>,
    /// Round the best factors came from.
    pub best_round: usize,
}

impl QaoResult {
    pub fn rounds(&self) -> usize {
        self.err_trace.len()
    }
}

/// SVD initialization of a rotated weight. It does not depend on the bit-width
/// or the stopping rule, so one init can seed several optimizer runs.
#[derive(Clone, Debug)]
pub struct QaoInit {
    factors: LowRank,
    svd: TruncatedSvd,
}

impl QaoInit {
    pub fn new(w_hat: &Matrix, rank: usize, svd: SubspaceOptions) -> Result<Self> {
        let mut svd = TruncatedSvd::with_options(rank, svd);
        let factors = svd.factor(w_hat)?;
        Ok(QaoInit { factors, svd })
    }

    pub fn factors(&self) -> &LowRank {
        &self.factors
    }
}

/// Runs the optimizer on an already rotated weight `w_hat` (`in x out`).
pub fn qao_rotated(w_hat: &Matrix, opts: &QaoOptions) -> Result<QaoResult> {
    check_bits(opts.bits)?;
    opts.stop.validate()?;
    qao_from_init(w_hat, QaoInit::new(w_hat, opts.rank, opts.svd)?, opts)
}

/// Like [`qao_rotated`], starting from a precomputed init of the same `w_hat`.
pub fn qao_from_init(w_hat: &Matrix, init: QaoInit, opts: &QaoOptions) -> Result<QaoResult> {
    check_bits(opts.bits)?;
    opts.stop.validate()?;
    if init.factors.l1.rows() != w_hat.rows() || init.factors.l2.cols() != w_hat.cols() || init.factors.rank() != opts.rank
    {
        return Err(Error::dim(format!(
            "init of rank {} for a {:?} weight used with rank {}",
            init.factors.rank(),
            w_hat.shape(),
            opts.rank
        )));
    }
    let QaoInit { mut factors, mut svd } = init;
    let r0 = w_hat.sub(&factors.product())?;
    let params: QuantParams = fit_qparams(&r0, opts.bits, false, Granularity::PerChannel)?;
    let mut w_r = quantize(&r0, &params)?;

    let mut err_trace = Vec::new();
    let mut err_star = f64::INFINITY;
    let mut best = (factors.clone(), w_r.clone(), 0);
    let max_rounds = opts.stop.max_rounds();
    for round in 0..max_rounds {
        let deq = dequantize(&w_r);
        let residual = w_hat.sub(&factors.product())?;
        let err = frob_norm(&residual.sub(&deq)?);
        err_trace.push(err);
        let prev_star = err_star;
        if err < err_star {
            err_star = err;
            best = (factors.clone(), w_r.clone(), round);
        }

        let last = round + 1 == max_rounds
            || match opts.stop {
                StopRule::Converge { tol, .. } => round > 0 && prev_star - err_star < tol * prev_star,
                StopRule::Fixed { .. } => false,
            };
        // The consistent pairing never uses the trailing update.
        if last && opts.pairing == Pairing::Consistent {
            break;
        }
        factors = svd.factor(&w_hat.sub(&deq)?)?;
        w_r = quantize(&w_hat.sub(&factors.product())?, &params)?;
        if last {
            break;
        }
    }

    let (best_factors, best_wr, best_round) = best;
    let w_r = match opts.pairing {
        Pairing::Consistent => best_wr,
        Pairing::Literal => w_r,
    };
    Ok(QaoResult {
        w_r,
        factors: best_factors,
        err_star,
        err_trace,
        best_round,
    })
}

/// Rotates `w` (`in x out`) on its input side and runs the optimizer.
pub fn qao(w: &Matrix, rotation: &RotationDescriptor, opts: &QaoOptions) -> Result<QaoResult> {
    qao_rotated(&rotation.rotate_weight(w)?, opts)
}
