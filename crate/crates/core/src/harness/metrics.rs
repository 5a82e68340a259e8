//! End-to-end error between a reference and a quantized stack.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::LayerStack;
use crate::tensor::{frob_norm, ActBatch, Matrix};

/// `+inf` is written as the string `"inf"`; JSON has no infinity.
mod inf_float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `|y_q - y_fp|_F / |y_fp|_F`.
    #[serde(with = "inf_float")]
    pub rel_frob: f64,
    /// `10 log10(|y_fp|^2 / |y_q - y_fp|^2)`; `+inf` for identical outputs.
    #[serde(with = "inf_float")]
    pub sqnr_db: f64,
    pub max_abs: f64,
}

/// Metrics of `y_q` against the reference `y_fp`.
pub fn error_metrics(y_q: &Matrix, y_fp: &Matrix) -> Result<ErrorMetrics> {
    let diff = y_q.sub(y_fp)?;
    let (d, r) = (frob_norm(&diff), frob_norm(y_fp));
    let rel_frob = if d == 0.0 {
        0.0
    } else if r == 0.0 {
        f64::INFINITY
    } else {
        d / r
    };
    let sqnr_db = if d == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (r / d).log10()
    };
    Ok(ErrorMetrics {
        rel_frob,
        sqnr_db,
        max_abs: diff.max_abs(),
    })
}

/// Final outputs of both stacks over all inputs, stacked.
pub fn eval_model_error(fp: &impl LayerStack, q: &impl LayerStack, inputs: &[ActBatch]) -> Result<ErrorMetrics> {
    if fp.depth() == 0 || q.depth() != fp.depth() {
        return Err(Error::dim(format!("models of depth {} and {}", fp.depth(), q.depth())));
    }
    for i in 0..fp.depth() {
        if fp.layer_dims(i) != q.layer_dims(i) {
            return Err(Error::dim(format!(
                "layer {i}: {:?} vs {:?}",
                fp.layer_dims(i),
                q.layer_dims(i)
            )));
        }
    }
    if inputs.is_empty() {
        return Err(Error::config("no evaluation inputs"));
    }
    let x = Matrix::vstack(&inputs.iter().map(ActBatch::to_matrix).collect::<Vec<_>>())?;
    error_metrics(&q.forward(&x)?, &fp.forward(&x)?)
}
