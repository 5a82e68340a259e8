//! On-disk form of a [`QuantizedLinear`]: a directory holding `meta.json`
//! and tensor dumps `l1.lsgt`, `l2.lsgt` and `wr.lsgt` (integer codes, or
//! real values for a full-precision residual).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::{QuantizedLinear, ResidualWeight};
use super::svd::LowRank;
use crate::error::{Error, Result};
use crate::quantizers::{ActQuantizer, QuantParams, QuantizedTensor};
use crate::rotation::RotationDescriptor;
use crate::tensor::Matrix;

pub const LAYER_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ResidualMeta {
    Quantized { params: QuantParams },
    Full,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    format: u32,
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    rotation: RotationDescriptor,
    act: ActQuantizer,
    residual: ResidualMeta,
    bias: Vec<f64>,
    qao_trace: Vec<f64>,
}

/// Writes `layer` into `dir`, creating it if needed.
pub fn save_layer(layer: &QuantizedLinear, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (residual, wr) = match layer.residual() {
        ResidualWeight::Quantized(q) => (
            ResidualMeta::Quantized {
                params: q.params().clone(),
            },
            q.ints(),
        ),
        ResidualWeight::Full(m) => (ResidualMeta::Full, m),
    };
    let meta = LayerMeta {
        format: LAYER_FORMAT,
        in_dim: layer.in_dim(),
        out_dim: layer.out_dim(),
        rank: layer.rank(),
        rotation: layer.rotation().clone(),
        act: layer.act().clone(),
        residual,
        bias: layer.bias().to_vec(),
        qao_trace: layer.qao_trace().to_vec(),
    };
    layer.factors().l1.save(dir.join("l1.lsgt"))?;
    layer.factors().l2.save(dir.join("l2.lsgt"))?;
    wr.save(dir.join("wr.lsgt"))?;
    crate::artifact::write_json(dir.join("meta.json"), &meta)
}

pub fn load_layer(dir: impl AsRef<Path>) -> Result<QuantizedLinear> {
    let dir = dir.as_ref();
    let meta: LayerMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta.format != LAYER_FORMAT {
        return Err(Error::Format(format!("unsupported layer format {}", meta.format)));
    }
    let l1 = Matrix::load(dir.join("l1.lsgt"))?;
    let l2 = Matrix::load(dir.join("l2.lsgt"))?;
    let wr = Matrix::load(dir.join("wr.lsgt"))?;
    if wr.shape() != (meta.in_dim, meta.out_dim) || l1.cols() != meta.rank {
        return Err(Error::Format(format!(
            "archive tensors {:?}/{:?} disagree with meta {}x{} rank {}",
            wr.shape(),
            l1.shape(),
            meta.in_dim,
            meta.out_dim,
            meta.rank
        )));
    }
    let residual = match meta.residual {
        ResidualMeta::Quantized { params } => ResidualWeight::Quantized(QuantizedTensor::from_parts(wr, params)?),
        ResidualMeta::Full => ResidualWeight::Full(wr),
    };
    QuantizedLinear::new(
        meta.rotation,
        LowRank { l1, l2 },
        residual,
        meta.bias,
        meta.act,
        meta.qao_trace,
    )
}
