//! Layer stacks. Consecutive linear layers are separated by a GELU; the last
//! layer's output is returned as is.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{load_layer, save_layer, QuantizedLinear};
use crate::tensor::{matmul, ActBatch, Matrix};

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// A stack of linear layers, each mapping `tokens x in` to `tokens x out`.
pub trait LayerStack {
    fn depth(&self) -> usize;

    /// Applies layer `i` alone (no nonlinearity).
    fn layer_forward(&self, i: usize, x: &Matrix) -> Result<Matrix>;

    fn layer_dims(&self, i: usize) -> (usize, usize);

    fn in_dim(&self) -> usize {
        self.layer_dims(0).0
    }

    fn out_dim(&self) -> usize {
        self.layer_dims(self.depth() - 1).1
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for i in 0..self.depth() {
            if i > 0 {
                h = h.map(gelu)?;
            }
            h = self.layer_forward(i, &h)?;
        }
        Ok(h)
    }

    /// Input of every layer, then the final output (`depth + 1` entries).
    fn forward_trace(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut trace = Vec::with_capacity(self.depth() + 1);
        let mut h = x.clone();
        for i in 0..self.depth() {
            if i > 0 {
                h = h.map(gelu)?;
            }
            let next = self.layer_forward(i, &h)?;
            trace.push(h);
            h = next;
        }
        trace.push(h);
        Ok(trace)
    }

    /// Runs a `B x N x C` batch with the tokens of all batch entries stacked.
    fn forward_batch(&self, x: &ActBatch) -> Result<ActBatch> {
        let y = self.forward(&x.to_matrix())?;
        ActBatch::from_matrix(x.batch(), x.tokens(), y)
    }
}

fn check_chain(dims: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    let mut prev: Option<usize> = None;
    for (i, (input, output)) in dims.enumerate() {
        if let Some(p) = prev {
            if p != input {
                return Err(Error::dim(format!("layer {i} takes {input} channels but receives {p}")));
            }
        }
        prev = Some(output);
    }
    Ok(())
}

/// A full-precision linear layer, `y = x w + b` with `w` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FpLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl FpLayer {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.cols() {
            return Err(Error::dim(format!("bias of {} for {} outputs", b.len(), w.cols())));
        }
        if let Some(index) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FpLayer { w, b })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.w)?.add_row_vector(&self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpModel {
    layers: Vec<FpLayer>,
}

impl FpModel {
    pub fn new(layers: Vec<FpLayer>) -> Result<Self> {
        check_chain(layers.iter().map(|l| l.w.shape()))?;
        Ok(FpModel { layers })
    }

    pub fn layers(&self) -> &[FpLayer] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl LayerStack for FpModel {
    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn layer_forward(&self, i: usize, x: &Matrix) -> Result<Matrix> {
        self.layers[i].forward(x)
    }

    fn layer_dims(&self, i: usize) -> (usize, usize) {
        self.layers[i].w.shape()
    }
}

pub const MODEL_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    format: u32,
    layers: Vec<String>,
}

/// Stable id of layer `i`, also its archive subdirectory.
pub fn layer_id(i: usize) -> String {
    format!("layer_{i:03}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    layers: Vec<QuantizedLinear>,
}

impl QuantModel {
    pub fn new(layers: Vec<QuantizedLinear>) -> Result<Self> {
        check_chain(layers.iter().map(|l| (l.in_dim(), l.out_dim())))?;
        Ok(QuantModel { layers })
    }

    pub fn layers(&self) -> &[QuantizedLinear] {
        &self.layers
    }

    /// Sum of optimizer rounds over all layers.
    pub fn total_qao_rounds(&self) -> usize {
        self.layers.iter().map(|l| l.qao_rounds()).sum()
    }

    /// Writes `model.json` and one subdirectory per layer into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let ids: Vec<String> = (0..self.layers.len()).map(layer_id).collect();
        for (layer, id) in self.layers.iter().zip(&ids) {
            save_layer(layer, dir.join(id))?;
        }
        crate::artifact::write_json(
            dir.join("model.json"),
            &ModelMeta {
                format: MODEL_FORMAT,
                layers: ids,
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: ModelMeta = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        if meta.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unsupported model format {}", meta.format)));
        }
        let layers = meta
            .layers
            .iter()
            .map(|id| {
                if id.contains(['/', '\\']) || id.starts_with('.') {
                    return Err(Error::Format(format!("bad layer entry {id:?}")));
                }
                load_layer(dir.join(id))
            })
            .collect::<Result<Vec<_>>>()?;
        QuantModel::new(layers)
    }
}

impl LayerStack for QuantModel {
    fn depth(&self) -> usize {
        self.layers.len()
    }

    fn layer_forward(&self, i: usize, x: &Matrix) -> Result<Matrix> {
        self.layers[i].forward(x)
    }

    fn layer_dims(&self, i: usize) -> (usize, usize) {
        (self.layers[i].in_dim(), self.layers[i].out_dim())
    }
}
