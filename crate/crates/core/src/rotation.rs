//! Orthogonal Hadamard rotations.
//!
//! The rotation of a layer with input width `n` is `Q = D H`, where `H` is the
//! normalized Sylvester-Walsh matrix (`H = H^T`, `H H = I`, entries
//! `±1/sqrt(n)`) and `D` is a diagonal of seeded random signs (all `+1` for
//! the plain Walsh variant). Activations are rotated as `X Q` and weights
//! (stored `in x out`) as `Q^T W`, so `(X Q)(Q^T W) = X W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationKind {
    Identity,
    WalshHadamard,
    RandomizedHadamard,
}

/// Everything needed to rebuild a rotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor")]
pub struct RotationDescriptor {
    dim: usize,
    kind: RotationKind,
    sign_seed: u64,
}

#[derive(Deserialize)]
struct RawDescriptor {
    dim: usize,
    kind: RotationKind,
    sign_seed: u64,
}

impl TryFrom<RawDescriptor> for RotationDescriptor {
    type Error = Error;

    fn try_from(raw: RawDescriptor) -> Result<Self> {
        RotationDescriptor::new(raw.dim, raw.kind, raw.sign_seed)
    }
}

/// Which side of the operand the rotation multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `Q * x`: rotates along rows (x has `dim` rows).
    Left,
    /// `x * Q`: rotates along columns (x has `dim` columns).
    Right,
}

impl RotationDescriptor {
    pub fn new(dim: usize, kind: RotationKind, sign_seed: u64) -> Result<Self> {
        if !dim.is_power_of_two() {
            return Err(Error::dim(format!("rotation dimension {dim} is not a power of two")));
        }
        Ok(RotationDescriptor { dim, kind, sign_seed })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        RotationDescriptor::new(dim, RotationKind::Identity, 0)
    }

    pub fn walsh(dim: usize) -> Result<Self> {
        RotationDescriptor::new(dim, RotationKind::WalshHadamard, 0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> RotationKind {
        self.kind
    }

    pub fn sign_seed(&self) -> u64 {
        self.sign_seed
    }

    /// Diagonal of `D`.
    pub fn signs(&self) -> Vec<f64> {
        match self.kind {
            RotationKind::RandomizedHadamard => {
                let mut rng = Rng::new(self.sign_seed);
                (0..self.dim).map(|_| rng.sign()).collect()
            }
            _ => vec![1.0; self.dim],
        }
    }

    /// `x Q` for activations `tokens x dim`.
    pub fn rotate_input(&self, x: &Matrix) -> Result<Matrix> {
        fwht(x, self, Side::Right)
    }

    /// `Q^T w` for weights `dim x out`.
    pub fn rotate_weight(&self, w: &Matrix) -> Result<Matrix> {
        fwht_transpose(w, self, Side::Left)
    }
}

/// Dense rotation matrix `Q = D H`.
pub fn hadamard_matrix(desc: &RotationDescriptor) -> Matrix {
    let n = desc.dim;
    if desc.kind == RotationKind::Identity {
        return Matrix::identity(n);
    }
    let norm = 1.0 / (n as f64).sqrt();
    let signs = desc.signs();
    // Sylvester entry formula: H[i][j] = (-1)^popcount(i & j) / sqrt(n).
    let mut data = Vec::with_capacity(n * n);
    for (i, sign) in signs.iter().enumerate() {
        for j in 0..n {
            let parity = ((i & j).count_ones() & 1) as f64;
            data.push(sign * (1.0 - 2.0 * parity) * norm);
        }
    }
    Matrix::from_parts(n, n, data)
}

// Unnormalized in-place Walsh-Hadamard butterfly over `n` blocks of `width`
// contiguous values each; block `j` is combined with block `j + h`.
fn butterfly(data: &mut [f64], n: usize, width: usize) {
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            let (lo, hi) = data[start * width..(start + 2 * h) * width].split_at_mut(h * width);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

fn check_side(x: &Matrix, desc: &RotationDescriptor, side: Side) -> Result<()> {
    let len = match side {
        Side::Left => x.rows(),
        Side::Right => x.cols(),
    };
    if len != desc.dim {
        return Err(Error::dim(format!(
            "rotation of dim {} applied on the {side:?} of a {:?} matrix",
            desc.dim,
            x.shape()
        )));
    }
    Ok(())
}

// Unsigned, normalized Walsh transform on the requested side.
fn walsh_in_place(x: &mut Matrix, side: Side) {
    let (rows, cols) = x.shape();
    match side {
        Side::Right => {
            if cols > 1 {
                for row in x.data_mut().chunks_exact_mut(cols) {
                    butterfly(row, cols, 1);
                }
            }
        }
        Side::Left => {
            if rows > 1 && cols > 0 {
                butterfly(x.data_mut(), rows, cols);
            }
        }
    }
    let n = match side {
        Side::Left => rows,
        Side::Right => cols,
    };
    if n > 1 {
        let norm = 1.0 / (n as f64).sqrt();
        x.data_mut().iter_mut().for_each(|v| *v *= norm);
    }
}

/// Fast transform: `Q x` (left) or `x Q` (right) in `O(rows * cols * log n)`.
pub fn fwht(x: &Matrix, desc: &RotationDescriptor, side: Side) -> Result<Matrix> {
    check_side(x, desc, side)?;
    if desc.kind == RotationKind::Identity {
        return Ok(x.clone());
    }
    let signs = desc.signs();
    match side {
        // x D H
        Side::Right => {
            let mut out = x.scale_columns(&signs)?;
            walsh_in_place(&mut out, side);
            Ok(out)
        }
        // D (H x)
        Side::Left => {
            let mut out = x.clone();
            walsh_in_place(&mut out, side);
            out.scale_rows(&signs)
        }
    }
}

/// Fast transform with the transposed rotation: `Q^T x` (left) or `x Q^T`
/// (right).
pub fn fwht_transpose(x: &Matrix, desc: &RotationDescriptor, side: Side) -> Result<Matrix> {
    check_side(x, desc, side)?;
    if desc.kind == RotationKind::Identity {
        return Ok(x.clone());
    }
    let signs = desc.signs();
    match side {
        // x H D
        Side::Right => {
            let mut out = x.clone();
            walsh_in_place(&mut out, side);
            out.scale_columns(&signs)
        }
        // H (D x)
        Side::Left => {
            let mut out = x.scale_rows(&signs)?;
            walsh_in_place(&mut out, side);
            Ok(out)
        }
    }
}

/// `max|after| / max|before|`; 0 when `before` is all zeros.
pub fn outlier_spread_ratio(before: &Matrix, after: &Matrix) -> Result<f64> {
    if before.shape() != after.shape() {
        return Err(Error::dim(format!(
            "spread ratio of {:?} vs {:?}",
            before.shape(),
            after.shape()
        )));
    }
    let b = before.max_abs();
    Ok(if b == 0.0 { 0.0 } else { after.max_abs() / b })
}
