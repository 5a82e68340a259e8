//! Dense row-major arrays and the handful of reductions the rest of the
//! crate is built on.
//!
//! "Integer" tensors (quantized weights, activation codes) are stored as exact
//! small integers inside the same `f64` storage; every value involved is
//! exactly representable so no separate integer type is needed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense row-major matrix of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    /// Internal constructor for data produced by finite arithmetic on finite
    /// inputs.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::new(rows.len(), cols, data)
    }

    /// Builds a matrix entry by entry. Non-finite entries are rejected.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(c).step_by(self.cols.max(1)).copied()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Returns a copy with one entry replaced.
    pub fn with_entry(&self, r: usize, c: usize, value: f64) -> Result<Matrix> {
        if r >= self.rows || c >= self.cols {
            return Err(Error::dim(format!("entry ({r},{c}) outside {}x{}", self.rows, self.cols)));
        }
        check_finite(&[value])?;
        let mut out = self.clone();
        out.data[r * self.cols + c] = value;
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_parts(self.cols, self.rows, data)
    }

    /// Applies `f` elementwise. Non-finite results are rejected.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|v| v * factor).collect())
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Multiplies column `j` by `factors[j]` (right multiplication by a diagonal).
    pub fn scale_columns(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.cols {
            return Err(Error::dim(format!("{} column factors for {} columns", factors.len(), self.cols)));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `factors[i]` (left multiplication by a diagonal).
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(Error::dim(format!("{} row factors for {} rows", factors.len(), self.rows)));
        }
        let mut out = self.clone();
        for (row, f) in out.data.chunks_exact_mut(self.cols.max(1)).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    /// Adds `bias[j]` to every entry of column `j`.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::dim(format!("bias of length {} for {} columns", bias.len(), self.cols)));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column sub-block `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix::from_parts(self.rows, w, data)
    }

    /// Row sub-block `[start, end)`.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix::from_parts(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Stacks matrices vertically.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::dim("vstack with differing column counts"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix::from_parts(rows, cols, data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }
}

/// Three-dimensional activation batch `B x N x C` (batch, tokens, channels).
#[derive(Clone, Debug, PartialEq)]
pub struct ActBatch {
    batch: usize,
    tokens: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ActBatch {
    pub fn new(batch: usize, tokens: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || tokens == 0 || channels == 0 {
            return Err(Error::dim(format!("empty batch {batch}x{tokens}x{channels}")));
        }
        if data.len() != batch * tokens * channels {
            return Err(Error::dim(format!(
                "data length {} does not match {batch}x{tokens}x{channels}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(ActBatch {
            batch,
            tokens,
            channels,
            data,
        })
    }

    /// Reinterprets a `(B*N) x C` token matrix as a batch.
    pub fn from_matrix(batch: usize, tokens: usize, m: Matrix) -> Result<Self> {
        if m.rows() != batch * tokens {
            return Err(Error::dim(format!("{} rows cannot form {batch}x{tokens} tokens", m.rows())));
        }
        let channels = m.cols();
        ActBatch::new(batch, tokens, channels, m.into_vec())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, n: usize, c: usize) -> f64 {
        self.data[(b * self.tokens + n) * self.channels + c]
    }

    /// Flattens batch and token axes into a `(B*N) x C` matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_parts(self.batch * self.tokens, self.channels, self.data.clone())
    }

    pub fn scale(&self, factor: f64) -> ActBatch {
        ActBatch {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn channel_abs_max(&self) -> Result<Vec<f64>> {
        channel_abs_max_raw(&self.data, self.channels)
    }
}

fn channel_abs_max_raw(data: &[f64], channels: usize) -> Result<Vec<f64>> {
    if data.is_empty() || channels == 0 {
        return Err(Error::dim("channel_abs_max of an empty tensor"));
    }
    let mut out = vec![0.0f64; channels];
    for row in data.chunks_exact(channels) {
        for (m, v) in out.iter_mut().zip(row) {
            *m = m.max(v.abs());
        }
    }
    Ok(out)
}

/// Per-column maximum absolute value over all rows.
pub fn channel_abs_max(x: &Matrix) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(Error::dim("channel_abs_max of an empty tensor"));
    }
    channel_abs_max_raw(x.as_slice(), x.cols())
}

/// Frobenius norm.
pub fn frob_norm(x: &Matrix) -> f64 {
    x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

// `dgemm` wrapper with explicit strides; `c = a * b` with optional transposes.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and `c` (m x n, row-major); the slices outlive the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let c = gemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        (a.cols as isize, 1),
        &b.data,
        (b.cols as isize, 1),
    );
    Ok(Matrix::from_parts(a.rows, b.cols, c))
}

/// `a^T * b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dim(format!("matmul_tn {:?} x {:?}", a.shape(), b.shape())));
    }
    let c = gemm(
        a.cols,
        a.rows,
        b.cols,
        &a.data,
        (1, a.cols as isize),
        &b.data,
        (b.cols as isize, 1),
    );
    Ok(Matrix::from_parts(a.cols, b.cols, c))
}

const DUMP_MAGIC: &[u8; 4] = b"LSGT";

/// Writes a tensor dump: magic `LSGT`, little-endian `u32` rank, `u64` dims,
/// then the row-major values as little-endian `f64`.
pub fn write_dump(mut w: impl Write, dims: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::dim(format!("dump dims {dims:?} but {} values", data.len())));
    }
    let mut buf = Vec::with_capacity(8 + 8 * dims.len() + 8 * data.len());
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a tensor dump written by [`write_dump`].
pub fn read_dump(mut r: impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::Format("truncated tensor dump".into()))?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != DUMP_MAGIC {
        return Err(Error::Format("bad tensor dump magic".into()));
    }
    let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor dump".into()));
    }
    Ok((dims, data))
}

impl Matrix {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        write_dump(&mut buf, &[self.rows, self.cols], &self.data)?;
        crate::artifact::write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Matrix> {
        let (dims, data) = read_dump(fs::File::open(path)?)?;
        match dims.as_slice() {
            [r, c] => Matrix::new(*r, *c, data),
            _ => Err(Error::Format(format!("expected a rank-2 dump, got dims {dims:?}"))),
        }
    }
}

/// Saves a vector as a rank-1 dump.
pub fn save_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_dump(&mut buf, &[v.len()], v)?;
    crate::artifact::write_atomic(path, &buf)
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let (dims, data) = read_dump(fs::File::open(path)?)?;
    if dims.len() != 1 {
        return Err(Error::Format(format!("expected a rank-1 dump, got dims {dims:?}")));
    }
    check_finite(&data)?;
    Ok(data)
}
