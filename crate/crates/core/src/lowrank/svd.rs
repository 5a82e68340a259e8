//! Truncated SVD.
//!
//! Small or nearly full-rank problems go through a dense SVD. Everything else
//! uses block subspace iteration with a Rayleigh-Ritz extraction, which only
//! touches the matrix through products with a thin block. A cold start
//! iterates on the smaller Gram matrix. The iteration can be warm-started
//! from the basis of a previous call, which is what the alternating optimizer
//! does: consecutive matrices differ only by the change in the quantized
//! residual.

use nalgebra::{DMatrix, SymmetricEigen, QR, SVD};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_tn, Matrix};

/// Rank-`r` factor pair with `W ~= l1 * l2`, `l1 = U_r Sigma_r`, `l2 = V_r^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRank {
    pub l1: Matrix,
    pub l2: Matrix,
}

impl LowRank {
    pub fn zero(rows: usize, cols: usize) -> Self {
        LowRank {
            l1: Matrix::zeros(rows, 0),
            l2: Matrix::zeros(0, cols),
        }
    }

    pub fn rank(&self) -> usize {
        self.l1.cols()
    }

    /// `l1 * l2`.
    pub fn product(&self) -> Matrix {
        matmul(&self.l1, &self.l2).expect("factor shapes agree by construction")
    }
}

/// Problems whose smaller side is at most this use the dense SVD.
const DENSE_LIMIT: usize = 96;
const OVERSAMPLE: usize = 16;
const BASIS_SEED: u64 = 0x005E_ED0F_5BD0;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Matrix::from_parts(m.nrows(), m.ncols(), data)
}

fn orthonormalize(m: &Matrix) -> Matrix {
    from_na(&QR::new(to_na(m)).q())
}

fn check_rank(w: &Matrix, r: usize) -> Result<()> {
    let p = w.rows().min(w.cols());
    if r > p {
        return Err(Error::config(format!("rank {r} exceeds min dimension {p} of a {:?} matrix", w.shape())));
    }
    Ok(())
}

// Top-`r` factors from a dense SVD of `a`; U and V are scaled so that the
// factorization is `(U_r Sigma_r)(V_r^T)`.
fn dense_factors(a: &DMatrix<f64>, r: usize) -> Result<(Matrix, Matrix, DMatrix<f64>)> {
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric {
            layer: String::new(),
            msg: "dense SVD did not converge".into(),
        })?;
    // `try_new` orders singular values decreasingly.
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut l1 = Matrix::zeros(a.nrows(), r);
    let mut l2 = Matrix::zeros(r, a.ncols());
    {
        let d = l1.data_mut();
        for i in 0..a.nrows() {
            for j in 0..r {
                d[i * r + j] = u[(i, j)] * svd.singular_values[j];
            }
        }
    }
    {
        let d = l2.data_mut();
        for j in 0..r {
            for c in 0..a.ncols() {
                d[j * a.ncols() + c] = v_t[(j, c)];
            }
        }
    }
    Ok((l1, l2, v_t.clone()))
}

/// Stopping rule for the subspace iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubspaceOptions {
    /// Relative change of the captured energy `sum sigma_i^2` that counts as
    /// converged.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SubspaceOptions {
    fn default() -> Self {
        SubspaceOptions {
            tol: 1e-9,
            max_iters: 400,
        }
    }
}

/// Stateful truncated SVD that remembers its right basis between calls.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    rank: usize,
    opts: SubspaceOptions,
    basis: Option<Matrix>,
    /// Iterations spent by the last call (0 for the dense path).
    pub last_iters: usize,
}

impl TruncatedSvd {
    pub fn new(rank: usize) -> Self {
        TruncatedSvd::with_options(rank, SubspaceOptions::default())
    }

    pub fn with_options(rank: usize, opts: SubspaceOptions) -> Self {
        TruncatedSvd {
            rank,
            opts,
            basis: None,
            last_iters: 0,
        }
    }

    /// Best rank-`r` approximation of `a` as factors.
    pub fn factor(&mut self, a: &Matrix) -> Result<LowRank> {
        check_rank(a, self.rank)?;
        let (m, n) = a.shape();
        let r = self.rank;
        self.last_iters = 0;
        if r == 0 {
            return Ok(LowRank::zero(m, n));
        }
        let p = m.min(n);
        let k = (r + OVERSAMPLE).min(p);
        if p <= DENSE_LIMIT || k == p {
            let (l1, l2, _) = dense_factors(&to_na(a), r)?;
            return Ok(LowRank { l1, l2 });
        }

        let (q, z, iters) = match self.basis.take() {
            Some(b) if b.shape() == (n, k) => self.iterate_warm(a, b)?,
            _ => self.iterate_cold(a, k)?,
        };
        self.last_iters = iters;

        // Rayleigh-Ritz: A ~= q (q^T A) = q z^T.
        let (ub_sigma, l2, _) = dense_factors(&to_na(&z.transpose()), r)?;
        let l1 = matmul(&q, &ub_sigma)?;
        self.basis = Some(orthonormalize(&z));
        Ok(LowRank { l1, l2 })
    }

    fn converged(&self, energy: f64, prev: f64) -> bool {
        (energy - prev).abs() <= self.opts.tol * energy.abs()
    }

    // Alternating products with `a` and `a^T`, from a previous right basis.
    // Returns the left basis `q`, `z = a^T q` and the iteration count.
    fn iterate_warm(&self, a: &Matrix, mut v: Matrix) -> Result<(Matrix, Matrix, usize)> {
        let mut prev = f64::NAN;
        let mut iters = 0;
        loop {
            iters += 1;
            let q = orthonormalize(&matmul(a, &v)?);
            // z = A^T q, so z^T = q^T A is the projected block.
            let z = matmul_tn(a, &q)?;
            let energy = top_energy(&matmul_tn(&z, &z)?, self.rank);
            if self.converged(energy, prev) || iters >= self.opts.max_iters {
                return Ok((q, z, iters));
            }
            prev = energy;
            v = orthonormalize(&z);
        }
    }

    // From a random start, iterates on the smaller Gram matrix: one product
    // per step instead of two for the same contraction.
    fn iterate_cold(&self, a: &Matrix, k: usize) -> Result<(Matrix, Matrix, usize)> {
        let (m, n) = a.shape();
        let right = n <= m;
        let gram = if right { matmul_tn(a, a)? } else { matmul_tn(&a.transpose(), &a.transpose())? };
        let d = gram.rows();
        let mut rng = Rng::new(BASIS_SEED);
        let mut b = orthonormalize(&Matrix::from_parts(d, k, (0..d * k).map(|_| rng.gaussian()).collect()));
        let mut prev = f64::NAN;
        let mut iters = 0;
        loop {
            iters += 1;
            let gb = matmul(&gram, &b)?;
            let energy = top_energy(&matmul_tn(&b, &gb)?, self.rank);
            b = orthonormalize(&gb);
            if self.converged(energy, prev) || iters >= self.opts.max_iters {
                break;
            }
            prev = energy;
        }
        let q = if right { orthonormalize(&matmul(a, &b)?) } else { b };
        let z = matmul_tn(a, &q)?;
        Ok((q, z, iters))
    }
}

/// Sum of the `r` largest eigenvalues of a symmetric matrix.
fn top_energy(sym: &Matrix, r: usize) -> f64 {
    let mut eig: Vec<f64> = SymmetricEigen::new(to_na(sym)).eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig[..r].iter().sum()
}

/// Best rank-`r` approximation `W ~= L1 L2` with `L1 = U Sigma[:, :r]` and
/// `L2 = V[:r, :]`.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<LowRank> {
    TruncatedSvd::new(r).factor(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::frob_norm;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian()).unwrap()
    }

    fn residual(w: &Matrix, lr: &LowRank) -> f64 {
        frob_norm(&w.sub(&lr.product()).unwrap())
    }

    // Independent oracle: top-r singular values by power iteration on W^T W
    // with deflation; the Eckart-Young residual is sqrt(|W|^2 - sum sigma_i^2).
    fn power_deflation_residual(w: &Matrix, r: usize) -> f64 {
        let n = w.cols();
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                gram[i][j] = (0..w.rows()).map(|k| w.get(k, i) * w.get(k, j)).sum();
            }
        }
        let mut captured = 0.0;
        for comp in 0..r {
            let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + comp * 3) % 5) as f64 * 0.1).collect();
            let mut lambda = 0.0;
            for _ in 0..20_000 {
                let mut nv: Vec<f64> = (0..n).map(|i| (0..n).map(|j| gram[i][j] * v[j]).sum()).collect();
                let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
                nv.iter_mut().for_each(|x| *x /= norm);
                let diff: f64 = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
                v = nv;
                lambda = norm;
                if diff < 1e-15 {
                    break;
                }
            }
            captured += lambda;
            for i in 0..n {
                for j in 0..n {
                    gram[i][j] -= lambda * v[i] * v[j];
                }
            }
        }
        let total: f64 = w.as_slice().iter().map(|x| x * x).sum();
        (total - captured).max(0.0).sqrt()
    }

    #[test]
    fn rank_out_of_range() {
        assert!(matches!(truncated_svd(&Matrix::zeros(3, 5), 4), Err(Error::Config(_))));
    }

    #[test]
    fn rank_zero_is_empty() {
        let lr = truncated_svd(&random(4, 6, 1), 0).unwrap();
        assert_eq!(lr.l1.shape(), (4, 0));
        assert_eq!(lr.l2.shape(), (0, 6));
        assert_eq!(lr.product(), Matrix::zeros(4, 6));
    }

    #[test]
    fn rank_one_recovered_exactly() {
        let u: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin() + 0.2).collect();
        let v: Vec<f64> = (0..9).map(|i| (i as f64 * 0.91).cos()).collect();
        let w = Matrix::from_fn(12, 9, |i, j| u[i] * v[j]).unwrap();
        let lr = truncated_svd(&w, 1).unwrap();
        assert!(residual(&w, &lr) < 1e-9);
    }

    #[test]
    fn full_rank_recovery() {
        let w = random(10, 7, 2);
        assert!(residual(&w, &truncated_svd(&w, 7).unwrap()) < 1e-8);
        let big = random(128, 160, 3);
        assert!(residual(&big, &truncated_svd(&big, 128).unwrap()) < 1e-8);
    }

    #[test]
    fn matches_power_deflation_oracle() {
        let w = random(16, 16, 4);
        let got = residual(&w, &truncated_svd(&w, 4).unwrap());
        let oracle = power_deflation_residual(&w, 4);
        assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn factor_shapes_and_orthonormal_rows() {
        let w = random(20, 12, 5);
        let lr = truncated_svd(&w, 3).unwrap();
        assert_eq!(lr.l1.shape(), (20, 3));
        assert_eq!(lr.l2.shape(), (3, 12));
        let vvt = matmul(&lr.l2, &lr.l2.transpose()).unwrap();
        assert!(vvt.max_abs_diff(&Matrix::identity(3)).unwrap() < 1e-12);
    }

    #[test]
    fn subspace_path_matches_dense_on_decaying_spectrum() {
        // 256 x 200 with a geometric spectrum so the iteration converges fully.
        let (m, n) = (256, 200);
        let u = orthonormalize(&random(m, n, 6));
        let v = orthonormalize(&random(n, n, 7));
        let sigma: Vec<f64> = (0..n).map(|i| 0.93f64.powi(i as i32)).collect();
        let w = matmul(&u.scale_columns(&sigma).unwrap(), &v.transpose()).unwrap();
        let r = 16;
        let dense = {
            let (l1, l2, _) = dense_factors(&to_na(&w), r).unwrap();
            residual(&w, &LowRank { l1, l2 })
        };
        let mut solver = TruncatedSvd::new(r);
        let got = residual(&w, &solver.factor(&w).unwrap());
        assert!(solver.last_iters > 0);
        assert!((got - dense).abs() <= 1e-6 * dense, "{got} vs {dense}");
    }

    #[test]
    fn subspace_path_on_flat_spectrum_is_close() {
        let w = random(200, 180, 8);
        let r = 8;
        let (l1, l2, _) = dense_factors(&to_na(&w), r).unwrap();
        let dense = residual(&w, &LowRank { l1, l2 });
        let got = residual(&w, &truncated_svd(&w, r).unwrap());
        assert!(got >= dense * (1.0 - 1e-12));
        assert!((got - dense) <= 1e-6 * dense, "{got} vs {dense}");
    }

    #[test]
    fn warm_start_reuses_basis() {
        let w = random(200, 180, 9);
        let mut solver = TruncatedSvd::new(8);
        solver.factor(&w).unwrap();
        let cold = solver.last_iters;
        solver.factor(&w).unwrap();
        assert!(solver.last_iters < cold, "{} !< {cold}", solver.last_iters);
    }
}
