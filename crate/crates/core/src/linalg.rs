//! Dense symmetric eigen-decomposition and SVD helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Above this dimension top-r problems switch from a full dense eigensolve to
/// randomized subspace iteration.
pub const DENSE_EIGEN_MAX_DIM: usize = 1200;

const OVERSAMPLE: usize = 10;

/// `a^T b` through the blocked GEMM path.
pub fn at_b(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b
}

/// Column-orthonormal basis of `a` (thin QR).
pub fn orthonormalize(a: DMatrix<f64>) -> DMatrix<f64> {
    let k = a.ncols().min(a.nrows());
    let q = a.qr().q();
    q.columns(0, k).into_owned()
}

/// Eigen-pairs sorted by descending `|value|`.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: DMatrix<f64>,
}

fn sorted_by_magnitude(values: &DVector<f64>, vectors: &DMatrix<f64>, r: usize) -> EigenPairs {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    order.truncate(r);
    let mut out = DMatrix::zeros(vectors.nrows(), order.len());
    for (k, &src) in order.iter().enumerate() {
        out.set_column(k, &vectors.column(src));
    }
    EigenPairs {
        values: order.iter().map(|&k| values[k]).collect(),
        vectors: out,
    }
}

/// Full dense symmetric eigensolve, keeping the `r` eigen-pairs of largest
/// magnitude.
pub fn top_eigen_dense(z: &DMatrix<f64>, r: usize) -> EigenPairs {
    let eig = SymmetricEigen::new(z.clone());
    sorted_by_magnitude(&eig.eigenvalues, &eig.eigenvectors, r.min(z.nrows()))
}

/// Randomized subspace iteration for the `r` eigen-pairs of largest magnitude.
/// Converged when every kept Ritz value moves by at most `tol * |lambda_1|`
/// in one sweep.
pub fn top_eigen_subspace(
    z: &DMatrix<f64>,
    r: usize,
    tol: f64,
    max_sweeps: usize,
    seed: u64,
) -> Result<EigenPairs> {
    let d = z.nrows();
    let r = r.min(d);
    let k = (r + OVERSAMPLE).min(d);
    let mut rng = rng::stream_rng(seed, 0);
    let mut q = orthonormalize(DMatrix::from_fn(d, k, |_, _| rng::standard_normal(&mut rng)));
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..max_sweeps {
        let zq = z * &q;
        let small = at_b(&q, &zq);
        let small = (&small + small.transpose()) * 0.5;
        let eig = SymmetricEigen::new(small);
        let pairs = sorted_by_magnitude(&eig.eigenvalues, &eig.eigenvectors, k);
        let vals = pairs.values[..r].to_vec();
        let scale = vals.first().map_or(0.0, |v| v.abs()).max(f64::MIN_POSITIVE);
        let done = prev.as_ref().is_some_and(|p| {
            p.iter()
                .zip(&vals)
                .all(|(a, b)| (a - b).abs() <= tol * scale)
        });
        if done {
            let vectors = &q * pairs.vectors.columns(0, r);
            return Ok(EigenPairs { values: vals, vectors });
        }
        prev = Some(vals);
        q = orthonormalize(zq);
    }
    Err(Error::NotConverged {
        what: "subspace iteration",
        iterations: max_sweeps,
    })
}

/// Top-r eigen-pairs by magnitude, choosing the dense or iterative route by size.
pub fn top_eigen(z: &DMatrix<f64>, r: usize, seed: u64) -> Result<EigenPairs> {
    if z.nrows() <= DENSE_EIGEN_MAX_DIM {
        Ok(top_eigen_dense(z, r))
    } else {
        top_eigen_subspace(z, r, 1e-10, 1000, seed)
    }
}

/// Spectral norm of a symmetric matrix by power iteration on `a^2`.
pub fn spectral_norm_sym(a: &DMatrix<f64>, tol: f64, max_iter: usize, seed: u64) -> Result<f64> {
    let d = a.nrows();
    if d == 0 || a.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mut rng = rng::stream_rng(seed, 0);
    let mut v = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..max_iter {
        let av = a * &v;
        let next = av.norm();
        if next == 0.0 {
            return Ok(0.0);
        }
        let w = a * &av;
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(next);
        }
        v = w / wn;
        if (next - est).abs() <= tol * next {
            return Ok(next);
        }
        est = next;
    }
    Err(Error::NotConverged {
        what: "power iteration",
        iterations: max_iter,
    })
}

/// Thin truncated SVD `y ~ u diag(s) v^T`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, &s) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(s);
        }
        us * self.v.transpose()
    }
}

/// Rank-`r` SVD by block power iteration on `y^T y`, optionally warm-started
/// from a previous right basis.
pub fn truncated_svd(
    y: &DMatrix<f64>,
    r: usize,
    warm: Option<&DMatrix<f64>>,
    tol: f64,
    max_sweeps: usize,
    seed: u64,
) -> Result<TruncatedSvd> {
    let d = y.ncols();
    let r = r.min(d).min(y.nrows());
    let k = (r + OVERSAMPLE).min(d);
    let mut rng = rng::stream_rng(seed, 0);
    let mut start = DMatrix::from_fn(d, k, |_, _| rng::standard_normal(&mut rng));
    if let Some(w) = warm {
        let c = w.ncols().min(k);
        start.columns_mut(0, c).copy_from(&w.columns(0, c));
    }
    let mut v = orthonormalize(start);
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..max_sweeps {
        let p = y * &v;
        let g = at_b(&p, &p);
        let g = (&g + g.transpose()) * 0.5;
        let eig = SymmetricEigen::new(g);
        let pairs = sorted_by_magnitude(&eig.eigenvalues, &eig.eigenvectors, k);
        let s: Vec<f64> = pairs.values[..r].iter().map(|&x| x.max(0.0).sqrt()).collect();
        let scale = s.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
        let done = prev
            .as_ref()
            .is_some_and(|q| q.iter().zip(&s).all(|(a, b)| (a - b).abs() <= tol * scale));
        if done || s[0] == 0.0 {
            let e = pairs.vectors.columns(0, r).into_owned();
            let vr = &v * &e;
            let mut u = &p * &e;
            for (c, &sv) in s.iter().enumerate() {
                if sv > 0.0 {
                    u.column_mut(c).unscale_mut(sv);
                } else {
                    u.column_mut(c).fill(0.0);
                }
            }
            return Ok(TruncatedSvd { u, s, v: vr });
        }
        prev = Some(s);
        v = orthonormalize(y.transpose() * p);
    }
    Err(Error::NotConverged {
        what: "truncated SVD",
        iterations: max_sweeps,
    })
}
