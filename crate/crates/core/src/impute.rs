//! Row imputation by projection onto the leading subspace of a recovered
//! second-moment matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{self, GdConfig, GdOutput, LossConfig};
use crate::linalg;
use crate::privacy;
use crate::sparse_io::{ObservedMatrix, Triplet};

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Above this rank the per-row systems are solved by SVD instead of the
/// normal equations.
const NORMAL_EQUATIONS_MAX_RANK: usize = 64;

#[derive(Debug, Clone)]
pub struct Subspace {
    /// `d x r`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Magnitudes of the kept eigenvalues, descending.
    pub singular_values: Vec<f64>,
    /// How many kept eigenvalues were negative.
    pub negative_eigenvalues: usize,
}

impl Subspace {
    pub fn d(&self) -> usize {
        self.basis.nrows()
    }

    pub fn r(&self) -> usize {
        self.basis.ncols()
    }
}

/// Leading `r` eigenvectors of a symmetric matrix, ranked by magnitude.
pub fn top_r_svd(z: &DMatrix<f64>, r: usize, seed: u64) -> Result<Subspace> {
    let d = z.nrows();
    if !z.is_square() {
        return Err(Error::DimensionMismatch(format!("Z is {}x{}", z.nrows(), z.ncols())));
    }
    if r == 0 || r > d {
        return Err(Error::InvalidParameter(format!("need 1 <= r <= d = {d}, got {r}")));
    }
    let scale = z.amax().max(f64::MIN_POSITIVE);
    for i in 0..d {
        for j in i + 1..d {
            if (z[(i, j)] - z[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidParameter("Z must be symmetric".into()));
            }
        }
    }
    let pairs = linalg::top_eigen(z, r, seed)?;
    Ok(Subspace {
        basis: pairs.vectors,
        negative_eigenvalues: pairs.values.iter().filter(|&&v| v < 0.0).count(),
        singular_values: pairs.values.iter().map(|v| v.abs()).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct ImputedRows {
    pub row_ids: Vec<usize>,
    /// `k x r`, one row of coefficients `q` per requested row.
    pub coefficients: DMatrix<f64>,
    pub basis: DMatrix<f64>,
    /// Requested rows without a single observation (zero coefficients).
    pub empty_rows: Vec<usize>,
    /// Rows whose unregularized system was singular and were solved by
    /// pseudo-inverse.
    pub pseudo_inverse_rows: Vec<usize>,
}

impl ImputedRows {
    /// `coefficients * basis^T`, `k x d`.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.coefficients * self.basis.transpose()
    }

    /// Imputed value for the `k`-th requested row at column `col`.
    pub fn predict(&self, k: usize, col: usize) -> f64 {
        self.coefficients.row(k).dot(&self.basis.row(col))
    }
}

enum RowSolve {
    Empty,
    Solved(DVector<f64>),
    PseudoInverse(DVector<f64>),
}

fn solve_row(obs: &[Triplet], basis: &DMatrix<f64>, ridge: f64) -> RowSolve {
    let r = basis.ncols();
    if obs.is_empty() {
        return RowSolve::Empty;
    }
    let a = DMatrix::from_fn(obs.len(), r, |k, c| basis[(obs[k].col, c)]);
    let b = DVector::from_iterator(obs.len(), obs.iter().map(|t| t.value));
    if r <= NORMAL_EQUATIONS_MAX_RANK {
        let mut g = a.transpose() * &a;
        for k in 0..r {
            g[(k, k)] += ridge;
        }
        let rhs = a.transpose() * &b;
        if let Some(ch) = g.clone().cholesky() {
            let q = ch.solve(&rhs);
            if q.iter().all(|v| v.is_finite()) && (ridge > 0.0 || well_conditioned(&g)) {
                return RowSolve::Solved(q);
            }
        }
        if ridge > 0.0 {
            if let Some(q) = g.lu().solve(&rhs) {
                return RowSolve::Solved(q);
            }
        }
    } else if ridge > 0.0 {
        let mut stacked = DMatrix::zeros(obs.len() + r, r);
        stacked.rows_mut(0, obs.len()).copy_from(&a);
        for k in 0..r {
            stacked[(obs.len() + k, k)] = ridge.sqrt();
        }
        let mut rhs = DVector::zeros(obs.len() + r);
        rhs.rows_mut(0, obs.len()).copy_from(&b);
        if let Ok(q) = stacked.svd(true, true).solve(&rhs, 0.0) {
            return RowSolve::Solved(q);
        }
    }
    let svd = a.svd(true, true);
    let tol = svd.singular_values.max() * obs.len().max(r) as f64 * f64::EPSILON;
    let full_rank = svd.singular_values.iter().filter(|&&s| s > tol).count() == r;
    match svd.solve(&b, tol) {
        Ok(q) if full_rank => RowSolve::Solved(q),
        Ok(q) => RowSolve::PseudoInverse(q),
        Err(_) => RowSolve::PseudoInverse(DVector::zeros(r)),
    }
}

fn well_conditioned(g: &DMatrix<f64>) -> bool {
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    max > 0.0 && min > max * 1e-12
}

/// Per-row `argmin_q sum_j (<q, U_j> - M_ij)^2 + ridge ||q||^2` over the
/// observed columns of each requested row.
pub fn least_squares_rows(m: &ObservedMatrix, sub: &Subspace, rows: &[usize], ridge: f64) -> Result<ImputedRows> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {ridge}")));
    }
    if sub.d() != m.n_cols() {
        return Err(Error::DimensionMismatch(format!(
            "subspace has d = {}, matrix has {} columns",
            sub.d(),
            m.n_cols()
        )));
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= m.n_rows()) {
        return Err(Error::IndexOutOfRange { row: bad, col: 0, n_rows: m.n_rows(), n_cols: m.n_cols() });
    }
    let r = sub.r();
    let solved: Vec<RowSolve> = rows
        .par_iter()
        .map(|&i| solve_row(m.row(i), &sub.basis, ridge))
        .collect();
    let mut coefficients = DMatrix::zeros(rows.len(), r);
    let mut empty_rows = Vec::new();
    let mut pseudo_inverse_rows = Vec::new();
    for (k, (s, &i)) in solved.into_iter().zip(rows).enumerate() {
        match s {
            RowSolve::Empty => empty_rows.push(i),
            RowSolve::Solved(q) => coefficients.row_mut(k).copy_from(&q.transpose()),
            RowSolve::PseudoInverse(q) => {
                pseudo_inverse_rows.push(i);
                coefficients.row_mut(k).copy_from(&q.transpose());
            }
        }
    }
    Ok(ImputedRows {
        row_ids: rows.to_vec(),
        coefficients,
        basis: sub.basis.clone(),
        empty_rows,
        pseudo_inverse_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeConfig {
    pub rank: usize,
    pub ridge: f64,
    /// Gaussian noise added to observed values before estimation.
    pub dp_sigma: Option<f64>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ImputeOutput {
    pub rows: ImputedRows,
    pub subspace: Subspace,
    pub gd: GdOutput,
    pub rmse: Option<f64>,
}

/// Root mean squared error of `rows` on `holdout` cells. Cells in rows that
/// were not imputed are skipped.
pub fn holdout_rmse(rows: &ImputedRows, holdout: &[Triplet]) -> Option<f64> {
    let mut position = std::collections::HashMap::new();
    for (k, &i) in rows.row_ids.iter().enumerate() {
        position.insert(i, k);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in holdout {
        if let Some(&k) = position.get(&t.row) {
            let e = rows.predict(k, t.col) - t.value;
            sum += e * e;
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

/// Hajek-GD, leading subspace of the recovered matrix, then per-row least
/// squares for every row of `m`.
pub fn impute_pipeline(
    m: &ObservedMatrix,
    cfg: &ImputeConfig,
    gd: &GdConfig,
    loss_cfg: Option<LossConfig>,
    holdout: Option<&[Triplet]>,
) -> Result<ImputeOutput> {
    if cfg.rank == 0 {
        return Err(Error::InvalidParameter("rank must be at least 1".into()));
    }
    let noised;
    let input = match cfg.dp_sigma {
        Some(sigma) if sigma != 0.0 => {
            noised = privacy::add_gaussian_noise(m, sigma, cfg.noise_seed)?;
            &noised
        }
        _ => m,
    };
    let gd_out = landscape::hajek_gd(input, cfg.rank, gd, loss_cfg)?;
    let subspace = top_r_svd(&gd_out.recovered.values, cfg.rank, gd.seed)?;
    let all: Vec<usize> = (0..m.n_rows()).collect();
    let rows = least_squares_rows(input, &subspace, &all, cfg.ridge)?;
    let rmse = holdout.and_then(|h| holdout_rmse(&rows, h));
    Ok(ImputeOutput { rows, subspace, gd: gd_out, rmse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn diagonal_subspace() {
        let z = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let s = top_r_svd(&z, 2, 0).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0]);
        assert!((s.basis[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((s.basis[(1, 1)].abs() - 1.0).abs() < 1e-12);
        assert_eq!(s.negative_eigenvalues, 0);
    }

    #[test]
    fn rank_one_subspace() {
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let z = &u * u.transpose();
        let s = top_r_svd(&z, 1, 0).unwrap();
        assert!((s.singular_values[0] - u.norm_squared()).abs() < 1e-12);
        let cos = s.basis.column(0).dot(&u).abs() / u.norm();
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_eigenvalues_are_flagged() {
        let z = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -4.0, 0.5]));
        let s = top_r_svd(&z, 1, 0).unwrap();
        assert_eq!(s.singular_values, vec![4.0]);
        assert_eq!(s.negative_eigenvalues, 1);
        assert!(top_r_svd(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), 1, 0).is_err());
    }

    fn orthonormal(d: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng::stream_rng(seed, 0);
        linalg::orthonormalize(DMatrix::from_fn(d, r, |_, _| rng::standard_normal(&mut g)))
    }

    #[test]
    fn consistent_row_is_recovered() {
        let basis = orthonormal(8, 2, 1);
        let q = DVector::from_vec(vec![1.5, -0.5]);
        let row = &basis * &q;
        let trips = (0..8).map(|j| Triplet::new(0, j, row[j])).collect();
        let m = ObservedMatrix::new(2, 8, trips).unwrap();
        let sub = Subspace { basis, singular_values: vec![1.0, 1.0], negative_eigenvalues: 0 };
        let out = least_squares_rows(&m, &sub, &[0, 1], 0.0).unwrap();
        let rec = out.reconstruction();
        for j in 0..8 {
            assert!((rec[(0, j)] - row[j]).abs() < 1e-10);
        }
        assert_eq!(out.empty_rows, vec![1]);
        assert!(out.coefficients.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn underdetermined_row_uses_pseudo_inverse() {
        let basis = orthonormal(6, 3, 2);
        let m = ObservedMatrix::new(1, 6, vec![Triplet::new(0, 2, 1.0)]).unwrap();
        let sub = Subspace { basis, singular_values: vec![1.0; 3], negative_eigenvalues: 0 };
        let out = least_squares_rows(&m, &sub, &[0], 0.0).unwrap();
        assert_eq!(out.pseudo_inverse_rows, vec![0]);
        assert!((out.predict(0, 2) - 1.0).abs() < 1e-10);
        let ridged = least_squares_rows(&m, &sub, &[0], 1e-3).unwrap();
        assert!(ridged.pseudo_inverse_rows.is_empty());
    }

    #[test]
    fn holdout_rmse_counts_imputed_rows_only() {
        let basis = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let rows = ImputedRows {
            row_ids: vec![3],
            coefficients: DMatrix::from_element(1, 1, 2.0),
            basis,
            empty_rows: vec![],
            pseudo_inverse_rows: vec![],
        };
        let h = [Triplet::new(3, 0, 1.0), Triplet::new(3, 1, 1.0), Triplet::new(4, 0, 9.0)];
        assert_eq!(holdout_rmse(&rows, &h), Some(1.0));
        assert_eq!(holdout_rmse(&rows, &h[2..]), None);
    }
}
