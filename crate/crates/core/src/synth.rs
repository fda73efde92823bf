//! Synthetic ground truth and observation masks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense_io;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, tag};
use crate::sparse_io::{ObservedMatrix, Triplet};

const ZIPF_EXPONENT: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GaussianTruncated,
    CommonMeans,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::GaussianTruncated => "gaussian-truncated",
            ModelKind::CommonMeans => "common-means",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-truncated" => Ok(ModelKind::GaussianTruncated),
            "common-means" => Ok(ModelKind::CommonMeans),
            other => Err(Error::InvalidParameter(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Everything needed to regenerate a model bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
    pub r: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub mu_target: Option<f64>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn generate(&self) -> Result<SyntheticModel> {
        match self.kind {
            ModelKind::GaussianTruncated => generate_gaussian_truncated(self.n, self.d, self.r, self.seed),
            ModelKind::CommonMeans => {
                generate_common_means(self.n, self.d, self.r, self.mu_target, self.noise_sigma, self.seed)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub config: ModelConfig,
    /// `d x r` factors with `T = U U^T` in the noiseless case.
    pub factors: DMatrix<f64>,
    /// Factor index of every row (common-means only).
    pub assignments: Option<Vec<usize>>,
    /// The `r` row prototypes `u_s` as columns (common-means only).
    pub centers: Option<DMatrix<f64>>,
    /// Dense `n x d` ground truth.
    pub m: DMatrix<f64>,
    /// `M^T M / n`.
    pub t: DMatrix<f64>,
    pub coherence: f64,
    pub condition_number: f64,
}

impl SyntheticModel {
    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn r(&self) -> usize {
        self.config.r
    }

    /// Write `model.json`, `m.bin` and `factors.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let summary = ModelSummary {
            config: self.config.clone(),
            coherence: self.coherence,
            condition_number: self.condition_number,
        };
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&summary)?)?;
        dense_io::save_dense(&dir.join("m.bin"), &self.m)?;
        dense_io::save_dense(&dir.join("factors.bin"), &self.factors)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub coherence: f64,
    pub condition_number: f64,
}

fn second_moment(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows().max(1) as f64;
    let mut t = linalg::at_b(m, m) / n;
    symmetrize(&mut t);
    t
}

fn symmetrize(t: &mut DMatrix<f64>) {
    for i in 0..t.nrows() {
        for j in i + 1..t.ncols() {
            let v = t[(i, j)];
            t[(j, i)] = v;
        }
    }
}

fn factor_condition_number(u: &DMatrix<f64>) -> f64 {
    let gram = linalg::at_b(u, u);
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Entries i.i.d. `N(1/sqrt(d), 1/d)`, then projected onto the top-`r` right
/// singular subspace.
pub fn generate_gaussian_truncated(n: usize, d: usize, r: usize, seed: u64) -> Result<SyntheticModel> {
    if r == 0 || r > n.min(d) {
        return Err(Error::InvalidParameter(format!("need 1 <= r <= min(n, d), got r={r} n={n} d={d}")));
    }
    let mean = 1.0 / (d as f64).sqrt();
    let sd = mean;
    let base = rng::derive_seed(seed, tag::ROWS);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::stream_rng(base, i as u64);
            (0..d).map(|_| mean + sd * rng::standard_normal(&mut g)).collect()
        })
        .collect();
    let raw = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    drop(rows);
    let gram = linalg::at_b(&raw, &raw);
    let eig = linalg::top_eigen_dense(&gram, d);
    let v = eig.vectors.columns(0, r).into_owned();
    let m = if r == d { raw } else { &raw * &v * v.transpose() };
    let mut factors = v;
    for k in 0..r {
        let s = (eig.values[k].max(0.0) / n as f64).sqrt();
        factors.column_mut(k).scale_mut(s);
    }
    let t = second_moment(&m);
    let coherence = coherence(&factors)?;
    let condition_number = factor_condition_number(&factors);
    Ok(SyntheticModel {
        config: ModelConfig {
            kind: ModelKind::GaussianTruncated,
            n,
            d,
            r,
            noise_sigma: 0.0,
            mu_target: None,
            seed,
        },
        factors,
        assignments: None,
        centers: None,
        m,
        t,
        coherence,
        condition_number,
    })
}

fn cap_coherence(u: &mut DMatrix<f64>, target: f64) -> Result<()> {
    let (d, r) = (u.nrows() as f64, u.ncols() as f64);
    for _ in 0..200 {
        if coherence(u)? <= target * (1.0 + 1e-9) {
            return Ok(());
        }
        let cap = (target * r * u.norm_squared() / d).sqrt();
        for i in 0..u.nrows() {
            let norm = u.row(i).norm();
            if norm > cap {
                u.row_mut(i).scale_mut(cap / norm);
            }
        }
    }
    Ok(())
}

/// Rows drawn uniformly from `r` Gaussian factor vectors, plus optional
/// `N(0, sigma^2 / d)` entrywise noise.
pub fn generate_common_means(
    n: usize,
    d: usize,
    r: usize,
    mu_target: Option<f64>,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticModel> {
    if r == 0 || r > d {
        return Err(Error::InvalidParameter(format!("need 1 <= r <= d, got r={r} d={d}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    if let Some(mu) = mu_target {
        if !(mu >= 1.0 / r as f64) {
            return Err(Error::InvalidParameter(format!(
                "coherence target {mu} is below the attainable minimum 1/r"
            )));
        }
    }
    let mut g = rng::stream_rng(rng::derive_seed(seed, tag::FACTORS), 0);
    let sd = 1.0 / (d as f64).sqrt();
    let scale = 1.0 / (r as f64).sqrt();
    let mut factors = DMatrix::from_fn(d, r, |_, _| sd * rng::standard_normal(&mut g) * scale);
    if let Some(mu) = mu_target {
        cap_coherence(&mut factors, mu)?;
    }
    let means = &factors / scale;
    let noise_sd = noise_sigma / (d as f64).sqrt();
    let base = rng::derive_seed(seed, tag::ROWS);
    let rows: Vec<(usize, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::stream_rng(base, i as u64);
            let s = g.random_range(0..r);
            let row = (0..d)
                .map(|j| {
                    let noise = if noise_sd > 0.0 {
                        noise_sd * rng::standard_normal(&mut g)
                    } else {
                        0.0
                    };
                    means[(j, s)] + noise
                })
                .collect();
            (s, row)
        })
        .collect();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i].1[j]);
    let assignments: Vec<usize> = rows.into_iter().map(|(s, _)| s).collect();
    let t = second_moment(&m);
    let coherence = coherence(&factors)?;
    let condition_number = factor_condition_number(&factors);
    Ok(SyntheticModel {
        config: ModelConfig {
            kind: ModelKind::CommonMeans,
            n,
            d,
            r,
            noise_sigma,
            mu_target,
            seed,
        },
        factors,
        assignments: Some(assignments),
        centers: Some(means),
        m,
        t,
        coherence,
        condition_number,
    })
}

/// `(d / r) * max_i ||U_i||^2 / ||U||_F^2`.
pub fn coherence(u: &DMatrix<f64>) -> Result<f64> {
    let total = u.norm_squared();
    if total == 0.0 {
        return Err(Error::InvalidParameter("coherence of a zero matrix".into()));
    }
    let max_row = u
        .row_iter()
        .map(|row| row.norm_squared())
        .fold(0.0, f64::max);
    Ok(u.nrows() as f64 / u.ncols() as f64 * max_row / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingScheme {
    /// Each cell independently with probability `p`.
    UniformP { p: f64, seed: u64 },
    /// Exactly `c` distinct columns per row.
    FixedC { c: usize, seed: u64 },
    /// Row `i` observed at rate proportional to `c / d` times its activity.
    Snowball { c: f64, seed: u64 },
}

impl SamplingScheme {
    pub fn seed(&self) -> u64 {
        match *self {
            SamplingScheme::UniformP { seed, .. }
            | SamplingScheme::FixedC { seed, .. }
            | SamplingScheme::Snowball { seed, .. } => seed,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match *self {
            SamplingScheme::UniformP { p, .. } if !(p > 0.0 && p < 1.0) => {
                Err(Error::InvalidParameter(format!("uniform sampling needs 0 < p < 1, got {p}")))
            }
            SamplingScheme::FixedC { c, .. } if c == 0 || c > d => Err(Error::InvalidParameter(format!(
                "fixed-c sampling needs 1 <= C <= d = {d}, got {c}"
            ))),
            SamplingScheme::Snowball { c, .. } if !(c > 0.0) => {
                Err(Error::InvalidParameter(format!("snowball sampling needs C > 0, got {c}")))
            }
            _ => Ok(()),
        }
    }
}

/// Heavy-tailed row activity levels in `1..=d`, normalized to mean one.
pub fn snowball_profile(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let zipf = Zipf::new(d.max(1) as f64, ZIPF_EXPONENT).expect("valid Zipf parameters");
    let mut g = rng::stream_rng(rng::derive_seed(seed, tag::PROFILE), 0);
    let raw: Vec<f64> = (0..n).map(|_| zipf.sample(&mut g)).collect();
    let mean = raw.iter().sum::<f64>() / n.max(1) as f64;
    raw.into_iter().map(|a| a / mean).collect()
}

/// Columns observed in row `i` of an `n x d` matrix under `scheme`.
fn row_columns(scheme: &SamplingScheme, base: u64, i: usize, d: usize, rate: f64) -> Vec<usize> {
    let mut g = rng::stream_rng(base, i as u64);
    match *scheme {
        SamplingScheme::UniformP { p, .. } => rng::bernoulli_indices(&mut g, d, p),
        SamplingScheme::FixedC { c, .. } => {
            let mut cols = index::sample(&mut g, d, c).into_vec();
            cols.sort_unstable();
            cols
        }
        SamplingScheme::Snowball { .. } => rng::bernoulli_indices(&mut g, d, rate),
    }
}

/// Observe the dense ground truth of `model` through `scheme`.
pub fn sample_mask(model: &SyntheticModel, scheme: &SamplingScheme) -> Result<ObservedMatrix> {
    observe_dense(&model.m, scheme)
}

/// Observe an arbitrary dense matrix through `scheme`.
pub fn observe_dense(m: &DMatrix<f64>, scheme: &SamplingScheme) -> Result<ObservedMatrix> {
    let (n, d) = m.shape();
    scheme.validate(d)?;
    let rates = match *scheme {
        SamplingScheme::Snowball { c, seed } => snowball_profile(n, d, seed)
            .into_iter()
            .map(|a| (c * a / d as f64).min(1.0))
            .collect(),
        _ => vec![0.0; n],
    };
    let base = rng::derive_seed(scheme.seed(), tag::MASK);
    let rows: Vec<Vec<Triplet>> = (0..n)
        .into_par_iter()
        .map(|i| {
            row_columns(scheme, base, i, d, rates[i])
                .into_iter()
                .map(|j| Triplet::new(i, j, m[(i, j)]))
                .collect()
        })
        .collect();
    ObservedMatrix::new(n, d, rows.into_iter().flatten().collect())
}

/// Snowball subsampling of already-sparse data: each observed entry of row
/// `i` is kept with probability `min(1, c * nnz_i / d)`.
pub fn snowball_subsample(m: &ObservedMatrix, c: f64, seed: u64) -> Result<ObservedMatrix> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("snowball sampling needs C > 0, got {c}")));
    }
    let d = m.n_cols().max(1) as f64;
    let base = rng::derive_seed(seed, tag::MASK);
    let mut kept = Vec::new();
    for (i, row) in m.rows() {
        let rate = (c * row.len() as f64 / d).min(1.0);
        let mut g = rng::stream_rng(base, i as u64);
        kept.extend(rng::bernoulli_indices(&mut g, row.len(), rate).into_iter().map(|k| row[k]));
    }
    ObservedMatrix::new(m.n_rows(), m.n_cols(), kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coherence_examples() {
        let flat = DMatrix::from_element(8, 1, 0.3);
        assert!((coherence(&flat).unwrap() - 1.0).abs() < 1e-12);
        let flat = DMatrix::from_element(8, 4, 0.3);
        assert!((coherence(&flat).unwrap() - 0.25).abs() < 1e-12);
        let mut spike = DMatrix::zeros(7, 1);
        spike[(0, 0)] = 1.0;
        assert!((coherence(&spike).unwrap() - 7.0).abs() < 1e-12);
        assert!(coherence(&DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn coherence_brute_force() {
        let mut g = rng::stream_rng(4, 0);
        let u = DMatrix::from_fn(50, 5, |_, _| rng::standard_normal(&mut g));
        let mut total = 0.0;
        let mut best: f64 = 0.0;
        for i in 0..50 {
            let mut row = 0.0;
            for k in 0..5 {
                row += u[(i, k)] * u[(i, k)];
            }
            total += row;
            best = best.max(row);
        }
        let want = 50.0 / 5.0 * best / total;
        assert!((coherence(&u).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn truncation_is_identity_at_full_rank() {
        let a = generate_gaussian_truncated(6, 4, 4, 3).unwrap();
        let mean = 1.0 / 2.0;
        let base = rng::derive_seed(3, tag::ROWS);
        let mut g = rng::stream_rng(base, 0);
        let first: f64 = mean + mean * rng::standard_normal(&mut g);
        assert!((a.m[(0, 0)] - first).abs() < 1e-10);
    }

    #[test]
    fn truncation_tail_vanishes() {
        let model = generate_gaussian_truncated(60, 30, 3, 5).unwrap();
        let sv = model.m.clone().singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!(s[3] < 1e-10 * s[0]);
        let t = &model.factors * model.factors.transpose();
        assert!((t - &model.t).amax() < 1e-10);
    }

    #[test]
    fn common_means_rows_are_factors() {
        let model = generate_common_means(40, 10, 3, None, 0.0, 8).unwrap();
        let a = model.assignments.as_ref().unwrap();
        let u = model.centers.as_ref().unwrap();
        for i in 0..40 {
            for j in 0..10 {
                assert_eq!(model.m[(i, j)], u[(j, a[i])]);
            }
        }
        assert!((u / 3f64.sqrt() - &model.factors).amax() < 1e-15);
        let single = generate_common_means(5, 4, 1, None, 0.0, 1).unwrap();
        let u = &single.factors;
        assert!((u * u.transpose() - &single.t).amax() < 1e-12);
    }

    #[test]
    fn coherence_target_is_met() {
        let model = generate_common_means(10, 200, 4, Some(1.5), 0.0, 2).unwrap();
        assert!(model.coherence <= 1.5 * (1.0 + 1e-9));
        assert!((coherence(&model.factors).unwrap() - model.coherence).abs() < 1e-12);
        assert!(generate_common_means(10, 20, 2, Some(0.4), 0.0, 2).is_err());
    }

    #[test]
    fn fixed_c_rows() {
        let model = generate_common_means(50, 12, 2, None, 0.1, 1).unwrap();
        let m = sample_mask(&model, &SamplingScheme::FixedC { c: 2, seed: 3 }).unwrap();
        assert!(m.rows().all(|(_, r)| r.len() == 2));
        let full = sample_mask(&model, &SamplingScheme::FixedC { c: 12, seed: 3 }).unwrap();
        assert_eq!(full.nnz(), 600);
        assert!(sample_mask(&model, &SamplingScheme::FixedC { c: 13, seed: 3 }).is_err());
        assert!(sample_mask(&model, &SamplingScheme::UniformP { p: 1.0, seed: 3 }).is_err());
    }

    #[test]
    fn masks_are_deterministic() {
        let model = generate_common_means(30, 10, 2, None, 0.0, 1).unwrap();
        for scheme in [
            SamplingScheme::UniformP { p: 0.3, seed: 9 },
            SamplingScheme::FixedC { c: 3, seed: 9 },
            SamplingScheme::Snowball { c: 2.0, seed: 9 },
        ] {
            let a = sample_mask(&model, &scheme).unwrap();
            let b = sample_mask(&model, &scheme).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn snowball_subsample_keeps_subset() {
        let model = generate_common_means(30, 10, 2, None, 0.0, 1).unwrap();
        let full = sample_mask(&model, &SamplingScheme::FixedC { c: 10, seed: 0 }).unwrap();
        let sub = snowball_subsample(&full, 0.5, 4).unwrap();
        assert!(sub.nnz() < full.nnz());
        assert!(sub.triplets().iter().all(|t| full.get(t.row, t.col) == Some(t.value)));
    }
}
