//! Second-moment estimation on the co-occurrence support.
//!
//! For an observed matrix with mask `I`, the co-occurrence matrix `I^T I`
//! counts, for every column pair, the rows in which both columns are observed.
//! Its non-zero pattern `Omega` is where the empirical second moment carries
//! information. The Hajek estimator divides each empirical moment by its
//! observed count; the Horvitz-Thompson estimator divides by the expected
//! count (`n p` on the diagonal, `n p^2` off it).

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::sparse_io::ObservedMatrix;

/// Default ceiling on the number of within-row column pairs enumerated while
/// building co-occurrence counts.
pub const DEFAULT_PAIR_CAP: u64 = 2_000_000_000;

/// Largest dimension accepted when decoding an estimate file.
pub const MAX_ESTIMATE_DIM: usize = 1 << 24;

/// Pairs tables up to this many cells are accumulated densely.
const DENSE_PAIR_CELLS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCount {
    pub i: usize,
    pub j: usize,
    pub count: u64,
}

/// Co-occurrence counts `I^T I`: diagonal column counts plus the upper
/// triangle of non-zero off-diagonal counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Cooccurrence {
    d: usize,
    n_rows: usize,
    diag_counts: Vec<u64>,
    pairs: Vec<PairCount>,
}

impl Cooccurrence {
    /// Assemble from explicit counts. Pairs must satisfy `i < j < d`, carry a
    /// positive count, and be unique; they are sorted on return.
    pub fn from_parts(
        d: usize,
        n_rows: usize,
        diag_counts: Vec<u64>,
        mut pairs: Vec<PairCount>,
    ) -> Result<Self> {
        if diag_counts.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "{} diagonal counts for d = {d}",
                diag_counts.len()
            )));
        }
        if let Some(p) = pairs.iter().find(|p| p.i >= p.j || p.j >= d || p.count == 0) {
            return Err(Error::InvalidParameter(format!(
                "bad pair ({}, {}) count {}",
                p.i, p.j, p.count
            )));
        }
        pairs.sort_unstable_by_key(|p| (p.i, p.j));
        if let Some(w) = pairs.windows(2).find(|w| (w[0].i, w[0].j) == (w[1].i, w[1].j)) {
            return Err(Error::DuplicateEntry {
                row: w[0].i,
                col: w[0].j,
            });
        }
        Ok(Cooccurrence {
            d,
            n_rows,
            diag_counts,
            pairs,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn diag_counts(&self) -> &[u64] {
        &self.diag_counts
    }

    /// Non-zero off-diagonal counts with `i < j`, sorted.
    pub fn pairs(&self) -> &[PairCount] {
        &self.pairs
    }

    /// `(I^T I)_{ij}`, symmetric in its arguments.
    pub fn count(&self, i: usize, j: usize) -> u64 {
        if i == j {
            return self.diag_counts[i];
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pairs
            .binary_search_by_key(&(a, b), |p| (p.i, p.j))
            .map_or(0, |k| self.pairs[k].count)
    }

    pub fn in_omega(&self, i: usize, j: usize) -> bool {
        self.count(i, j) > 0
    }

    /// Number of ordered index pairs in `Omega`, diagonal included.
    pub fn omega_len(&self) -> usize {
        self.diag_counts.iter().filter(|&&c| c > 0).count() + 2 * self.pairs.len()
    }

    /// Off-diagonal neighbours of `i` in `Omega` (the set `S_i`).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .pairs
            .iter()
            .filter_map(|p| {
                if p.i == i {
                    Some(p.j)
                } else if p.j == i {
                    Some(p.i)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }
}

struct Accumulated {
    diag_count: Vec<u64>,
    diag_sum: Vec<f64>,
    // (i, j, count, sum of products), i < j, sorted
    pairs: Vec<(usize, usize, u64, f64)>,
}

fn projected_pairs(m: &ObservedMatrix) -> u128 {
    m.rows()
        .map(|(_, r)| {
            let k = r.len() as u128;
            k * k.saturating_sub(1) / 2
        })
        .sum()
}

/// Single pass over rows in ascending order; every per-cell sum therefore
/// accumulates in row order regardless of the storage used.
fn accumulate(m: &ObservedMatrix, cap: u64) -> Result<Accumulated> {
    let projected = projected_pairs(m);
    if projected > cap as u128 {
        return Err(Error::PairCapExceeded { projected, cap });
    }
    let d = m.n_cols();
    let mut diag_count = vec![0u64; d];
    let mut diag_sum = vec![0.0; d];
    for t in m.triplets() {
        diag_count[t.col] += 1;
        diag_sum[t.col] += t.value * t.value;
    }
    let dense = d.checked_mul(d).is_some_and(|c| c <= DENSE_PAIR_CELLS);
    let pairs = if dense {
        let mut count = vec![0u64; d * d];
        let mut sum = vec![0.0; d * d];
        for (_, row) in m.rows() {
            for (a, ta) in row.iter().enumerate() {
                let base = ta.col * d;
                for tb in &row[a + 1..] {
                    count[base + tb.col] += 1;
                    sum[base + tb.col] += ta.value * tb.value;
                }
            }
        }
        let mut out = Vec::new();
        for i in 0..d {
            for j in i + 1..d {
                let c = count[i * d + j];
                if c > 0 {
                    out.push((i, j, c, sum[i * d + j]));
                }
            }
        }
        out
    } else {
        let mut map: HashMap<(usize, usize), (u64, f64)> = HashMap::new();
        for (_, row) in m.rows() {
            for (a, ta) in row.iter().enumerate() {
                for tb in &row[a + 1..] {
                    let e = map.entry((ta.col, tb.col)).or_insert((0, 0.0));
                    e.0 += 1;
                    e.1 += ta.value * tb.value;
                }
            }
        }
        let mut out: Vec<_> = map.into_iter().map(|((i, j), (c, s))| (i, j, c, s)).collect();
        out.sort_unstable_by_key(|e| (e.0, e.1));
        out
    };
    Ok(Accumulated {
        diag_count,
        diag_sum,
        pairs,
    })
}

/// Co-occurrence counts of `m`, with the default pair cap.
pub fn cooccurrence(m: &ObservedMatrix) -> Result<Cooccurrence> {
    cooccurrence_with_cap(m, DEFAULT_PAIR_CAP)
}

/// Co-occurrence counts; fails before allocating when the rows would emit
/// more than `cap` column pairs.
pub fn cooccurrence_with_cap(m: &ObservedMatrix, cap: u64) -> Result<Cooccurrence> {
    let acc = accumulate(m, cap)?;
    Ok(Cooccurrence {
        d: m.n_cols(),
        n_rows: m.n_rows(),
        diag_counts: acc.diag_count,
        pairs: acc
            .pairs
            .into_iter()
            .map(|(i, j, count, _)| PairCount { i, j, count })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "hajek")]
    Hajek,
    #[serde(rename = "ht")]
    HorvitzThompson,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Hajek => "hajek",
            EstimatorKind::HorvitzThompson => "ht",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hajek" => Ok(EstimatorKind::Hajek),
            "ht" | "horvitz-thompson" => Ok(EstimatorKind::HorvitzThompson),
            other => Err(Error::InvalidParameter(format!("unknown estimator '{other}'"))),
        }
    }
}

/// A symmetric second-moment estimate stored only on `Omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMomentEstimate {
    d: usize,
    n_rows: Option<usize>,
    diag: Vec<Option<f64>>,
    offdiag: Vec<(usize, usize, f64)>,
    kind: EstimatorKind,
    p: f64,
    q: f64,
}

impl SecondMomentEstimate {
    /// Assemble from parts. Off-diagonal entries need `i < j < d` and are
    /// sorted on return. When `n_rows` is known, `q` must agree with
    /// `1 - (1 - p^2)^n` to 1e-12.
    pub fn from_parts(
        d: usize,
        n_rows: Option<usize>,
        diag: Vec<Option<f64>>,
        mut offdiag: Vec<(usize, usize, f64)>,
        kind: EstimatorKind,
        p: f64,
        q: f64,
    ) -> Result<Self> {
        if diag.len() != d {
            return Err(Error::DimensionMismatch(format!("{} diagonal slots for d = {d}", diag.len())));
        }
        if !(p > 0.0 && p <= 1.0) || !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidParameter(format!("need p, q in (0, 1], got p={p} q={q}")));
        }
        if let Some(n) = n_rows {
            let expect = offdiag_probability(n, p);
            if (expect - q).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "q = {q} inconsistent with p = {p}, n = {n} (expected {expect})"
                )));
            }
        }
        if let Some(&(i, j, _)) = offdiag.iter().find(|e| e.0 >= e.1 || e.1 >= d) {
            return Err(Error::InvalidParameter(format!("bad off-diagonal index ({i}, {j})")));
        }
        offdiag.sort_unstable_by_key(|e| (e.0, e.1));
        if let Some(w) = offdiag.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::DuplicateEntry { row: w[0].0, col: w[0].1 });
        }
        Ok(SecondMomentEstimate { d, n_rows, diag, offdiag, kind, p, q })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_rows(&self) -> Option<usize> {
        self.n_rows
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    /// Sampling probability the estimate was formed with (true or estimated).
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Off-diagonal observation probability `1 - (1 - p^2)^n`.
    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn diag(&self) -> &[Option<f64>] {
        &self.diag
    }

    /// Upper-triangle entries on `Omega`, sorted by `(i, j)`.
    pub fn offdiag(&self) -> &[(usize, usize, f64)] {
        &self.offdiag
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return self.diag.get(i).copied().flatten();
        }
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.offdiag
            .binary_search_by_key(&(a, b), |e| (e.0, e.1))
            .ok()
            .map(|k| self.offdiag[k].2)
    }

    /// Ordered pairs in `Omega`, diagonal included.
    pub fn omega_len(&self) -> usize {
        self.diag.iter().filter(|v| v.is_some()).count() + 2 * self.offdiag.len()
    }

    /// Dense copy with `fill` outside `Omega`.
    pub fn to_dense(&self, fill: f64) -> DMatrix<f64> {
        let mut out = DMatrix::from_element(self.d, self.d, fill);
        for (i, v) in self.diag.iter().enumerate() {
            if let Some(v) = v {
                out[(i, i)] = *v;
            }
        }
        for &(i, j, v) in &self.offdiag {
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
        out
    }

    /// Entries scaled by `c`, same support.
    pub fn scaled(&self, c: f64) -> Self {
        SecondMomentEstimate {
            diag: self.diag.iter().map(|v| v.map(|x| x * c)).collect(),
            offdiag: self.offdiag.iter().map(|&(i, j, v)| (i, j, v * c)).collect(),
            ..self.clone()
        }
    }
}

/// Diagonal and off-diagonal membership probabilities of `Omega` under
/// independent Bernoulli(`p`) sampling of an `n`-row matrix:
/// `1 - (1 - p)^n` and `1 - (1 - p^2)^n`, evaluated in log space.
pub fn omega_probabilities(n: usize, _d: usize, p: f64) -> (f64, f64) {
    (inclusion(n, p), inclusion(n, p * p))
}

fn inclusion(n: usize, prob: f64) -> f64 {
    if n == 0 || prob <= 0.0 {
        return 0.0;
    }
    if prob >= 1.0 {
        return 1.0;
    }
    -((n as f64) * (-prob).ln_1p()).exp_m1()
}

/// `q = 1 - (1 - p^2)^n`.
pub fn offdiag_probability(n: usize, p: f64) -> f64 {
    inclusion(n, p * p)
}

/// Fraction of observed cells, `m / (n d)`, clamped below 1.
pub fn estimate_p(m: &ObservedMatrix) -> Result<f64> {
    let cells = (m.n_rows() as f64) * (m.n_cols() as f64);
    if m.is_empty() || cells == 0.0 {
        return Err(Error::EmptyInput("cannot estimate p from an empty matrix".into()));
    }
    Ok((m.nnz() as f64 / cells).min(1.0 - 1e-12))
}

/// Hajek estimate with `p` estimated from the observation rate.
pub fn hajek(m: &ObservedMatrix, co: &Cooccurrence) -> Result<SecondMomentEstimate> {
    let p = estimate_p(m).unwrap_or(1e-12).max(1e-12);
    hajek_with_p(m, co, p)
}

/// Hajek estimate, recording `p` (and the implied `q`) as metadata.
pub fn hajek_with_p(m: &ObservedMatrix, co: &Cooccurrence, p: f64) -> Result<SecondMomentEstimate> {
    check_pair(m, co)?;
    let acc = accumulate(m, u64::MAX)?;
    let diag = acc
        .diag_count
        .iter()
        .zip(&acc.diag_sum)
        .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
        .collect();
    let offdiag = acc
        .pairs
        .iter()
        .map(|&(i, j, c, s)| (i, j, s / c as f64))
        .collect();
    let q = offdiag_probability(m.n_rows(), p);
    Ok(SecondMomentEstimate {
        d: m.n_cols(),
        n_rows: Some(m.n_rows()),
        diag,
        offdiag,
        kind: EstimatorKind::Hajek,
        p,
        q,
    })
}

/// Horvitz-Thompson estimate with the true sampling probability `p`,
/// restricted to `Omega`.
pub fn horvitz_thompson(m: &ObservedMatrix, co: &Cooccurrence, p: f64) -> Result<SecondMomentEstimate> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("sampling probability must lie in (0, 1], got {p}")));
    }
    check_pair(m, co)?;
    let acc = accumulate(m, u64::MAX)?;
    let n = m.n_rows() as f64;
    let diag = acc
        .diag_count
        .iter()
        .zip(&acc.diag_sum)
        .map(|(&c, &s)| (c > 0).then(|| s / (n * p)))
        .collect();
    let offdiag = acc
        .pairs
        .iter()
        .map(|&(i, j, _, s)| (i, j, s / (n * p * p)))
        .collect();
    Ok(SecondMomentEstimate {
        d: m.n_cols(),
        n_rows: Some(m.n_rows()),
        diag,
        offdiag,
        kind: EstimatorKind::HorvitzThompson,
        p,
        q: offdiag_probability(m.n_rows(), p),
    })
}

fn check_pair(m: &ObservedMatrix, co: &Cooccurrence) -> Result<()> {
    if co.d != m.n_cols() || co.n_rows != m.n_rows() {
        return Err(Error::DimensionMismatch(format!(
            "co-occurrence built for {}x{}, matrix is {}x{}",
            co.n_rows,
            co.d,
            m.n_rows(),
            m.n_cols()
        )));
    }
    Ok(())
}

/// Squared deviation of an estimate from the truth over `Omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub sum_sq_bias_diag: f64,
    /// Sums over ordered pairs, so each unordered pair contributes twice.
    pub sum_sq_bias_offdiag: f64,
    pub omega_diag: usize,
    pub omega_offdiag: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_entry: Option<Vec<(usize, usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl BiasReport {
    pub fn total(&self) -> f64 {
        self.sum_sq_bias_diag + self.sum_sq_bias_offdiag
    }
}

/// Compare `est` with a dense ground truth on `Omega`.
pub fn bias_on_omega(est: &SecondMomentEstimate, truth: &DMatrix<f64>, per_entry: bool) -> Result<BiasReport> {
    if truth.nrows() != est.d || truth.ncols() != est.d {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {0}x{0}, truth is {1}x{2}",
            est.d,
            truth.nrows(),
            truth.ncols()
        )));
    }
    let mut entries = per_entry.then(Vec::new);
    let mut diag_sq = 0.0;
    let mut n_diag = 0;
    for (i, v) in est.diag.iter().enumerate() {
        if let Some(v) = v {
            let b = v - truth[(i, i)];
            diag_sq += b * b;
            n_diag += 1;
            if let Some(e) = entries.as_mut() {
                e.push((i, i, b));
            }
        }
    }
    let mut off_sq = 0.0;
    for &(i, j, v) in &est.offdiag {
        let b1 = v - truth[(i, j)];
        let b2 = v - truth[(j, i)];
        off_sq += b1 * b1 + b2 * b2;
        if let Some(e) = entries.as_mut() {
            e.push((i, j, b1));
        }
    }
    Ok(BiasReport {
        sum_sq_bias_diag: diag_sq,
        sum_sq_bias_offdiag: off_sq,
        omega_diag: n_diag,
        omega_offdiag: 2 * est.offdiag.len(),
        per_entry: entries,
        reference: None,
    })
}

fn column_power_sum(m: &DMatrix<f64>, i: usize, pow: i32) -> f64 {
    m.column(i).iter().map(|x| x.powi(pow)).sum()
}

/// Leading two terms of the diagonal Hajek variance approximation:
/// `(1-p)/(np) * (sum_k M_ki^4 / n - T_ii^2)`.
pub fn variance_approx_diag(m_true: &DMatrix<f64>, p: f64, i: usize) -> f64 {
    let n = m_true.nrows() as f64;
    let t_ii = column_power_sum(m_true, i, 2) / n;
    let fourth = column_power_sum(m_true, i, 4) / n;
    (1.0 - p) / (n * p) * fourth - (1.0 - p) / (n * p) * t_ii * t_ii
}

/// Leading two terms of the off-diagonal Hajek variance approximation:
/// `sum_k M_ki^2 M_kj^2 / n - T_ij^2`.
pub fn variance_approx_offdiag(m_true: &DMatrix<f64>, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(Error::InvalidParameter("off-diagonal variance needs i != j".into()));
    }
    let n = m_true.nrows() as f64;
    let (ci, cj) = (m_true.column(i), m_true.column(j));
    let sq: f64 = ci.iter().zip(cj.iter()).map(|(a, b)| a * a * b * b).sum();
    let t_ij = ci.dot(&cj) / n;
    Ok(sq / n - t_ij * t_ij)
}

/// Exact Horvitz-Thompson variance for entry `(i, j)`.
pub fn variance_ht(m_true: &DMatrix<f64>, p: f64, i: usize, j: usize) -> f64 {
    let n = m_true.nrows() as f64;
    if i == j {
        (1.0 - p) / (n * n * p) * column_power_sum(m_true, i, 4)
    } else {
        let (ci, cj) = (m_true.column(i), m_true.column(j));
        let sq: f64 = ci.iter().zip(cj.iter()).map(|(a, b)| a * a * b * b).sum();
        (1.0 - p * p) / (n * n * p * p) * sq
    }
}

/// Outcome of a Monte-Carlo check of the first-order expansion of a diagonal
/// Hajek entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    /// Mean of `|T_hat_ii - linearization|` over usable draws.
    pub mean_abs_err: f64,
    /// `|sample Var(T_hat_ii) - variance_approx_diag|`.
    pub var_abs_err: f64,
    pub mc_variance: f64,
    pub approx_variance: f64,
    pub used_trials: usize,
    /// Draws where column `i` had no observation.
    pub skipped_trials: usize,
}

/// Draw `trials` Bernoulli(`p`) masks of column `i` and compare the Hajek
/// diagonal entry with its linearization around `(E A_ii, E B_ii)`.
pub fn taylor_expansion_check(
    m_true: &DMatrix<f64>,
    p: f64,
    i: usize,
    trials: usize,
    seed: u64,
) -> Result<TaylorCheck> {
    if trials == 0 {
        return Err(Error::InvalidParameter("need at least one trial".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("p must lie in (0, 1], got {p}")));
    }
    let n = m_true.nrows();
    let sq: Vec<f64> = m_true.column(i).iter().map(|x| x * x).collect();
    let ea = p * sq.iter().sum::<f64>();
    let eb = p * n as f64;
    let base = rng::derive_seed(rng::derive_seed(seed, rng::tag::TRIAL), i as u64);
    let mut values = Vec::with_capacity(trials);
    let mut abs_err = 0.0;
    let mut skipped = 0;
    for trial in 0..trials {
        let mut r = rng::stream_rng(base, trial as u64);
        let rows = rng::bernoulli_indices(&mut r, n, p);
        if rows.is_empty() {
            skipped += 1;
            continue;
        }
        let a: f64 = rows.iter().map(|&k| sq[k]).sum();
        let b = rows.len() as f64;
        let t_hat = a / b;
        let linear = ea / eb + (a - ea) / eb - ea / (eb * eb) * (b - eb);
        abs_err += (t_hat - linear).abs();
        values.push(t_hat);
    }
    if values.is_empty() {
        return Err(Error::EmptyInput(format!("column {i} unobserved in every draw")));
    }
    let used = values.len();
    let mean = values.iter().sum::<f64>() / used as f64;
    let mc_variance = if used > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (used - 1) as f64
    } else {
        0.0
    };
    let approx_variance = variance_approx_diag(m_true, p, i);
    Ok(TaylorCheck {
        mean_abs_err: abs_err / used as f64,
        var_abs_err: (mc_variance - approx_variance).abs(),
        mc_variance,
        approx_variance,
        used_trials: used,
        skipped_trials: skipped,
    })
}

/// Spectral deviation `||P_Omega(W) - q W||_2` together with the
/// high-probability bound `q nu sqrt(16 log(2d) / (d q))`.
pub fn concentration_diagnostic(co: &Cooccurrence, w: &DMatrix<f64>, q: f64, nu: f64) -> Result<(f64, f64)> {
    let d = co.d;
    if w.nrows() != d || w.ncols() != d {
        return Err(Error::DimensionMismatch(format!("W is {}x{}, d = {d}", w.nrows(), w.ncols())));
    }
    if !(q > 0.0 && q <= 1.0) || !(nu > 0.0) {
        return Err(Error::InvalidParameter(format!("need 0 < q <= 1 and nu > 0, got q={q} nu={nu}")));
    }
    let scale = w.amax();
    for i in 0..d {
        for j in i + 1..d {
            if (w[(i, j)] - w[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidParameter("W must be symmetric".into()));
            }
        }
    }
    if d > 0 && scale > nu / d as f64 * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "max |W_ij| = {scale} exceeds nu / d = {}",
            nu / d as f64
        )));
    }
    let mut dev = w * (-q);
    for i in 0..d {
        if co.diag_counts[i] > 0 {
            dev[(i, i)] = q * w[(i, i)] - q * w[(i, i)];
        }
    }
    for p in &co.pairs {
        let v = w[(p.i, p.j)] - q * w[(p.i, p.j)];
        dev[(p.i, p.j)] = v;
        dev[(p.j, p.i)] = v;
    }
    let lhs = linalg::spectral_norm_sym(&dev, 1e-8, 1000, 0x5eed)?;
    let bound = if d == 0 {
        0.0
    } else {
        let df = d as f64;
        q * nu * (16.0 * (2.0 * df).ln() / (df * q)).sqrt()
    };
    Ok((lhs, bound))
}

/// Uniformly random symmetric support: every diagonal entry present, each
/// off-diagonal pair present independently with probability `q`.
pub fn random_support(d: usize, n_rows: usize, q: f64, seed: u64) -> Cooccurrence {
    let mut r = rng::stream_rng(rng::derive_seed(seed, rng::tag::MASK), 0);
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            if r.random::<f64>() < q {
                pairs.push(PairCount { i, j, count: 1 });
            }
        }
    }
    Cooccurrence {
        d,
        n_rows,
        diag_counts: vec![1; d],
        pairs,
    }
}

/// Serialize as coo-text with header `# d=<d> kind=<hajek|ht> p=<p> q=<q>`,
/// an `# n=<rows>` line when known, then `i j value` for `i <= j`.
pub fn write_estimate<W: Write>(mut w: W, est: &SecondMomentEstimate) -> Result<()> {
    writeln!(w, "# d={} kind={} p={:?} q={:?}", est.d, est.kind, est.p, est.q)?;
    if let Some(n) = est.n_rows {
        writeln!(w, "# n={n}")?;
    }
    let mut off = est.offdiag.iter().peekable();
    for i in 0..est.d {
        if let Some(v) = est.diag[i] {
            writeln!(w, "{i} {i} {v:?}")?;
        }
        while let Some(&&(a, b, v)) = off.peek() {
            if a != i {
                break;
            }
            writeln!(w, "{a} {b} {v:?}")?;
            off.next();
        }
    }
    w.flush()?;
    Ok(())
}

/// Decode the format written by [`write_estimate`]. Lower-triangle lines are
/// accepted and mirrored.
pub fn parse_estimate<R: BufRead>(reader: R) -> Result<SecondMomentEstimate> {
    let mut header: Option<(usize, EstimatorKind, f64, f64)> = None;
    let mut header_line = 0;
    let mut n_rows = None;
    let mut diag: Vec<Option<f64>> = Vec::new();
    let mut off = Vec::new();
    let as_data = |line: usize| {
        move |e: Error| match e {
            Error::InvalidParameter(m) => Error::malformed(line, m),
            e => e,
        }
    };
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::malformed(lineno, e.to_string()))?;
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        if let Some(comment) = body.strip_prefix('#') {
            let fields: HashMap<&str, &str> = comment
                .split_whitespace()
                .filter_map(|t| t.split_once('='))
                .collect();
            if header.is_none() {
                if let (Some(d), Some(kind), Some(p), Some(q)) =
                    (fields.get("d"), fields.get("kind"), fields.get("p"), fields.get("q"))
                {
                    let d: usize = d
                        .parse()
                        .map_err(|_| Error::malformed(lineno, format!("bad d '{d}'")))?;
                    if d > MAX_ESTIMATE_DIM {
                        return Err(Error::IndexOverflow(format!("d = {d} exceeds {MAX_ESTIMATE_DIM}")));
                    }
                    let kind: EstimatorKind = kind.parse().map_err(as_data(lineno))?;
                    let num = |s: &str| -> Result<f64> {
                        s.parse::<f64>()
                            .map_err(|_| Error::malformed(lineno, format!("bad number '{s}'")))
                    };
                    header = Some((d, kind, num(p)?, num(q)?));
                    header_line = lineno;
                    diag = vec![None; d];
                    continue;
                }
            }
            if let Some(n) = fields.get("n") {
                n_rows = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::malformed(lineno, format!("bad n '{n}'")))?,
                );
            }
            continue;
        }
        let Some((d, ..)) = header else {
            return Err(Error::malformed(lineno, "entry before '# d=.. kind=.. p=.. q=..' header"));
        };
        let toks: Vec<&str> = body.split_whitespace().collect();
        let [a, b, v] = toks[..] else {
            return Err(Error::malformed(lineno, "expected 'i j value'"));
        };
        let idx = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| Error::malformed(lineno, format!("bad index '{s}'")))
        };
        let (i, j) = (idx(a)?, idx(b)?);
        let v: f64 = match v.parse::<f64>() {
            Ok(x) if x.is_finite() => x,
            _ => return Err(Error::malformed(lineno, format!("bad value '{v}'"))),
        };
        if i >= d || j >= d {
            return Err(Error::IndexOutOfRange { row: i, col: j, n_rows: d, n_cols: d });
        }
        if i == j {
            if diag[i].replace(v).is_some() {
                return Err(Error::DuplicateEntry { row: i, col: j });
            }
        } else {
            off.push((i.min(j), i.max(j), v));
        }
    }
    let Some((d, kind, p, q)) = header else {
        return Err(Error::EmptyInput("missing estimate header".into()));
    };
    // q was computed from (p, n) when written; re-validating it against a
    // re-derived value would reject files whose p was rounded by hand.
    let est = SecondMomentEstimate::from_parts(d, None, diag, off, kind, p, q).map_err(as_data(header_line))?;
    Ok(SecondMomentEstimate { n_rows, ..est })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_io::Triplet;

    fn matrix(n: usize, d: usize, cells: &[(usize, usize, f64)]) -> ObservedMatrix {
        ObservedMatrix::new(n, d, cells.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect()).unwrap()
    }

    fn full(m: &DMatrix<f64>) -> ObservedMatrix {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                t.push(Triplet::new(i, j, m[(i, j)]));
            }
        }
        ObservedMatrix::new(m.nrows(), m.ncols(), t).unwrap()
    }

    #[test]
    fn cooccurrence_counts_small() {
        // rows {0: [a, b], 1: [a]} with a = 0, b = 1
        let m = matrix(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0)]);
        let co = cooccurrence(&m).unwrap();
        assert_eq!(co.diag_counts(), &[2, 1]);
        assert_eq!(co.count(0, 1), 1);
        assert_eq!(co.count(1, 0), 1);
        assert_eq!(co.omega_len(), 4);
        assert_eq!(co.neighbors(0), vec![1]);
    }

    #[test]
    fn cooccurrence_full_and_empty() {
        let m = full(&DMatrix::from_element(4, 3, 1.0));
        let co = cooccurrence(&m).unwrap();
        assert!(co.diag_counts().iter().all(|&c| c == 4));
        assert!(co.pairs().iter().all(|p| p.count == 4));
        assert_eq!(co.pairs().len(), 3);

        let e = ObservedMatrix::empty(5, 3);
        let co = cooccurrence(&e).unwrap();
        assert!(co.diag_counts().iter().all(|&c| c == 0));
        assert!(co.pairs().is_empty());
        assert_eq!(co.omega_len(), 0);
    }

    #[test]
    fn pair_cap_guards_dense_rows() {
        let m = full(&DMatrix::from_element(2, 10, 1.0));
        assert!(matches!(
            cooccurrence_with_cap(&m, 89).unwrap_err(),
            Error::PairCapExceeded { projected: 90, cap: 89 }
        ));
        assert!(cooccurrence_with_cap(&m, 90).is_ok());
    }

    #[test]
    fn hajek_single_row() {
        let m = full(&DMatrix::from_row_slice(1, 2, &[2.0, 3.0]));
        let co = cooccurrence(&m).unwrap();
        let t = hajek(&m, &co).unwrap();
        assert_eq!(t.get(0, 0), Some(4.0));
        assert_eq!(t.get(0, 1), Some(6.0));
        assert_eq!(t.get(1, 0), Some(6.0));
        assert_eq!(t.get(1, 1), Some(9.0));
    }

    #[test]
    fn hajek_partial_overlap() {
        // M = [[1,1],[2,2],[3,3]], rows 1 and 2 observed in both columns
        let m = matrix(3, 2, &[(1, 0, 2.0), (1, 1, 2.0), (2, 0, 3.0), (2, 1, 3.0)]);
        let co = cooccurrence(&m).unwrap();
        let t = hajek(&m, &co).unwrap();
        assert_eq!(t.get(0, 1), Some(6.5));
    }

    #[test]
    fn full_observation_gives_gram_over_n() {
        let dense = DMatrix::from_fn(5, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let m = full(&dense);
        let co = cooccurrence(&m).unwrap();
        let gram = dense.transpose() * &dense / 5.0;
        let h = hajek(&m, &co).unwrap().to_dense(f64::NAN);
        let ht = horvitz_thompson(&m, &co, 1.0).unwrap().to_dense(f64::NAN);
        assert!((h - &gram).amax() < 1e-12);
        assert!((ht - &gram).amax() < 1e-12);
    }

    #[test]
    fn horvitz_thompson_formula_and_errors() {
        let m = matrix(2, 1, &[(0, 0, 2.0)]);
        let co = cooccurrence(&m).unwrap();
        let t = horvitz_thompson(&m, &co, 0.5).unwrap();
        assert_eq!(t.get(0, 0), Some(4.0));
        assert!(horvitz_thompson(&m, &co, 0.0).is_err());
        assert!(horvitz_thompson(&m, &co, 1.5).is_err());
    }

    #[test]
    fn estimate_p_cases() {
        let trips: Vec<(usize, usize, f64)> = (0..20).map(|k| (k / 2, (k * 3) % 10, 1.0)).collect();
        let m = matrix(10, 10, &trips);
        assert!((estimate_p(&m).unwrap() - 0.2).abs() < 1e-15);
        let f = full(&DMatrix::from_element(2, 2, 1.0));
        assert_eq!(estimate_p(&f).unwrap(), 1.0 - 1e-12);
        assert!(estimate_p(&ObservedMatrix::empty(3, 3)).is_err());
    }

    #[test]
    fn omega_probability_closed_forms() {
        let (a, b) = omega_probabilities(2, 4, 0.5);
        assert!((a - 0.75).abs() < 1e-15);
        assert!((b - 0.4375).abs() < 1e-15);
        assert_eq!(omega_probabilities(0, 4, 0.3), (0.0, 0.0));
        // relative gap of n p^2 from q is n p^2 / 2 to leading order
        let n = 10_000usize;
        let q = offdiag_probability(n, 1e-4);
        let rel = (n as f64 * 1e-8 - q) / q;
        assert!((rel - 5e-5).abs() < 1e-7, "{rel}");
        let q = offdiag_probability(n, 1e-5);
        let approx = n as f64 * 1e-10;
        assert!(((q - approx) / q).abs() < 1e-6, "{q} vs {approx}");
    }

    #[test]
    fn bias_zero_when_equal() {
        let dense = DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64);
        let m = full(&dense);
        let co = cooccurrence(&m).unwrap();
        let t = hajek(&m, &co).unwrap();
        let truth = dense.transpose() * &dense / 4.0;
        let rep = bias_on_omega(&t, &truth, true).unwrap();
        assert!(rep.total() < 1e-20);
        assert_eq!(rep.omega_diag, 3);
        assert_eq!(rep.omega_offdiag, 6);
        assert!(bias_on_omega(&t, &DMatrix::zeros(2, 2), false).is_err());
    }

    #[test]
    fn variance_closed_form_edge_cases() {
        let c = DMatrix::from_element(6, 2, 1.5);
        assert!(variance_approx_diag(&c, 0.3, 0).abs() < 1e-15);
        assert!(variance_approx_offdiag(&c, 0, 1).unwrap().abs() < 1e-15);
        assert!(variance_approx_offdiag(&c, 1, 1).is_err());
        let m = DMatrix::from_fn(6, 2, |i, j| (i + j) as f64);
        assert!(variance_approx_diag(&m, 1.0, 0).abs() < 1e-15);
        assert!(variance_ht(&m, 1.0, 0, 0).abs() < 1e-15);
        assert!(variance_ht(&m, 1.0, 0, 1).abs() < 1e-15);
    }

    #[test]
    fn taylor_exact_at_p_one() {
        let m = DMatrix::from_fn(20, 2, |i, j| (i as f64).sin() + j as f64);
        let c = taylor_expansion_check(&m, 1.0, 0, 5, 1).unwrap();
        assert!(c.mean_abs_err < 1e-15);
        assert_eq!(c.skipped_trials, 0);
        assert!(taylor_expansion_check(&m, 0.5, 0, 0, 1).is_err());
    }

    #[test]
    fn concentration_trivial_cases() {
        let d = 6;
        let w = DMatrix::from_fn(d, d, |i, j| 0.1 / (1.0 + (i + j) as f64));
        let nu = d as f64 * w.amax();
        let all: Vec<PairCount> = (0..d)
            .flat_map(|i| (i + 1..d).map(move |j| PairCount { i, j, count: 3 }))
            .collect();
        let co = Cooccurrence::from_parts(d, 3, vec![3; d], all).unwrap();
        let (lhs, bound) = concentration_diagnostic(&co, &w, 1.0, nu).unwrap();
        assert_eq!(lhs, 0.0);
        assert!(bound > 0.0);
        let (lhs, bound) = concentration_diagnostic(&co, &DMatrix::zeros(d, d), 0.5, 1.0).unwrap();
        assert_eq!(lhs, 0.0);
        assert!(lhs <= bound);
        let mut asym = w.clone();
        asym[(0, 1)] += 1e-3;
        assert!(concentration_diagnostic(&co, &asym, 0.5, 10.0).is_err());
    }

    #[test]
    fn estimate_file_round_trip() {
        let m = matrix(3, 3, &[(0, 0, 1.5), (0, 2, -2.0), (1, 1, 0.25), (2, 2, 3.0), (2, 0, 0.1)]);
        let co = cooccurrence(&m).unwrap();
        let t = hajek(&m, &co).unwrap();
        let mut buf = Vec::new();
        write_estimate(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# d=3 kind=hajek p="));
        let back = parse_estimate(text.as_bytes()).unwrap();
        assert_eq!(back, t);
        assert!(parse_estimate("0 0 1\n".as_bytes()).is_err());
        assert!(parse_estimate("# d=2 kind=ht p=0.5 q=0.5\n0 5 1\n".as_bytes()).is_err());
        assert!(parse_estimate("# d=99999999999 kind=ht p=0.5 q=0.5\n".as_bytes()).is_err());
    }
}
