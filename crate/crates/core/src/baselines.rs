//! Reference completion methods: alternating GD, softImpute-ALS and
//! nuclear-norm regularized symmetric GD.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{self, FactorMatrix, LossConfig, Objective, DIVERGENCE_LOSS};
use crate::linalg::{self, TruncatedSvd};
use crate::moment::SecondMomentEstimate;
use crate::rng::{self, tag};
use crate::sparse_io::ObservedMatrix;

/// softImpute keeps a dense `n x d` fill-in; wider inputs are refused.
pub const SOFT_IMPUTE_MAX_DIM: usize = 5000;
/// Dense completions are refused above this many cells.
pub const MAX_DENSE_CELLS: usize = 200_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AltGd,
    SoftimputeAls,
    NuclearGd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::AltGd => "alt-gd",
            Method::SoftimputeAls => "softimpute-als",
            Method::NuclearGd => "nuclear-gd",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alt-gd" => Ok(Method::AltGd),
            "softimpute-als" => Ok(Method::SoftimputeAls),
            "nuclear-gd" => Ok(Method::NuclearGd),
            _ => Err(Error::InvalidParameter(format!(
                "unknown method {s:?}; expected alt-gd, softimpute-als or nuclear-gd"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: Method,
    pub rank: usize,
    /// `None` lets nuclear-GD pick a curvature-based step; alt-GD requires one.
    pub learning_rate: Option<f64>,
    pub lambda: f64,
    pub max_iters: usize,
    pub conv_tol: f64,
    pub optimizer: Optimizer,
    /// `lambda` and a plain-GD step are given against the data term averaged
    /// over observed terms and are rescaled to the summed form; Adam steps are
    /// scale free and left alone.
    pub mean_scale: bool,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn alt_gd(rank: usize, seed: u64) -> Self {
        BaselineConfig {
            method: Method::AltGd,
            rank,
            learning_rate: Some(0.1),
            lambda: 0.0,
            max_iters: 300,
            conv_tol: 1e-5,
            optimizer: Optimizer::Adam,
            mean_scale: true,
            seed,
        }
    }

    pub fn soft_impute(rank: usize, seed: u64) -> Self {
        BaselineConfig {
            method: Method::SoftimputeAls,
            rank,
            learning_rate: None,
            lambda: 0.0,
            max_iters: 500,
            conv_tol: 1e-5,
            optimizer: Optimizer::Plain,
            mean_scale: false,
            seed,
        }
    }

    pub fn nuclear_gd(rank: usize, seed: u64) -> Self {
        BaselineConfig {
            method: Method::NuclearGd,
            rank,
            learning_rate: Some(0.1),
            lambda: 0.01,
            max_iters: 1000,
            conv_tol: 1e-5,
            optimizer: Optimizer::Plain,
            mean_scale: true,
            seed,
        }
    }

    pub fn for_method(method: Method, rank: usize, seed: u64) -> Self {
        match method {
            Method::AltGd => Self::alt_gd(rank, seed),
            Method::SoftimputeAls => Self::soft_impute(rank, seed),
            Method::NuclearGd => Self::nuclear_gd(rank, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        if !(self.conv_tol > 0.0) {
            return Err(Error::InvalidParameter(format!("conv_tol must be positive, got {}", self.conv_tol)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(eta) = self.learning_rate {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::InvalidParameter(format!("learning rate must be positive, got {eta}")));
            }
        }
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..x.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
            x[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Plain steps shrink by the data-term scale, Adam steps do not.
fn effective_rate(cfg: &BaselineConfig, lr: f64, scale: f64) -> f64 {
    if cfg.mean_scale && cfg.optimizer == Optimizer::Plain {
        lr / scale
    } else {
        lr
    }
}

fn update(opt: &mut Option<Adam>, x: &mut DMatrix<f64>, g: &DMatrix<f64>, lr: f64) {
    match opt {
        Some(a) => a.step(x.as_mut_slice(), g.as_slice(), lr),
        None => x.iter_mut().zip(g.iter()).for_each(|(a, b)| *a -= lr * b),
    }
}

#[derive(Debug, Clone)]
pub struct AltGdOutput {
    /// `n x r`.
    pub x: DMatrix<f64>,
    /// `d x r`.
    pub y: DMatrix<f64>,
    pub losses: Vec<f64>,
}

impl AltGdOutput {
    pub fn product(&self) -> DMatrix<f64> {
        &self.x * self.y.transpose()
    }
}

fn check_dense(n: usize, d: usize) -> Result<()> {
    if n.checked_mul(d).is_none_or(|c| c > MAX_DENSE_CELLS) {
        return Err(Error::InvalidParameter(format!(
            "{n}x{d} exceeds the dense completion limit of {MAX_DENSE_CELLS} cells"
        )));
    }
    Ok(())
}

/// Residuals `x_i . y_j - m_ij` on the observed cells, in triplet order.
fn residuals(m: &ObservedMatrix, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    m.triplets()
        .par_iter()
        .map(|t| x.row(t.row).dot(&y.row(t.col)) - t.value)
        .collect()
}

fn half_sq(res: &[f64]) -> f64 {
    0.5 * res.iter().map(|r| r * r).sum::<f64>()
}

/// Alternating gradient steps on `1/2 ||P_Omega(X Y^T - M)||_F^2`: one step
/// on `X` with `Y` fixed, then one on `Y` with the refreshed residuals.
pub fn alternating_gd(m: &ObservedMatrix, cfg: &BaselineConfig) -> Result<AltGdOutput> {
    cfg.validate()?;
    let (n, d, r) = (m.n_rows(), m.n_cols(), cfg.rank);
    if r > n.min(d) {
        return Err(Error::InvalidParameter(format!("rank {r} exceeds min(n, d) = {}", n.min(d))));
    }
    if m.is_empty() {
        return Err(Error::EmptyInput("no observed entries".into()));
    }
    let lr = cfg
        .learning_rate
        .ok_or_else(|| Error::InvalidParameter("alternating GD needs a learning rate".into()))?;
    let lr = effective_rate(cfg, lr, m.nnz() as f64 / 2.0);
    let mean_sq = m.triplets().iter().map(|t| t.value * t.value).sum::<f64>() / m.nnz() as f64;
    let std = (mean_sq / r as f64).powf(0.25).max(1e-3);
    let init = rng::derive_seed(cfg.seed, tag::INIT);
    let mut gx = rng::stream_rng(init, 1);
    let mut gy = rng::stream_rng(init, 2);
    let mut x = DMatrix::from_fn(n, r, |_, _| std * rng::standard_normal(&mut gx));
    let mut y = DMatrix::from_fn(d, r, |_, _| std * rng::standard_normal(&mut gy));
    let adam = cfg.optimizer == Optimizer::Adam;
    let mut opt_x = adam.then(|| Adam::new(n * r));
    let mut opt_y = adam.then(|| Adam::new(d * r));
    let mut losses = Vec::with_capacity(cfg.max_iters + 1);
    for it in 0..cfg.max_iters {
        let res = residuals(m, &x, &y);
        let loss = half_sq(&res);
        check_loss(it, loss)?;
        losses.push(loss);
        let mut g = DMatrix::<f64>::zeros(n, r);
        for (t, e) in m.triplets().iter().zip(&res) {
            for k in 0..r {
                g[(t.row, k)] += e * y[(t.col, k)];
            }
        }
        update(&mut opt_x, &mut x, &g, lr);

        let res = residuals(m, &x, &y);
        let mut g = DMatrix::<f64>::zeros(d, r);
        for (t, e) in m.triplets().iter().zip(&res) {
            for k in 0..r {
                g[(t.col, k)] += e * x[(t.row, k)];
            }
        }
        update(&mut opt_y, &mut y, &g, lr);
    }
    let loss = half_sq(&residuals(m, &x, &y));
    check_loss(cfg.max_iters, loss)?;
    losses.push(loss);
    Ok(AltGdOutput { x, y, losses })
}

fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged { iteration, loss });
    }
    Ok(())
}

/// `filled` with the observed cells of `m` written over it.
pub fn overwrite_observed(m: &ObservedMatrix, mut filled: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if filled.shape() != (m.n_rows(), m.n_cols()) {
        return Err(Error::DimensionMismatch(format!(
            "fill is {:?}, observed matrix is {}x{}",
            filled.shape(),
            m.n_rows(),
            m.n_cols()
        )));
    }
    for t in m.triplets() {
        filled[(t.row, t.col)] = t.value;
    }
    Ok(filled)
}

/// Rank-capped SVD of `y` with every singular value lowered by `lambda`
/// (floored at zero).
pub fn soft_threshold_svd(
    y: &DMatrix<f64>,
    rank: usize,
    lambda: f64,
    warm: Option<&DMatrix<f64>>,
    seed: u64,
) -> Result<TruncatedSvd> {
    let mut svd = linalg::truncated_svd(y, rank, warm, 1e-12, 2000, seed)?;
    for s in &mut svd.s {
        *s = (*s - lambda).max(0.0);
    }
    Ok(svd)
}

#[derive(Debug, Clone)]
pub struct SoftImputeOutput {
    pub completion: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
}

/// softImpute: fill missing cells from the current estimate, take a
/// soft-thresholded rank-capped SVD, repeat until successive reconstructions
/// differ by less than `conv_tol`.
pub fn soft_impute_als(m: &ObservedMatrix, cfg: &BaselineConfig) -> Result<SoftImputeOutput> {
    cfg.validate()?;
    let (n, d) = (m.n_rows(), m.n_cols());
    if d > SOFT_IMPUTE_MAX_DIM {
        return Err(Error::InvalidParameter(format!(
            "softImpute is limited to d <= {SOFT_IMPUTE_MAX_DIM}, got {d}"
        )));
    }
    check_dense(n, d)?;
    let seed = rng::derive_seed(cfg.seed, tag::INIT);
    let mut z = DMatrix::zeros(n, d);
    let mut warm: Option<DMatrix<f64>> = None;
    let mut last_change = f64::INFINITY;
    for it in 1..=cfg.max_iters {
        let y = overwrite_observed(m, z.clone())?;
        let svd = soft_threshold_svd(&y, cfg.rank, cfg.lambda, warm.as_ref(), seed)?;
        let next = svd.reconstruct();
        last_change = (&next - &z).norm();
        if !last_change.is_finite() {
            return Err(Error::Diverged { iteration: it, loss: last_change });
        }
        z = next;
        warm = Some(svd.v);
        if last_change < cfg.conv_tol {
            return Ok(SoftImputeOutput { completion: z, iterations: it, converged: true, last_change });
        }
    }
    Ok(SoftImputeOutput {
        completion: z,
        iterations: cfg.max_iters,
        converged: false,
        last_change,
    })
}

/// `||X||_*` as the sum of singular values.
pub fn nuclear_norm(x: &DMatrix<f64>) -> f64 {
    x.clone().svd(false, false).singular_values.sum()
}

/// `||X||_*` as `tr sqrt(X^T X)`, via the eigenvalues of the Gram matrix.
pub fn nuclear_norm_gram(x: &DMatrix<f64>) -> f64 {
    let g = x.transpose() * x;
    let g = (&g + g.transpose()) * 0.5;
    g.symmetric_eigenvalues().iter().map(|&e| e.max(0.0).sqrt()).sum()
}

/// `U V^T` from the thin SVD of `x`, a subgradient of `||X||_*`; directions
/// with zero singular value contribute nothing.
fn nuclear_subgradient(x: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let svd = x.clone().svd(true, true);
    let u = svd.u.ok_or_else(|| Error::NotConverged { what: "SVD", iterations: 0 })?;
    let vt = svd.v_t.ok_or_else(|| Error::NotConverged { what: "SVD", iterations: 0 })?;
    let tol = svd.singular_values.max() * 1e-12;
    let mut sub = DMatrix::zeros(x.nrows(), x.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            sub += u.column(k) * vt.row(k);
        }
    }
    Ok((svd.singular_values.sum(), sub))
}

#[derive(Debug, Clone)]
pub struct NuclearGdOutput {
    pub factors: FactorMatrix,
    pub losses: Vec<f64>,
    pub learning_rate: f64,
}

/// Subgradient descent (fixed step, or Adam) on the weighted Omega loss (no incoherence
/// term) plus `lambda ||X||_*`, from the same start as Hajek-GD.
pub fn nuclear_gd(t_hat: &SecondMomentEstimate, cfg: &BaselineConfig) -> Result<NuclearGdOutput> {
    cfg.validate()?;
    if cfg.rank > t_hat.d() {
        return Err(Error::InvalidParameter(format!("rank {} exceeds d = {}", cfg.rank, t_hat.d())));
    }
    let loss_cfg = LossConfig {
        lambda: 0.0,
        alpha: f64::INFINITY,
        q: t_hat.q(),
        rank: cfg.rank,
    };
    let objective = Objective::new(t_hat, loss_cfg)?;
    let mut x = FactorMatrix::random_init(t_hat.d(), cfg.rank, cfg.seed);
    let scale = landscape::sum_scale(t_hat);
    let lambda = if cfg.mean_scale { cfg.lambda * scale } else { cfg.lambda };
    let eta = match cfg.learning_rate {
        Some(lr) => effective_rate(cfg, lr, scale),
        None => objective.suggest_learning_rate(&x),
    };
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam::new(x.d() * x.r()));
    let mut losses = Vec::with_capacity(cfg.max_iters + 1);
    for it in 0..=cfg.max_iters {
        let (mut loss, mut grad) = objective.loss_and_gradient(&x)?;
        if lambda > 0.0 {
            let (norm, sub) = nuclear_subgradient(&x.to_dmatrix())?;
            loss += lambda * norm;
            let g = grad.as_mut_slice();
            for i in 0..x.d() {
                for k in 0..x.r() {
                    g[i * x.r() + k] += lambda * sub[(i, k)];
                }
            }
        }
        check_loss(it, loss)?;
        losses.push(loss);
        if it == cfg.max_iters {
            break;
        }
        match adam.as_mut() {
            Some(a) => a.step(x.as_mut_slice(), grad.as_slice(), eta),
            None => x.axpy(-eta, &grad),
        }
    }
    Ok(NuclearGdOutput { factors: x, losses, learning_rate: eta })
}

/// `M^T M / n` of a dense completion.
pub fn second_moment(completion: &DMatrix<f64>) -> DMatrix<f64> {
    let n = completion.nrows().max(1) as f64;
    linalg::at_b(completion, completion) / n
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub method: Method,
    /// Estimate of `T` (`d x d`).
    pub t: DMatrix<f64>,
    /// Completed `M` for the methods that produce one.
    pub completion: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

/// Run a baseline end to end and map it to an estimate of `T`: completion
/// methods keep observed cells and use `M_c^T M_c / n`, nuclear-GD uses
/// `X X^T` fitted to the Hajek estimate.
pub fn run_baseline(m: &ObservedMatrix, cfg: &BaselineConfig) -> Result<BaselineOutput> {
    match cfg.method {
        Method::AltGd => {
            check_dense(m.n_rows(), m.n_cols())?;
            let out = alternating_gd(m, cfg)?;
            let completion = overwrite_observed(m, out.product())?;
            Ok(BaselineOutput {
                method: cfg.method,
                t: second_moment(&completion),
                completion: Some(completion),
                converged: false,
                iterations: cfg.max_iters,
            })
        }
        Method::SoftimputeAls => {
            let out = soft_impute_als(m, cfg)?;
            let completion = overwrite_observed(m, out.completion)?;
            Ok(BaselineOutput {
                method: cfg.method,
                t: second_moment(&completion),
                completion: Some(completion),
                converged: out.converged,
                iterations: out.iterations,
            })
        }
        Method::NuclearGd => {
            let co = crate::moment::cooccurrence(m)?;
            let t_hat = crate::moment::hajek(m, &co)?;
            let out = nuclear_gd(&t_hat, cfg)?;
            Ok(BaselineOutput {
                method: cfg.method,
                t: out.factors.gram(),
                completion: None,
                converged: false,
                iterations: cfg.max_iters,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::GdConfig;
    use crate::sparse_io::Triplet;

    fn low_rank(n: usize, d: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng::stream_rng(seed, 0);
        let a = DMatrix::from_fn(n, r, |_, _| rng::standard_normal(&mut g));
        let b = DMatrix::from_fn(d, r, |_, _| rng::standard_normal(&mut g));
        a * b.transpose() / (r as f64).sqrt()
    }

    fn full(m: &DMatrix<f64>) -> ObservedMatrix {
        let trips = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| Triplet::new(i, j, m[(i, j)]))
            .collect();
        ObservedMatrix::new(m.nrows(), m.ncols(), trips).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::AltGd, Method::SoftimputeAls, Method::NuclearGd] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("svd".parse::<Method>().is_err());
    }

    #[test]
    fn alt_gd_exact_fit() {
        let truth = low_rank(20, 20, 2, 1);
        let m = full(&truth);
        let cfg = BaselineConfig {
            learning_rate: Some(0.02),
            max_iters: 20000,
            optimizer: Optimizer::Plain,
            mean_scale: false,
            ..BaselineConfig::alt_gd(2, 3)
        };
        let out = alternating_gd(&m, &cfg).unwrap();
        assert!((out.product() - &truth).norm() < 1e-6, "{}", (out.product() - &truth).norm());
    }

    #[test]
    fn alt_gd_zero_iterations_returns_init() {
        let m = full(&low_rank(6, 5, 1, 2));
        let cfg = BaselineConfig { max_iters: 0, ..BaselineConfig::alt_gd(2, 9) };
        let a = alternating_gd(&m, &cfg).unwrap();
        let b = alternating_gd(&m, &cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.losses.len(), 1);
    }

    #[test]
    fn soft_impute_fixed_point_on_full_data() {
        let truth = low_rank(30, 12, 3, 4);
        let out = soft_impute_als(&full(&truth), &BaselineConfig::soft_impute(3, 0)).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
        assert!((out.completion - truth).norm() < 1e-8);
    }

    #[test]
    fn soft_threshold_shifts_singular_values() {
        let y = low_rank(25, 10, 4, 5);
        let exact = y.clone().svd(false, false).singular_values;
        let mut exact: Vec<f64> = exact.iter().copied().collect();
        exact.sort_by(|a, b| b.total_cmp(a));
        let lambda = exact[2] * 0.5;
        let svd = soft_threshold_svd(&y, 4, lambda, None, 1).unwrap();
        for k in 0..4 {
            assert!((svd.s[k] - (exact[k] - lambda).max(0.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn nuclear_norm_two_ways() {
        let mut g = rng::stream_rng(6, 0);
        let x = DMatrix::from_fn(40, 5, |_, _| rng::standard_normal(&mut g));
        assert!((nuclear_norm(&x) - nuclear_norm_gram(&x)).abs() < 1e-9);
    }

    #[test]
    fn nuclear_gd_without_penalty_matches_landscape() {
        let truth = low_rank(40, 8, 2, 7);
        let m = full(&truth);
        let co = crate::moment::cooccurrence(&m).unwrap();
        let t_hat = crate::moment::hajek(&m, &co).unwrap();
        let cfg = BaselineConfig { lambda: 0.0, max_iters: 200, learning_rate: Some(1e-3), mean_scale: false, ..BaselineConfig::nuclear_gd(2, 11) };
        let ours = nuclear_gd(&t_hat, &cfg).unwrap();
        let loss_cfg = LossConfig { lambda: 0.0, alpha: f64::INFINITY, q: t_hat.q(), rank: 2 };
        let gd = GdConfig { iterations: 200, learning_rate: Some(1e-3), seed: 11, ..GdConfig::default() };
        let theirs = landscape::run_gd(&t_hat, &loss_cfg, &gd).unwrap();
        let gap = (ours.factors.to_dmatrix() - theirs.factors.to_dmatrix()).norm();
        assert!(gap < 1e-10, "{gap}");
    }

    #[test]
    fn baselines_are_deterministic() {
        let m = full(&low_rank(15, 6, 2, 8));
        for method in [Method::AltGd, Method::SoftimputeAls, Method::NuclearGd] {
            let cfg = BaselineConfig { max_iters: 20, ..BaselineConfig::for_method(method, 2, 5) };
            let a = run_baseline(&m, &cfg).unwrap();
            let b = run_baseline(&m, &cfg).unwrap();
            assert_eq!(a.t, b.t, "{method}");
        }
    }

    #[test]
    fn soft_impute_rejects_wide_input() {
        let m = ObservedMatrix::empty(2, SOFT_IMPUTE_MAX_DIM + 1);
        assert!(soft_impute_als(&m, &BaselineConfig::soft_impute(1, 0)).is_err());
    }
}
