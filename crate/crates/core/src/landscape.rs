//! Low-rank factorization of the Hajek estimate by gradient descent.
//!
//! The objective is
//! `l(X) = 1/2 ||P_Omega(X X^T - T_hat)||_F^2 + lambda * sum_i (||X_i|| - alpha)_+^4`
//! where `P_Omega` keeps entries on `Omega` and scales diagonal ones by `q`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment::{self, SecondMomentEstimate};
use crate::rng::{self, tag};
use crate::sparse_io::{ObservedMatrix, Triplet};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_ALPHA: f64 = 1e-3;

/// Loss values above this are treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Dense `d x r` factor, stored row-major so that rows `X_i` are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    d: usize,
    r: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(d: usize, r: usize) -> Self {
        FactorMatrix { d, r, data: vec![0.0; d * r] }
    }

    pub fn from_row_major(d: usize, r: usize, data: Vec<f64>) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidParameter("factor rank must be at least 1".into()));
        }
        if data.len() != d * r {
            return Err(Error::DimensionMismatch(format!("{} values for a {d}x{r} factor", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("factor entries must be finite".into()));
        }
        Ok(FactorMatrix { d, r, data })
    }

    pub fn from_dmatrix(x: &DMatrix<f64>) -> Result<Self> {
        let (d, r) = x.shape();
        Self::from_row_major(d, r, (0..d).flat_map(|i| (0..r).map(move |k| x[(i, k)])).collect())
    }

    /// Entries i.i.d. `N(0, 1/d)`.
    pub fn random_init(d: usize, r: usize, seed: u64) -> Self {
        let mut g = rng::stream_rng(rng::derive_seed(seed, tag::INIT), 0);
        let sd = 1.0 / (d.max(1) as f64).sqrt();
        FactorMatrix {
            d,
            r,
            data: (0..d * r).map(|_| sd * rng::standard_normal(&mut g)).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.r..(i + 1) * self.r]
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.data.chunks(self.r).map(|row| dot(row, row).sqrt()).collect()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.r, &self.data)
    }

    /// `X X^T`, exactly symmetric.
    pub fn gram(&self) -> DMatrix<f64> {
        let x = self.to_dmatrix();
        let mut g = &x * x.transpose();
        for i in 0..self.d {
            for j in i + 1..self.d {
                g[(j, i)] = g[(i, j)];
            }
        }
        g
    }

    /// `self + c * other`.
    pub fn axpy(&mut self, c: f64, other: &FactorMatrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub q: f64,
    pub rank: usize,
}

impl LossConfig {
    /// Regularizer defaults for synthetic data (`alpha = 1e-3`, `lambda = 1e-4`
    /// per loss term) and the estimate's own `q`.
    pub fn for_estimate(t_hat: &SecondMomentEstimate, rank: usize) -> Self {
        Self::per_term(t_hat, rank, DEFAULT_LAMBDA, DEFAULT_ALPHA)
    }

    /// `lambda_mean` is the penalty weight against the data term averaged over
    /// its terms; it is rescaled to the summed `1/2 ||.||^2` form used here.
    pub fn per_term(t_hat: &SecondMomentEstimate, rank: usize, lambda_mean: f64, alpha: f64) -> Self {
        LossConfig {
            lambda: lambda_mean * sum_scale(t_hat),
            alpha,
            q: t_hat.q(),
            rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need lambda >= 0 and alpha >= 0, got lambda={} alpha={}",
                self.lambda, self.alpha
            )));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidParameter(format!("q must lie in (0, 1], got {}", self.q)));
        }
        if self.rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub iterations: usize,
    /// Fixed step size; `None` picks one from a curvature bound at the start.
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// Stop once `||grad||_F` falls below this.
    pub tolerance: Option<f64>,
    pub record_every: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            iterations: 2000,
            learning_rate: None,
            seed: 0,
            tolerance: None,
            record_every: 10,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.learning_rate {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::InvalidParameter(format!("learning rate must be positive, got {eta}")));
            }
        }
        Ok(())
    }
}

/// `Omega` in adjacency form, both orientations of every off-diagonal pair.
#[derive(Debug, Clone)]
pub struct Objective {
    d: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    targets: Vec<f64>,
    diag: Vec<Option<f64>>,
    cfg: LossConfig,
}

impl Objective {
    pub fn new(t_hat: &SecondMomentEstimate, cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        let d = t_hat.d();
        let mut degree = vec![0usize; d + 1];
        for &(i, j, _) in t_hat.offdiag() {
            degree[i + 1] += 1;
            degree[j + 1] += 1;
        }
        for i in 0..d {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let total = offsets[d];
        let mut neighbors = vec![0; total];
        let mut targets = vec![0.0; total];
        for &(i, j, v) in t_hat.offdiag() {
            neighbors[fill[i]] = j;
            targets[fill[i]] = v;
            fill[i] += 1;
            neighbors[fill[j]] = i;
            targets[fill[j]] = v;
            fill[j] += 1;
        }
        Ok(Objective {
            d,
            offsets,
            neighbors,
            targets,
            diag: t_hat.diag().to_vec(),
            cfg,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    fn check(&self, x: &FactorMatrix) -> Result<()> {
        if x.d != self.d {
            return Err(Error::DimensionMismatch(format!("factor has {} rows, estimate d = {}", x.d, self.d)));
        }
        Ok(())
    }

    /// Contribution of row `i`: half its Omega residuals plus its penalty.
    /// Writes the gradient row into `g` when given.
    fn row_terms(&self, x: &FactorMatrix, i: usize, g: Option<&mut [f64]>) -> f64 {
        let xi = x.row(i);
        let q2 = self.cfg.q * self.cfg.q;
        let mut loss = 0.0;
        let mut grad = g;
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        for k in self.offsets[i]..self.offsets[i + 1] {
            let xj = x.row(self.neighbors[k]);
            let res = dot(xi, xj) - self.targets[k];
            loss += 0.5 * res * res;
            if let Some(g) = grad.as_deref_mut() {
                for (gv, xv) in g.iter_mut().zip(xj) {
                    *gv += 2.0 * res * xv;
                }
            }
        }
        let sq = dot(xi, xi);
        if let Some(t) = self.diag[i] {
            let res = sq - t;
            loss += 0.5 * q2 * res * res;
            if let Some(g) = grad.as_deref_mut() {
                for (gv, xv) in g.iter_mut().zip(xi) {
                    *gv += 2.0 * q2 * res * xv;
                }
            }
        }
        if self.cfg.lambda > 0.0 {
            let norm = sq.sqrt();
            let excess = norm - self.cfg.alpha;
            if excess > 0.0 {
                loss += self.cfg.lambda * excess.powi(4);
                if let Some(g) = grad.as_deref_mut() {
                    let c = self.cfg.lambda * 4.0 * excess.powi(3) / norm;
                    for (gv, xv) in g.iter_mut().zip(xi) {
                        *gv += c * xv;
                    }
                }
            }
        }
        loss
    }

    pub fn loss(&self, x: &FactorMatrix) -> Result<f64> {
        self.check(x)?;
        let per_row: Vec<f64> = (0..self.d).into_par_iter().map(|i| self.row_terms(x, i, None)).collect();
        Ok(per_row.iter().sum())
    }

    /// Loss and gradient in one pass.
    pub fn loss_and_gradient(&self, x: &FactorMatrix) -> Result<(f64, FactorMatrix)> {
        self.check(x)?;
        let mut grad = FactorMatrix::zeros(x.d, x.r);
        let mut per_row = vec![0.0; self.d];
        grad.data
            .par_chunks_mut(x.r.max(1))
            .zip(per_row.par_iter_mut())
            .enumerate()
            .for_each(|(i, (g, l))| *l = self.row_terms(x, i, Some(g)));
        Ok((per_row.iter().sum(), grad))
    }

    /// Step size `1 / L` from a Gershgorin bound on the Hessian, with squared
    /// row norms taken as the larger of `T_hat_ii` and the current `||X_i||^2`.
    pub fn suggest_learning_rate(&self, x: &FactorMatrix) -> f64 {
        let q2 = self.cfg.q * self.cfg.q;
        let scale: Vec<f64> = (0..self.d)
            .map(|i| {
                let xi = x.row(i);
                self.diag[i].unwrap_or(0.0).max(dot(xi, xi)).max(0.0)
            })
            .collect();
        let bound = (0..self.d)
            .map(|i| {
                let s_i = scale[i];
                let off: f64 = (self.offsets[i]..self.offsets[i + 1])
                    .map(|k| {
                        let s_j = scale[self.neighbors[k]];
                        s_j + (s_i * s_j).sqrt()
                    })
                    .sum();
                let excess = (x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - self.cfg.alpha).max(0.0);
                2.0 * off + 6.0 * q2 * s_i + 12.0 * self.cfg.lambda * excess * excess
            })
            .fold(0.0, f64::max);
        1.0 / bound.max(f64::MIN_POSITIVE.sqrt())
    }
}

/// Residual terms in the loss: present diagonal entries plus both
/// orientations of every off-diagonal pair.
pub fn loss_terms(t_hat: &SecondMomentEstimate) -> usize {
    t_hat.diag().iter().flatten().count() + 2 * t_hat.offdiag().len()
}

/// Factor between a mean-squared data term and the summed `1/2 ||.||^2` one.
pub fn sum_scale(t_hat: &SecondMomentEstimate) -> f64 {
    loss_terms(t_hat).max(1) as f64 / 2.0
}

pub fn loss(x: &FactorMatrix, t_hat: &SecondMomentEstimate, cfg: &LossConfig) -> Result<f64> {
    Objective::new(t_hat, *cfg)?.loss(x)
}

pub fn gradient(x: &FactorMatrix, t_hat: &SecondMomentEstimate, cfg: &LossConfig) -> Result<FactorMatrix> {
    Objective::new(t_hat, *cfg)?.loss_and_gradient(x).map(|(_, g)| g)
}

/// `sum_i (||X_i|| - alpha)_+^4`.
pub fn regularizer(x: &FactorMatrix, alpha: f64) -> f64 {
    x.row_norms().iter().map(|&n| (n - alpha).max(0.0).powi(4)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ObservedHajek,
    ImputedFactor,
}

/// Hajek values on `Omega`, factor products elsewhere.
#[derive(Debug, Clone)]
pub struct RecoveredT {
    pub values: DMatrix<f64>,
    observed: Vec<bool>,
}

impl RecoveredT {
    pub fn assemble(t_hat: &SecondMomentEstimate, x: &FactorMatrix) -> Result<Self> {
        let d = t_hat.d();
        if x.d() != d {
            return Err(Error::DimensionMismatch(format!("factor has {} rows, estimate d = {d}", x.d())));
        }
        let mut values = x.gram();
        let mut observed = vec![false; d * d];
        for (i, v) in t_hat.diag().iter().enumerate() {
            if let Some(v) = v {
                values[(i, i)] = *v;
                observed[i * d + i] = true;
            }
        }
        for &(i, j, v) in t_hat.offdiag() {
            values[(i, j)] = v;
            values[(j, i)] = v;
            observed[i * d + j] = true;
            observed[j * d + i] = true;
        }
        Ok(RecoveredT { values, observed })
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn provenance(&self, i: usize, j: usize) -> Provenance {
        if self.observed[i * self.d() + j] {
            Provenance::ObservedHajek
        } else {
            Provenance::ImputedFactor
        }
    }

    /// Upper triangle (diagonal included) as `i j value` triplets.
    pub fn upper_triplets(&self) -> Vec<Triplet> {
        let d = self.d();
        (0..d)
            .flat_map(|i| (i..d).map(move |j| (i, j)))
            .map(|(i, j)| Triplet::new(i, j, self.values[(i, j)]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GdOutput {
    pub recovered: RecoveredT,
    pub factors: FactorMatrix,
    pub estimate: SecondMomentEstimate,
    pub trajectory: Vec<TrajectoryPoint>,
    pub learning_rate: f64,
    pub iterations_run: usize,
    /// Whether the gradient tolerance was reached (always false without one).
    pub converged: bool,
}

/// Plain fixed-step gradient descent from `x0`.
pub fn descend(
    objective: &Objective,
    mut x: FactorMatrix,
    gd: &GdConfig,
) -> Result<(FactorMatrix, Vec<TrajectoryPoint>, f64, usize, bool)> {
    gd.validate()?;
    let eta = gd.learning_rate.unwrap_or_else(|| objective.suggest_learning_rate(&x));
    let every = gd.record_every.max(1);
    let mut trajectory = Vec::new();
    for it in 0..=gd.iterations {
        let (loss, grad) = objective.loss_and_gradient(&x)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { iteration: it, loss });
        }
        let grad_norm = grad.norm();
        let stop = gd.tolerance.is_some_and(|tol| grad_norm < tol);
        if it % every == 0 || it == gd.iterations || stop {
            trajectory.push(TrajectoryPoint { iteration: it, loss, grad_norm });
        }
        if stop {
            return Ok((x, trajectory, eta, it, true));
        }
        if it == gd.iterations {
            break;
        }
        x.axpy(-eta, &grad);
    }
    Ok((x, trajectory, eta, gd.iterations, false))
}

/// Gradient descent on an existing estimate, from the `N(0, 1/d)` start.
pub fn run_gd(t_hat: &SecondMomentEstimate, cfg: &LossConfig, gd: &GdConfig) -> Result<GdOutput> {
    let objective = Objective::new(t_hat, *cfg)?;
    let x0 = FactorMatrix::random_init(t_hat.d(), cfg.rank, gd.seed);
    let (x, trajectory, learning_rate, iterations_run, converged) = descend(&objective, x0, gd)?;
    Ok(GdOutput {
        recovered: RecoveredT::assemble(t_hat, &x)?,
        factors: x,
        estimate: t_hat.clone(),
        trajectory,
        learning_rate,
        iterations_run,
        converged,
    })
}

/// Hajek estimate of `m` followed by gradient descent at the given rank.
pub fn hajek_gd(m: &ObservedMatrix, rank: usize, gd: &GdConfig, cfg: Option<LossConfig>) -> Result<GdOutput> {
    if rank == 0 {
        return Err(Error::InvalidParameter("rank must be at least 1".into()));
    }
    let co = moment::cooccurrence(m)?;
    let t_hat = moment::hajek(m, &co)?;
    let cfg = cfg.unwrap_or_else(|| LossConfig::for_estimate(&t_hat, rank));
    run_gd(&t_hat, &LossConfig { rank, ..cfg }, gd)
}

/// Incoherence-derived `(alpha, lambda)`:
/// `alpha = 4 kappa^2 r sqrt(mu / d)`, `lambda = (r + 1) d q / (16 r^2 mu^3)`.
pub fn default_hyperparameters(n: usize, d: usize, r: usize, p: f64, mu: f64, kappa: f64) -> (f64, f64) {
    let (df, rf) = (d as f64, r as f64);
    let q = moment::offdiag_probability(n, p);
    let alpha = 4.0 * kappa * kappa * rf * (mu / df).sqrt();
    let lambda = (rf + 1.0) * df * q / (16.0 * rf * rf * mu.powi(3));
    (alpha, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryError {
    pub squared: f64,
    pub frobenius: f64,
}

/// `||recovered - truth||_F^2` and its square root.
pub fn recovery_error(recovered: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<RecoveryError> {
    if recovered.shape() != truth.shape() {
        return Err(Error::DimensionMismatch(format!(
            "recovered is {:?}, truth is {:?}",
            recovered.shape(),
            truth.shape()
        )));
    }
    let squared = (recovered - truth).norm_squared();
    Ok(RecoveryError { squared, frobenius: squared.sqrt() })
}

pub fn write_trajectory<W: Write>(mut w: W, points: &[TrajectoryPoint]) -> Result<()> {
    writeln!(w, "iteration,loss,grad_norm")?;
    for p in points {
        writeln!(w, "{},{:?},{:?}", p.iteration, p.loss, p.grad_norm)?;
    }
    w.flush()?;
    Ok(())
}
