//! Gaussian-mechanism noise and empirical sensitivity of Hajek-GD.
//!
//! Sensitivity here is a sampled maximum over random one-row neighbours, so it
//! is a lower bound on the worst case; no formal privacy guarantee follows
//! from it.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{self, GdConfig, LossConfig};
use crate::rng::{self, tag};
use crate::sparse_io::{ObservedMatrix, Triplet};

pub const SENSITIVITY_CAVEAT: &str =
    "empirical sensitivity is a maximum over sampled neighbours, not a worst-case bound; no formal DP claim is made";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    pub sigma: f64,
}

impl DpParams {
    pub fn from_sensitivity(sensitivity: f64, epsilon: f64, delta: f64) -> Result<Self> {
        Ok(DpParams {
            epsilon,
            delta,
            sensitivity,
            sigma: calibrate_sigma(sensitivity, epsilon, delta)?,
        })
    }
}

/// Add independent `N(0, sigma^2)` to every observed value; the mask is kept.
pub fn add_gaussian_noise(m: &ObservedMatrix, sigma: f64, seed: u64) -> Result<ObservedMatrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let mut g = rng::stream_rng(rng::derive_seed(seed, tag::NOISE), 0);
    Ok(m.map_values(|_, t| t.value + sigma * rng::standard_normal(&mut g)))
}

/// `2 sqrt(ln(1.25 / delta)) * sensitivity / epsilon`.
pub fn calibrate_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !(delta > 0.0 && delta < 1.0) || !(sensitivity >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need epsilon > 0, 0 < delta < 1, sensitivity >= 0; got {epsilon}, {delta}, {sensitivity}"
        )));
    }
    Ok(2.0 * (1.25 / delta).ln().sqrt() * sensitivity / epsilon)
}

/// Replace the values of one random non-empty row by bootstrap draws from all
/// observed values; returns the neighbour and the row that changed.
pub fn random_neighbor(m: &ObservedMatrix, seed: u64, trial: u64) -> Result<(ObservedMatrix, usize)> {
    let nonempty: Vec<usize> = m.rows().filter(|(_, r)| !r.is_empty()).map(|(i, _)| i).collect();
    if nonempty.is_empty() {
        return Err(Error::EmptyInput("no observed rows to perturb".into()));
    }
    let mut g = rng::stream_rng(rng::derive_seed(seed, tag::TRIAL), trial);
    let row = nonempty[g.random_range(0..nonempty.len())];
    let pool = m.triplets();
    let neighbor = m.map_values(|_, t| {
        if t.row == row {
            pool[g.random_range(0..pool.len())].value
        } else {
            t.value
        }
    });
    Ok((neighbor, row))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub trials: usize,
    pub max_gap: f64,
    pub per_trial_gaps: Vec<f64>,
    pub changed_rows: Vec<usize>,
    pub gd_config: GdConfig,
    pub caveat: String,
}

/// Which matrix a gap is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapTarget {
    /// `T_hat` on Omega merged with `XX^T` elsewhere.
    Recovered,
    /// The GD factor product `XX^T` alone.
    FactorProduct,
}

fn recovered(m: &ObservedMatrix, rank: usize, gd: &GdConfig, cfg: Option<LossConfig>) -> Result<DMatrix<f64>> {
    output(m, rank, gd, cfg, GapTarget::Recovered)
}

fn output(m: &ObservedMatrix, rank: usize, gd: &GdConfig, cfg: Option<LossConfig>, target: GapTarget) -> Result<DMatrix<f64>> {
    let out = landscape::hajek_gd(m, rank, gd, cfg)?;
    Ok(match target {
        GapTarget::Recovered => out.recovered.values,
        GapTarget::FactorProduct => out.factors.gram(),
    })
}

/// `||A(M) - A(M')||_F` for Hajek-GD output `A`, with a shared init seed.
pub fn output_gap(
    m: &ObservedMatrix,
    neighbor: &ObservedMatrix,
    rank: usize,
    gd: &GdConfig,
    cfg: Option<LossConfig>,
) -> Result<f64> {
    let a = recovered(m, rank, gd, cfg)?;
    let b = recovered(neighbor, rank, gd, cfg)?;
    Ok((a - b).norm())
}

/// Maximum Frobenius gap between Hajek-GD on `m` and on `trials` random
/// one-row neighbours.
pub fn estimate_sensitivity(
    m: &ObservedMatrix,
    rank: usize,
    gd: &GdConfig,
    cfg: Option<LossConfig>,
    trials: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("need at least one trial".into()));
    }
    let base = recovered(m, rank, gd, cfg)?;
    let results: Vec<Result<(f64, usize)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let (nb, row) = random_neighbor(m, seed, t)?;
            let out = recovered(&nb, rank, gd, cfg)?;
            Ok(((out - &base).norm(), row))
        })
        .collect();
    let mut per_trial_gaps = Vec::with_capacity(trials);
    let mut changed_rows = Vec::with_capacity(trials);
    for r in results {
        let (gap, row) = r?;
        per_trial_gaps.push(gap);
        changed_rows.push(row);
    }
    Ok(SensitivityReport {
        trials,
        max_gap: per_trial_gaps.iter().copied().fold(0.0, f64::max),
        per_trial_gaps,
        changed_rows,
        gd_config: gd.clone(),
        caveat: SENSITIVITY_CAVEAT.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseResponse {
    pub sigmas: Vec<f64>,
    /// `||A(M + N_sigma) - A(M)||_F` for each sigma.
    pub gaps: Vec<f64>,
    /// Least-squares slope of gap against sigma.
    pub slope: f64,
    pub intercept: f64,
}

/// Output change of Hajek-GD as observed values are perturbed by Gaussian
/// noise of growing scale, summarized by a fitted line.
pub fn noise_response(
    m: &ObservedMatrix,
    rank: usize,
    gd: &GdConfig,
    cfg: Option<LossConfig>,
    sigmas: &[f64],
    seed: u64,
    target: GapTarget,
) -> Result<NoiseResponse> {
    if sigmas.len() < 2 {
        return Err(Error::InvalidParameter("need at least two noise levels".into()));
    }
    let base = output(m, rank, gd, cfg, target)?;
    let gaps: Vec<Result<f64>> = sigmas
        .par_iter()
        .map(|&s| {
            let noisy = add_gaussian_noise(m, s, seed)?;
            Ok((output(&noisy, rank, gd, cfg, target)? - &base).norm())
        })
        .collect();
    let gaps = gaps.into_iter().collect::<Result<Vec<_>>>()?;
    let (slope, intercept) = least_squares_line(sigmas, &gaps);
    Ok(NoiseResponse { sigmas: sigmas.to_vec(), gaps, slope, intercept })
}

/// Ordinary least-squares `(slope, intercept)` of `y` on `x`.
pub fn least_squares_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Noise-free copy of `m` with the values of `row` replaced by `values`.
pub fn replace_row(m: &ObservedMatrix, row: usize, values: &[f64]) -> Result<ObservedMatrix> {
    let cells = m.row(row);
    if cells.len() != values.len() {
        return Err(Error::DimensionMismatch(format!(
            "row {row} has {} observations, got {} values",
            cells.len(),
            values.len()
        )));
    }
    let mut trips: Vec<Triplet> = m.triplets().to_vec();
    for t in trips.iter_mut().filter(|t| t.row == row) {
        let k = cells.iter().position(|c| c.col == t.col).expect("cell in row");
        t.value = values[k];
    }
    ObservedMatrix::new(m.n_rows(), m.n_cols(), trips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ObservedMatrix {
        let trips = (0..40)
            .map(|k| Triplet::new(k / 4, (k * 7) % 10, 1.0 + (k % 5) as f64))
            .collect::<Vec<_>>();
        let mut trips = trips;
        trips.sort_by_key(|t| (t.row, t.col));
        trips.dedup_by_key(|t| (t.row, t.col));
        ObservedMatrix::new(10, 10, trips).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let m = small();
        assert_eq!(add_gaussian_noise(&m, 0.0, 3).unwrap(), m);
        assert!(add_gaussian_noise(&m, -1.0, 3).is_err());
    }

    #[test]
    fn noise_keeps_mask_and_is_deterministic() {
        let m = small();
        let a = add_gaussian_noise(&m, 0.5, 7).unwrap();
        let b = add_gaussian_noise(&m, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask(), m.mask());
        assert_ne!(a, m);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_sigma(0.0, 1.0, 0.1).unwrap(), 0.0);
        let delta = 1.25 / std::f64::consts::E;
        assert!((calibrate_sigma(1.0, 1.0, delta).unwrap() - 2.0).abs() < 1e-12);
        let a = calibrate_sigma(3.0, 0.5, 1e-5).unwrap();
        let b = calibrate_sigma(3.0, 1.0, 1e-5).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-12);
        assert!(calibrate_sigma(1.0, 0.0, 0.1).is_err());
        assert!(calibrate_sigma(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn identical_neighbor_has_zero_gap() {
        let m = small();
        let same = replace_row(&m, 2, &m.row(2).iter().map(|t| t.value).collect::<Vec<_>>()).unwrap();
        let gd = GdConfig { iterations: 50, ..GdConfig::default() };
        assert_eq!(output_gap(&m, &same, 2, &gd, None).unwrap(), 0.0);
    }

    #[test]
    fn neighbor_changes_one_row_only() {
        let m = small();
        let (nb, row) = random_neighbor(&m, 1, 0).unwrap();
        assert_eq!(nb.mask(), m.mask());
        for (a, b) in m.triplets().iter().zip(nb.triplets()) {
            if a.row != row {
                assert_eq!(a.value, b.value);
            }
        }
    }

    #[test]
    fn zero_noise_has_zero_response() {
        let m = small();
        let gd = GdConfig { iterations: 50, ..GdConfig::default() };
        for target in [GapTarget::Recovered, GapTarget::FactorProduct] {
            let r = noise_response(&m, 2, &gd, None, &[0.0, 0.0], 4, target).unwrap();
            assert_eq!(r.gaps, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn line_fit() {
        let (s, c) = least_squares_line(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }
}
