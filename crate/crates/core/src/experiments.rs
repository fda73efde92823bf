//! Seeded simulation harness shared by the command-line tool and the
//! acceptance suite: method runs, sweeps, estimator comparisons and reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig};
use crate::error::{Error, Result};
use crate::impute::{self, ImputeConfig};
use crate::landscape::{self, GdConfig, GdOutput, LossConfig, DEFAULT_ALPHA, DEFAULT_LAMBDA};
use crate::moment::{self, BiasReport};
use crate::privacy::{self, GapTarget, NoiseResponse};
use crate::rng;
use crate::sparse_io::{self, ObservedMatrix};
use crate::synth::{self, ModelConfig, SamplingScheme, SyntheticModel};

/// Configuration, metrics and artifacts of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub converged: Option<bool>,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self> {
        Ok(RunReport {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            metrics: BTreeMap::new(),
            seed,
            artifacts: Vec::new(),
            converged: None,
            notes: Vec::new(),
        })
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// One row of a tidy results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub config: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "experiment,config,seed,metric,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.experiment, r.config, r.seed, r.metric, r.value)?;
    }
    Ok(())
}

/// Hajek-GD settings with the penalty weight given per loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HajekSettings {
    pub lambda: f64,
    pub alpha: f64,
    pub gd: GdConfig,
}

impl Default for HajekSettings {
    fn default() -> Self {
        HajekSettings {
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            gd: GdConfig::default(),
        }
    }
}

impl HajekSettings {
    pub fn with_seed(&self, seed: u64) -> Self {
        HajekSettings {
            gd: GdConfig { seed, ..self.gd.clone() },
            ..self.clone()
        }
    }
}

/// Hajek estimate plus gradient descent with per-term penalty scaling.
pub fn hajek_gd(m: &ObservedMatrix, rank: usize, s: &HajekSettings) -> Result<GdOutput> {
    let co = moment::cooccurrence(m)?;
    let t_hat = moment::hajek(m, &co)?;
    let cfg = LossConfig::per_term(&t_hat, rank, s.lambda, s.alpha);
    landscape::run_gd(&t_hat, &cfg, &s.gd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MethodSpec {
    Hajek(HajekSettings),
    Baseline(BaselineConfig),
}

impl MethodSpec {
    pub fn name(&self) -> String {
        match self {
            MethodSpec::Hajek(_) => "hajek-gd".to_string(),
            MethodSpec::Baseline(b) => b.method.to_string(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            MethodSpec::Hajek(s) => MethodSpec::Hajek(s.with_seed(seed)),
            MethodSpec::Baseline(b) => MethodSpec::Baseline(BaselineConfig { seed, ..b.clone() }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub t: DMatrix<f64>,
    pub converged: bool,
    pub runtime_seconds: f64,
}

/// Estimate of `T` by any method: `X X^T` for the factor methods, the second
/// moment of the completion for the others.
pub fn estimate_t(m: &ObservedMatrix, rank: usize, spec: &MethodSpec) -> Result<MethodRun> {
    let start = Instant::now();
    let (t, converged) = match spec {
        MethodSpec::Hajek(s) => {
            let out = hajek_gd(m, rank, s)?;
            (out.factors.gram(), out.converged)
        }
        MethodSpec::Baseline(b) => {
            let out = baselines::run_baseline(m, &BaselineConfig { rank, ..b.clone() })?;
            (out.t, out.converged)
        }
    };
    Ok(MethodRun { t, converged, runtime_seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetup {
    pub model: ModelConfig,
    pub scheme: SamplingScheme,
}

impl SyntheticSetup {
    pub fn realize(&self) -> Result<(SyntheticModel, ObservedMatrix)> {
        let model = self.model.generate()?;
        let m = synth::sample_mask(&model, &self.scheme)?;
        Ok((model, m))
    }

    /// Same setup with model and mask seeds derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mask_seed = rng::derive_seed(seed, rng::tag::MASK);
        let scheme = match self.scheme {
            SamplingScheme::UniformP { p, .. } => SamplingScheme::UniformP { p, seed: mask_seed },
            SamplingScheme::FixedC { c, .. } => SamplingScheme::FixedC { c, seed: mask_seed },
            SamplingScheme::Snowball { c, .. } => SamplingScheme::Snowball { c, seed: mask_seed },
        };
        SyntheticSetup {
            model: ModelConfig { seed, ..self.model.clone() },
            scheme,
        }
    }

    /// Marginal per-cell observation probability of the scheme.
    pub fn nominal_p(&self) -> f64 {
        match self.scheme {
            SamplingScheme::UniformP { p, .. } => p,
            SamplingScheme::FixedC { c, .. } => c as f64 / self.model.d as f64,
            SamplingScheme::Snowball { c, .. } => (c / self.model.d as f64).min(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasComparison {
    pub p: f64,
    pub hajek: BiasReport,
    pub ht: BiasReport,
    /// `1 - hajek / ht` on the summed squared bias.
    pub reduction: f64,
}

/// Squared error on Omega of the Hajek and Horvitz-Thompson estimates, the
/// latter weighted with the known `p`.
pub fn bias_comparison(truth: &DMatrix<f64>, m: &ObservedMatrix, p: f64) -> Result<BiasComparison> {
    let co = moment::cooccurrence(m)?;
    let hajek = moment::bias_on_omega(&moment::hajek(m, &co)?, truth, false)?;
    let ht = moment::bias_on_omega(&moment::horvitz_thompson(m, &co, p)?, truth, false)?;
    let reduction = if ht.total() > 0.0 { 1.0 - hajek.total() / ht.total() } else { 0.0 };
    Ok(BiasComparison { p, hajek, ht, reduction })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComparison {
    pub p: f64,
    pub n: usize,
    pub reps: usize,
    /// Off-diagonal pairs observed in at least two repetitions.
    pub pairs: usize,
    pub mean_var_hajek: f64,
    pub mean_var_ht: f64,
    pub ratio: f64,
}

struct Moments {
    count: Vec<u32>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments { count: vec![0; len], sum: vec![0.0; len], sum_sq: vec![0.0; len] }
    }

    fn add(&mut self, k: usize, v: f64) {
        self.count[k] += 1;
        self.sum[k] += v;
        self.sum_sq[k] += v * v;
    }

    fn merge(mut self, o: Moments) -> Self {
        for k in 0..self.count.len() {
            self.count[k] += o.count[k];
            self.sum[k] += o.sum[k];
            self.sum_sq[k] += o.sum_sq[k];
        }
        self
    }

    fn variance(&self, k: usize, total: u32) -> f64 {
        let c = total as f64;
        let mean = self.sum[k] / c;
        (self.sum_sq[k] - c * mean * mean) / (c - 1.0)
    }
}

/// Monte Carlo variance of off-diagonal entries over `reps` uniform masks on a
/// fixed `m_true`: Hajek conditional on the pair being in Omega, HT over all
/// draws (zero when unobserved).
pub fn variance_comparison(m_true: &DMatrix<f64>, p: f64, reps: usize, seed: u64) -> Result<VarianceComparison> {
    if reps < 2 {
        return Err(Error::InvalidParameter("need at least two repetitions".into()));
    }
    let (n, d) = m_true.shape();
    let idx = |i: usize, j: usize| i * d + j;
    let (hajek, ht) = (0..reps as u64)
        .into_par_iter()
        .map(|rep| -> Result<(Moments, Moments)> {
            let scheme = SamplingScheme::UniformP { p, seed: rng::derive_seed(seed, rep) };
            let m = synth::observe_dense(m_true, &scheme)?;
            let co = moment::cooccurrence(&m)?;
            let mut a = Moments::new(d * d);
            let mut b = Moments::new(d * d);
            if m.is_empty() {
                return Ok((a, b));
            }
            for &(i, j, v) in moment::hajek_with_p(&m, &co, p)?.offdiag() {
                a.add(idx(i, j), v);
            }
            for &(i, j, v) in moment::horvitz_thompson(&m, &co, p)?.offdiag() {
                b.add(idx(i, j), v);
            }
            Ok((a, b))
        })
        .try_reduce(
            || (Moments::new(d * d), Moments::new(d * d)),
            |x, y| Ok((x.0.merge(y.0), x.1.merge(y.1))),
        )?;
    let mut pairs = 0usize;
    let (mut vh, mut vt) = (0.0, 0.0);
    for i in 0..d {
        for j in i + 1..d {
            let k = idx(i, j);
            if hajek.count[k] >= 2 {
                pairs += 1;
                vh += hajek.variance(k, hajek.count[k]);
                vt += ht.variance(k, reps as u32);
            }
        }
    }
    if pairs == 0 {
        return Err(Error::EmptyInput("no off-diagonal pair was observed twice".into()));
    }
    let (mean_var_hajek, mean_var_ht) = (vh / pairs as f64, vt / pairs as f64);
    Ok(VarianceComparison {
        p,
        n,
        reps,
        pairs,
        mean_var_hajek,
        mean_var_ht,
        ratio: mean_var_ht / mean_var_hajek,
    })
}

/// One cell of a sweep: a synthetic setup, a method and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub setup: SyntheticSetup,
    pub method: MethodSpec,
    pub rank: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub one_sided_error: f64,
    pub relative_error: f64,
    pub runtime_seconds: f64,
    pub coherence: f64,
    pub condition_number: f64,
    pub converged: bool,
}

impl SweepResult {
    /// Tidy rows of the deterministic metrics; runtime is left out so reruns
    /// produce identical tables.
    pub fn rows(&self, experiment: &str) -> Vec<MetricRow> {
        let config = format!("{}/{}", self.label, self.method);
        [
            ("one_sided_error", self.one_sided_error),
            ("relative_error", self.relative_error),
            ("coherence", self.coherence),
            ("condition_number", self.condition_number),
        ]
        .into_iter()
        .map(|(metric, value)| MetricRow {
            experiment: experiment.to_string(),
            config: config.clone(),
            seed: self.seed,
            metric: metric.to_string(),
            value,
        })
        .collect()
    }
}

pub fn run_point(point: &SweepPoint) -> Result<SweepResult> {
    let setup = point.setup.with_seed(point.seed);
    let (model, m) = setup.realize()?;
    let run = estimate_t(&m, point.rank, &point.method.with_seed(point.seed))?;
    let err = landscape::recovery_error(&run.t, &model.t)?.frobenius;
    Ok(SweepResult {
        label: point.label.clone(),
        method: point.method.name(),
        seed: point.seed,
        one_sided_error: err,
        relative_error: err / model.t.norm(),
        runtime_seconds: run.runtime_seconds,
        coherence: model.coherence,
        condition_number: model.condition_number,
        converged: run.converged,
    })
}

/// Points run concurrently; results come back in input order.
pub fn run_sweep(points: &[SweepPoint]) -> Vec<Result<SweepResult>> {
    points.par_iter().map(run_point).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Largest over smallest of positive values.
pub fn max_min_ratio(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

/// Coefficient of determination of the least-squares line of `y` on `x`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let (slope, intercept) = privacy::least_squares_line(x, y);
    let my = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (slope * a + intercept);
            e * e
        })
        .sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub lambda: f64,
    pub alpha: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub unregularized: f64,
    pub cells: Vec<AblationCell>,
}

impl Ablation {
    pub fn best(&self) -> Option<AblationCell> {
        self.cells.iter().copied().min_by(|a, b| a.error.total_cmp(&b.error))
    }

    /// Relative error reduction of the best cell over `lambda = 0`.
    pub fn improvement(&self) -> f64 {
        self.best().map_or(0.0, |b| 1.0 - b.error / self.unregularized)
    }
}

/// One-sided error over a `(lambda, alpha)` grid and at `lambda = 0`, all from
/// the same start.
pub fn regularizer_ablation(
    m: &ObservedMatrix,
    truth: &DMatrix<f64>,
    rank: usize,
    lambdas: &[f64],
    alphas: &[f64],
    gd: &GdConfig,
) -> Result<Ablation> {
    let co = moment::cooccurrence(m)?;
    let t_hat = moment::hajek(m, &co)?;
    let error = |lambda: f64, alpha: f64| -> Result<f64> {
        let cfg = LossConfig::per_term(&t_hat, rank, lambda, alpha);
        let out = landscape::run_gd(&t_hat, &cfg, gd)?;
        Ok(landscape::recovery_error(&out.factors.gram(), truth)?.frobenius)
    };
    let grid: Vec<(f64, f64)> = lambdas.iter().flat_map(|&l| alphas.iter().map(move |&a| (l, a))).collect();
    let cells = grid
        .par_iter()
        .map(|&(lambda, alpha)| Ok(AblationCell { lambda, alpha, error: error(lambda, alpha)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ablation { unregularized: error(0.0, 0.0)?, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationResult {
    pub rmse: f64,
    pub holdout_cells: usize,
    pub empty_rows: usize,
    pub pseudo_inverse_rows: usize,
    pub negative_eigenvalues: usize,
}

/// Split observed cells, run the imputation pipeline on the training part and
/// score it on the held-out cells.
pub fn imputation_experiment(
    m: &ObservedMatrix,
    train_fraction: f64,
    cfg: &ImputeConfig,
    s: &HajekSettings,
    split_seed: u64,
) -> Result<ImputationResult> {
    let (train, spec) = sparse_io::split(m, train_fraction, split_seed)?;
    let co = moment::cooccurrence(&train)?;
    let t_hat = moment::hajek(&train, &co)?;
    let loss = LossConfig::per_term(&t_hat, cfg.rank, s.lambda, s.alpha);
    let out = impute::impute_pipeline(&train, cfg, &s.gd, Some(loss), Some(&spec.holdout))?;
    Ok(ImputationResult {
        rmse: out.rmse.ok_or_else(|| Error::EmptyInput("no held-out cell in an imputed row".into()))?,
        holdout_cells: spec.holdout.len(),
        empty_rows: out.rows.empty_rows.len(),
        pseudo_inverse_rows: out.rows.pseudo_inverse_rows.len(),
        negative_eigenvalues: out.subspace.negative_eigenvalues,
    })
}

/// Change of the Hajek-GD factor product against input noise level, with the
/// penalty scaled from the noiseless estimate (noise leaves the mask unchanged).
pub fn sensitivity_slope(
    m: &ObservedMatrix,
    rank: usize,
    s: &HajekSettings,
    sigmas: &[f64],
    seed: u64,
) -> Result<NoiseResponse> {
    let co = moment::cooccurrence(m)?;
    let t_hat = moment::hajek(m, &co)?;
    let cfg = LossConfig::per_term(&t_hat, rank, s.lambda, s.alpha);
    privacy::noise_response(m, rank, &s.gd, Some(cfg), sigmas, seed, GapTarget::FactorProduct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ModelKind;

    fn setup() -> SyntheticSetup {
        SyntheticSetup {
            model: ModelConfig {
                kind: ModelKind::GaussianTruncated,
                n: 300,
                d: 30,
                r: 3,
                noise_sigma: 0.0,
                mu_target: None,
                seed: 1,
            },
            scheme: SamplingScheme::FixedC { c: 5, seed: 2 },
        }
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let s = HajekSettings { gd: GdConfig { iterations: 50, ..GdConfig::default() }, ..HajekSettings::default() };
        let points: Vec<SweepPoint> = (0..3)
            .map(|k| SweepPoint {
                label: format!("k{k}"),
                setup: setup(),
                method: MethodSpec::Hajek(s.clone()),
                rank: 3,
                seed: k,
            })
            .collect();
        let a: Vec<SweepResult> = run_sweep(&points).into_iter().collect::<Result<_>>().unwrap();
        let b: Vec<SweepResult> = run_sweep(&points).into_iter().collect::<Result<_>>().unwrap();
        assert_eq!(a.iter().map(|r| r.one_sided_error).collect::<Vec<_>>(), b.iter().map(|r| r.one_sided_error).collect::<Vec<_>>());
        assert_eq!(a[2].label, "k2");
    }

    #[test]
    fn r_squared_of_exact_line() {
        assert!((r_squared(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!(r_squared(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, 1.0, -1.0]) < 0.5);
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        let row = MetricRow {
            experiment: "e".into(),
            config: "d=10".into(),
            seed: 3,
            metric: "rmse".into(),
            value: 0.25,
        };
        write_csv(&mut out, &[row]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "experiment,config,seed,metric,value\ne,d=10,3,rmse,0.25\n");
    }

    #[test]
    fn report_serializes() {
        let mut r = RunReport::new("estimate", &setup(), 4).unwrap();
        r.metric("bias_diag", 1e-3);
        let back: RunReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn variance_comparison_runs() {
        let model = setup().model.generate().unwrap();
        let v = variance_comparison(&model.m, 0.3, 20, 5).unwrap();
        assert!(v.pairs > 0);
        assert!(v.mean_var_hajek > 0.0 && v.mean_var_ht > 0.0);
    }
}
