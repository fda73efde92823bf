use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use onesided::baselines::{self, BaselineConfig, Method, MAX_DENSE_CELLS};
use onesided::experiments::{self, HajekSettings, MethodSpec, MetricRow, RunReport, SweepPoint, SyntheticSetup};
use onesided::impute::{self, ImputeConfig, DEFAULT_RIDGE};
use onesided::landscape::{self, GdConfig, LossConfig, DEFAULT_ALPHA, DEFAULT_LAMBDA};
use onesided::moment::{self, SecondMomentEstimate};
use onesided::privacy::{self, GapTarget};
use onesided::sparse_io::{self, Format, ObservedMatrix};
use onesided::synth::{ModelConfig, ModelKind, SamplingScheme};
use onesided::dense_io;

use crate::{CliError, Globals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Uniform,
    FixedC,
    Snowball,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    Hajek,
    Ht,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodChoice {
    HajekGd,
    AltGd,
    SoftimputeAls,
    NuclearGd,
}

impl MethodChoice {
    fn baseline(self) -> Option<Method> {
        match self {
            MethodChoice::HajekGd => None,
            MethodChoice::AltGd => Some(Method::AltGd),
            MethodChoice::SoftimputeAls => Some(Method::SoftimputeAls),
            MethodChoice::NuclearGd => Some(Method::NuclearGd),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Error against d with n/d and C fixed.
    Dims,
    /// Error against the noise variance.
    Noise,
    /// Hajek-GD against the baselines.
    Methods,
    /// Regularizer grid against lambda = 0.
    Ablation,
    /// Squared bias on Omega, Hajek against Horvitz-Thompson, over a p grid.
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TargetChoice {
    Recovered,
    FactorProduct,
}

impl From<TargetChoice> for GapTarget {
    fn from(t: TargetChoice) -> Self {
        match t {
            TargetChoice::Recovered => GapTarget::Recovered,
            TargetChoice::FactorProduct => GapTarget::FactorProduct,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenerateArgs {
    /// gaussian-truncated or common-means.
    #[arg(long)]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    /// Per-entry noise scale of the common-means model.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Cap on the factor coherence.
    #[arg(long)]
    pub mu_target: Option<f64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeKind>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Entries per row (fixed-c) or expected entries per row (snowball).
    #[arg(long)]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// coo-text, movielens-csv or genotype-dense.
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorChoice>,
    /// Sampling rate; estimated from the data when absent.
    #[arg(long)]
    pub p: Option<f64>,
    /// Dense square ground truth for bias reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Report the bias of both estimators (needs --truth).
    #[arg(long)]
    #[serde(default)]
    pub compare: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CompleteArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Penalty weight per loss term (Hajek-GD) or the baseline's lambda.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ImputeArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Gaussian noise added to observed values before estimation.
    #[arg(long)]
    pub dp_sigma: Option<f64>,
    /// Fraction of observed cells held out for RMSE.
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Dense square estimate of T.
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Dense square ground truth T.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Dense imputed M.
    #[arg(long)]
    pub imputed: Option<PathBuf>,
    /// Held-out cells as coo-text.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub experiment: Option<Experiment>,
    #[arg(long)]
    pub kind: Option<ModelKind>,
    /// Column counts; only `dims` uses more than the first.
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    #[arg(long)]
    pub n_over_d: Option<f64>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeKind>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    /// Expected entries per row for the `bias` p grid (p = c / d).
    #[arg(long, value_delimiter = ',')]
    pub c_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Option<Vec<f64>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<MethodChoice>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Number of seeds per grid point.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Random one-row neighbours to sample.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Noise levels for the noise-response line.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub target: Option<TargetChoice>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn load_input(g: &Globals, input: Option<PathBuf>, format: Option<Format>) -> Result<(PathBuf, ObservedMatrix), CliError> {
    let path = require(input, "input")?;
    let loaded = sparse_io::load_triplets(&path, format.unwrap_or(Format::CooText))?;
    if let Some(ids) = loaded.id_map {
        ids.save(&g.out_dir.join("ids.json"))?;
    }
    Ok((path, loaded.matrix))
}

fn settings(g: &Globals, iterations: Option<usize>, lambda: Option<f64>, alpha: Option<f64>) -> HajekSettings {
    HajekSettings {
        lambda: lambda.unwrap_or(DEFAULT_LAMBDA),
        alpha: alpha.unwrap_or(DEFAULT_ALPHA),
        gd: GdConfig {
            iterations: iterations.unwrap_or(GdConfig::default().iterations),
            seed: g.seed,
            ..GdConfig::default()
        },
    }
}

fn scheme(kind: Option<SchemeKind>, p: Option<f64>, c: Option<f64>, default: SamplingScheme) -> Result<SamplingScheme, CliError> {
    let kind = match (kind, default) {
        (Some(k), _) => k,
        (None, SamplingScheme::UniformP { .. }) => SchemeKind::Uniform,
        (None, SamplingScheme::FixedC { .. }) => SchemeKind::FixedC,
        (None, SamplingScheme::Snowball { .. }) => SchemeKind::Snowball,
    };
    Ok(match kind {
        SchemeKind::Uniform => SamplingScheme::UniformP {
            p: match (p, default) {
                (Some(p), _) => p,
                (None, SamplingScheme::UniformP { p, .. }) => p,
                _ => return Err(CliError::Usage("uniform sampling needs --p".into())),
            },
            seed: 0,
        },
        SchemeKind::FixedC => {
            let c = match (c, default) {
                (Some(c), _) => c,
                (None, SamplingScheme::FixedC { c, .. }) => c as f64,
                _ => 2.0,
            };
            if c < 1.0 || c.fract() != 0.0 {
                return Err(CliError::Usage(format!("fixed-c needs a positive integer --c, got {c}")));
            }
            SamplingScheme::FixedC { c: c as usize, seed: 0 }
        }
        SchemeKind::Snowball => SamplingScheme::Snowball { c: c.unwrap_or(2.0), seed: 0 },
    })
}

fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    experiments::write_csv(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

fn artifact(report: &mut RunReport, path: &Path) {
    report.artifacts.push(path.display().to_string());
}

fn finish(g: &Globals, report: &RunReport) -> Result<(), CliError> {
    report.write_json(&g.out_dir.join("report.json"))?;
    let text = serde_json::to_string_pretty(report)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn row(experiment: &str, config: &str, seed: u64, metric: &str, value: f64) -> MetricRow {
    MetricRow {
        experiment: experiment.to_string(),
        config: config.to_string(),
        seed,
        metric: metric.to_string(),
        value,
    }
}

pub fn generate(g: &Globals, a: GenerateArgs) -> Result<(), CliError> {
    let n = require(a.n, "n")?;
    let d = require(a.d, "d")?;
    let setup = SyntheticSetup {
        model: ModelConfig {
            kind: a.kind.unwrap_or(ModelKind::GaussianTruncated),
            n,
            d,
            r: a.r.unwrap_or(10),
            noise_sigma: a.noise_sigma.unwrap_or(0.0),
            mu_target: a.mu_target,
            seed: 0,
        },
        scheme: scheme(a.scheme, a.p, a.c, SamplingScheme::FixedC { c: 2, seed: 0 })?,
    }
    .with_seed(g.seed);
    setup.scheme.validate(d)?;
    let (model, m) = setup.realize()?;
    let mut report = RunReport::new("generate", &setup, g.seed)?;
    model.save(&g.out_dir)?;
    for f in ["model.json", "m.bin", "factors.bin"] {
        artifact(&mut report, &g.out_dir.join(f));
    }
    let t_path = g.out_dir.join("t.bin");
    dense_io::save_dense_square(&t_path, &model.t)?;
    artifact(&mut report, &t_path);
    let mask_path = g.out_dir.join("mask.coo");
    sparse_io::save_coo_text(&m, &mask_path)?;
    artifact(&mut report, &mask_path);
    report
        .metric("nnz", m.nnz() as f64)
        .metric("nominal_p", setup.nominal_p())
        .metric("coherence", model.coherence)
        .metric("condition_number", model.condition_number);
    finish(g, &report)
}

fn omega_metrics(report: &mut RunReport, est: &SecondMomentEstimate) {
    let diag = est.diag().iter().filter(|v| v.is_some()).count();
    report
        .metric("omega_diag", diag as f64)
        .metric("omega_offdiag", est.offdiag().len() as f64)
        .metric("q", est.q());
}

pub fn estimate(g: &Globals, a: EstimateArgs) -> Result<(), CliError> {
    if a.compare && a.truth.is_none() {
        return Err(CliError::Usage("--compare needs --truth".into()));
    }
    let (input, m) = load_input(g, a.input.clone(), a.format)?;
    let co = moment::cooccurrence(&m)?;
    let p = match a.p {
        Some(p) => p,
        None => moment::estimate_p(&m)?,
    };
    let estimator = a.estimator.unwrap_or(EstimatorChoice::Hajek);
    let est = match estimator {
        EstimatorChoice::Hajek => moment::hajek(&m, &co)?,
        EstimatorChoice::Ht => moment::horvitz_thompson(&m, &co, p)?,
    };
    let config = json!({
        "input": input,
        "format": a.format.unwrap_or(Format::CooText),
        "estimator": estimator,
        "p": p,
        "truth": a.truth,
        "compare": a.compare,
    });
    let mut report = RunReport::new("estimate", &config, g.seed)?;
    let est_path = g.out_dir.join("t_hat.est");
    let mut w = BufWriter::new(File::create(&est_path)?);
    moment::write_estimate(&mut w, &est)?;
    w.flush()?;
    artifact(&mut report, &est_path);
    omega_metrics(&mut report, &est);
    if let Some(truth) = &a.truth {
        let t = dense_io::load_dense_square(truth)?;
        let bias = moment::bias_on_omega(&est, &t, false)?;
        report
            .metric("bias_diag", bias.sum_sq_bias_diag)
            .metric("bias_offdiag", bias.sum_sq_bias_offdiag);
        if a.compare {
            let cmp = experiments::bias_comparison(&t, &m, p)?;
            let mut rows = Vec::new();
            for (name, b) in [("hajek", &cmp.hajek), ("ht", &cmp.ht)] {
                rows.push(row("estimate", name, g.seed, "bias_diag", b.sum_sq_bias_diag));
                rows.push(row("estimate", name, g.seed, "bias_offdiag", b.sum_sq_bias_offdiag));
                rows.push(row("estimate", name, g.seed, "bias_total", b.total()));
            }
            let csv = g.out_dir.join("bias.csv");
            write_rows(&csv, &rows)?;
            artifact(&mut report, &csv);
            report
                .metric("bias_hajek", cmp.hajek.total())
                .metric("bias_ht", cmp.ht.total())
                .metric("bias_reduction", cmp.reduction);
        }
    }
    finish(g, &report)
}

fn error_metrics(report: &mut RunReport, estimate: &nalgebra::DMatrix<f64>, truth: &Path) -> Result<(), CliError> {
    let t = dense_io::load_dense_square(truth)?;
    let err = landscape::recovery_error(estimate, &t)?;
    report
        .metric("one_sided_error", err.frobenius)
        .metric("one_sided_error_squared", err.squared)
        .metric("relative_error", err.frobenius / t.norm());
    Ok(())
}

pub fn complete(g: &Globals, a: CompleteArgs) -> Result<(), CliError> {
    let (input, m) = load_input(g, a.input.clone(), a.format)?;
    let rank = a.rank.unwrap_or(10);
    let method = a.method.unwrap_or(MethodChoice::HajekGd);
    let t_path = g.out_dir.join("t.bin");
    let mut report;
    let t = match method.baseline() {
        None => {
            let mut s = settings(g, a.iterations, a.lambda, a.alpha);
            s.gd.learning_rate = a.learning_rate;
            s.gd.tolerance = a.tolerance;
            let spec = MethodSpec::Hajek(s.clone());
            report = RunReport::new("complete", &json!({ "input": input, "rank": rank, "settings": spec }), g.seed)?;
            let out = experiments::hajek_gd(&m, rank, &s)?;
            let rec_path = g.out_dir.join("recovered.bin");
            dense_io::save_dense_square(&rec_path, &out.recovered.values)?;
            artifact(&mut report, &rec_path);
            let x_path = g.out_dir.join("factors.bin");
            dense_io::save_dense(&x_path, &out.factors.to_dmatrix())?;
            artifact(&mut report, &x_path);
            let traj_path = g.out_dir.join("trajectory.csv");
            let mut w = BufWriter::new(File::create(&traj_path)?);
            landscape::write_trajectory(&mut w, &out.trajectory)?;
            w.flush()?;
            artifact(&mut report, &traj_path);
            if let Some(last) = out.trajectory.last() {
                report.metric("final_loss", last.loss).metric("final_grad_norm", last.grad_norm);
            }
            report
                .metric("learning_rate", out.learning_rate)
                .metric("iterations_run", out.iterations_run as f64);
            omega_metrics(&mut report, &out.estimate);
            report.converged = Some(out.converged);
            out.factors.gram()
        }
        Some(bm) => {
            let mut b = BaselineConfig::for_method(bm, rank, g.seed);
            if let Some(i) = a.iterations {
                b.max_iters = i;
            }
            if a.learning_rate.is_some() {
                b.learning_rate = a.learning_rate;
            }
            if let Some(l) = a.lambda {
                b.lambda = l;
            }
            if let Some(t) = a.tolerance {
                b.conv_tol = t;
            }
            report = RunReport::new("complete", &json!({ "input": input, "rank": rank, "settings": MethodSpec::Baseline(b.clone()) }), g.seed)?;
            let out = baselines::run_baseline(&m, &b)?;
            if let Some(c) = &out.completion {
                let c_path = g.out_dir.join("completion.bin");
                dense_io::save_dense(&c_path, c)?;
                artifact(&mut report, &c_path);
            }
            report.metric("iterations_run", out.iterations as f64);
            report.converged = Some(out.converged);
            out.t
        }
    };
    dense_io::save_dense_square(&t_path, &t)?;
    artifact(&mut report, &t_path);
    if let Some(truth) = &a.truth {
        error_metrics(&mut report, &t, truth)?;
    }
    finish(g, &report)
}

pub fn impute(g: &Globals, a: ImputeArgs) -> Result<(), CliError> {
    let (input, m) = load_input(g, a.input.clone(), a.format)?;
    let rank = a.rank.unwrap_or(10);
    let s = settings(g, a.iterations, a.lambda, a.alpha);
    let cfg = ImputeConfig {
        rank,
        ridge: a.ridge.unwrap_or(DEFAULT_RIDGE),
        dp_sigma: a.dp_sigma,
        noise_seed: g.seed,
    };
    let mut report = RunReport::new(
        "impute",
        &json!({ "input": input, "impute": cfg, "settings": s, "holdout_fraction": a.holdout_fraction }),
        g.seed,
    )?;
    let (train, holdout) = match a.holdout_fraction {
        Some(f) => {
            let (train, spec) = sparse_io::split(&m, 1.0 - f, g.seed)?;
            (train, Some(spec.holdout))
        }
        None => (m, None),
    };
    let t_hat = moment::hajek(&train, &moment::cooccurrence(&train)?)?;
    let loss = LossConfig::per_term(&t_hat, rank, s.lambda, s.alpha);
    let out = impute::impute_pipeline(&train, &cfg, &s.gd, Some(loss), holdout.as_deref())?;

    let basis_path = g.out_dir.join("subspace.bin");
    dense_io::save_dense(&basis_path, &out.subspace.basis)?;
    artifact(&mut report, &basis_path);
    let (n, d) = (train.n_rows(), train.n_cols());
    if n.saturating_mul(d) <= MAX_DENSE_CELLS {
        let path = g.out_dir.join("imputed.bin");
        dense_io::save_dense(&path, &out.rows.reconstruction())?;
        artifact(&mut report, &path);
    } else {
        report.notes.push(format!("imputed matrix not written: {n}x{d} exceeds the dense output limit"));
    }
    if let Some(h) = &holdout {
        let path = g.out_dir.join("holdout.coo");
        let mut w = BufWriter::new(File::create(&path)?);
        sparse_io::write_coo_text(&mut w, n, d, h)?;
        w.flush()?;
        artifact(&mut report, &path);
    }
    if out.subspace.negative_eigenvalues > 0 {
        let msg = format!(
            "{} of the top {rank} eigenvalues of the recovered matrix are negative; kept by magnitude",
            out.subspace.negative_eigenvalues
        );
        eprintln!("warning: {msg}");
        report.notes.push(msg);
    }
    if let Some(rmse) = out.rmse {
        report.metric("rmse", rmse);
    }
    report
        .metric("empty_rows", out.rows.empty_rows.len() as f64)
        .metric("pseudo_inverse_rows", out.rows.pseudo_inverse_rows.len() as f64)
        .metric("negative_eigenvalues", out.subspace.negative_eigenvalues as f64);
    report.converged = Some(out.gd.converged);
    finish(g, &report)
}

pub fn evaluate(g: &Globals, a: EvaluateArgs) -> Result<(), CliError> {
    let mut report = RunReport::new("evaluate", &a, g.seed)?;
    let mut scored = false;
    match (&a.estimate, &a.truth) {
        (Some(e), Some(t)) => {
            error_metrics(&mut report, &dense_io::load_dense_square(e)?, t)?;
            scored = true;
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--estimate and --truth go together".into())),
    }
    match (&a.imputed, &a.holdout) {
        (Some(i), Some(h)) => {
            let imputed = dense_io::load_dense(i)?;
            let shape = (imputed.nrows(), imputed.ncols());
            let cells = sparse_io::parse_coo_text(BufReader::new(File::open(h)?), Some(shape))?;
            if cells.is_empty() {
                return Err(onesided::Error::EmptyInput("holdout has no cells".into()).into());
            }
            let sse: f64 = cells.triplets().iter().map(|t| (imputed[(t.row, t.col)] - t.value).powi(2)).sum();
            report
                .metric("rmse", (sse / cells.nnz() as f64).sqrt())
                .metric("holdout_cells", cells.nnz() as f64);
            scored = true;
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--imputed and --holdout go together".into())),
    }
    if !scored {
        return Err(CliError::Usage("give --estimate with --truth, or --imputed with --holdout".into()));
    }
    finish(g, &report)
}

fn model(kind: ModelKind, n: usize, d: usize, r: usize, noise_sigma: f64) -> ModelConfig {
    ModelConfig {
        kind,
        n,
        d,
        r,
        noise_sigma,
        mu_target: None,
        seed: 0,
    }
}

fn label_means(results: &[experiments::SweepResult]) -> BTreeMap<String, Vec<f64>> {
    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        by_label
            .entry(format!("{}/{}", r.label, r.method))
            .or_default()
            .push(r.one_sided_error);
    }
    by_label
}

pub fn sweep(g: &Globals, a: SweepArgs) -> Result<(), CliError> {
    let experiment = require(a.experiment, "experiment")?;
    let seeds: Vec<u64> = (1..=a.seeds.unwrap_or(3)).map(|k| g.seed + k).collect();
    let r = a.r.unwrap_or(10);
    let rank = a.rank.unwrap_or(r);
    let s = settings(g, a.iterations, None, None);
    let hajek = MethodSpec::Hajek(s.clone());
    let first_d = |default: usize| a.d.as_ref().and_then(|v| v.first().copied()).unwrap_or(default);
    let n_for = |d: usize| (a.n_over_d.unwrap_or(10.0) * d as f64).round() as usize;
    let kind = |default: ModelKind| a.kind.unwrap_or(default);
    let name = format!("{experiment:?}").to_lowercase();
    let mut report = RunReport::new("sweep", &json!({ "experiment": experiment, "args": a, "settings": s, "seeds": seeds }), g.seed)?;
    let mut rows = Vec::new();

    let mut points = Vec::new();
    match experiment {
        Experiment::Dims => {
            let sch = scheme(a.scheme, a.p, a.c, SamplingScheme::FixedC { c: 5, seed: 0 })?;
            for &d in a.d.as_deref().unwrap_or(&[250, 500, 1000]) {
                let setup = SyntheticSetup { model: model(kind(ModelKind::GaussianTruncated), n_for(d), d, r, 0.0), scheme: sch };
                points.extend(seeds.iter().map(|&seed| SweepPoint { label: format!("d={d}"), setup: setup.clone(), method: hajek.clone(), rank, seed }));
            }
        }
        Experiment::Noise => {
            let d = first_d(300);
            let sch = scheme(a.scheme, a.p, a.c, SamplingScheme::UniformP { p: 2.0 / d as f64, seed: 0 })?;
            let default: Vec<f64> = (1..=10).map(f64::from).collect();
            for &s2 in a.sigma2.as_deref().unwrap_or(&default) {
                let setup = SyntheticSetup { model: model(kind(ModelKind::CommonMeans), n_for(d), d, r, s2.sqrt()), scheme: sch };
                points.extend(seeds.iter().map(|&seed| SweepPoint { label: format!("sigma2={s2}"), setup: setup.clone(), method: hajek.clone(), rank, seed }));
            }
        }
        Experiment::Methods => {
            let d = first_d(500);
            let sch = scheme(a.scheme, a.p, a.c, SamplingScheme::FixedC { c: 2, seed: 0 })?;
            let setup = SyntheticSetup { model: model(kind(ModelKind::GaussianTruncated), n_for(d), d, r, 0.0), scheme: sch };
            let all = [MethodChoice::HajekGd, MethodChoice::AltGd, MethodChoice::SoftimputeAls, MethodChoice::NuclearGd];
            for &mc in a.methods.as_deref().unwrap_or(&all) {
                let method = match mc.baseline() {
                    None => hajek.clone(),
                    Some(b) => {
                        let mut cfg = BaselineConfig::for_method(b, rank, 0);
                        if let Some(i) = a.iterations {
                            cfg.max_iters = i;
                        }
                        MethodSpec::Baseline(cfg)
                    }
                };
                points.extend(seeds.iter().map(|&seed| SweepPoint { label: format!("d={d}"), setup: setup.clone(), method: method.clone(), rank, seed }));
            }
        }
        Experiment::Ablation => {
            let d = first_d(500);
            let sch = scheme(a.scheme, a.p, a.c, SamplingScheme::UniformP { p: 10.0 / d as f64, seed: 0 })?;
            let base = SyntheticSetup { model: model(kind(ModelKind::GaussianTruncated), n_for(d), d, r, 0.0), scheme: sch };
            let lambdas = a.lambdas.clone().unwrap_or_else(|| vec![1e-4, 1e-3, 1e-2]);
            let alphas = a.alphas.clone().unwrap_or_else(|| vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1]);
            let mut gains = Vec::new();
            for &seed in &seeds {
                let (truth, m) = base.with_seed(seed).realize()?;
                let gd = GdConfig { seed, ..s.gd.clone() };
                let ab = experiments::regularizer_ablation(&m, &truth.t, rank, &lambdas, &alphas, &gd)?;
                rows.push(row(&name, "lambda=0;alpha=0", seed, "one_sided_error", ab.unregularized));
                for c in &ab.cells {
                    rows.push(row(&name, &format!("lambda={};alpha={}", c.lambda, c.alpha), seed, "one_sided_error", c.error));
                }
                gains.push(ab.improvement());
            }
            report.metric("mean_improvement", experiments::mean(&gains));
        }
        Experiment::Bias => {
            let d = first_d(200);
            let grid = a.c_grid.clone().unwrap_or_else(|| vec![2.0, 4.0, 6.0, 8.0, 10.0]);
            let mut reductions = Vec::new();
            for &seed in &seeds {
                for &c in &grid {
                    let p = c / d as f64;
                    let setup = SyntheticSetup {
                        model: model(kind(ModelKind::GaussianTruncated), n_for(d), d, r, 0.0),
                        scheme: SamplingScheme::UniformP { p, seed: 0 },
                    }
                    .with_seed(seed);
                    let (truth, m) = setup.realize()?;
                    let cmp = experiments::bias_comparison(&truth.t, &m, p)?;
                    let label = format!("p={c}/d");
                    rows.push(row(&name, &label, seed, "bias_hajek", cmp.hajek.total()));
                    rows.push(row(&name, &label, seed, "bias_ht", cmp.ht.total()));
                    rows.push(row(&name, &label, seed, "reduction", cmp.reduction));
                    reductions.push(cmp.reduction);
                }
            }
            report.metric("mean_reduction", experiments::mean(&reductions));
        }
    }

    if !points.is_empty() {
        let results = experiments::run_sweep(&points).into_iter().collect::<onesided::Result<Vec<_>>>()?;
        for r in &results {
            rows.extend(r.rows(&name));
        }
        report.metric("runtime_seconds", results.iter().map(|r| r.runtime_seconds).sum());
        report.converged = Some(results.iter().all(|r| r.converged));
        let means = label_means(&results);
        let mut curve = Vec::new();
        for (label, errs) in &means {
            let m = experiments::mean(errs);
            report.metric(&format!("mean_error[{label}]"), m);
            curve.push(m);
        }
        match experiment {
            Experiment::Dims => {
                report.metric("max_min_ratio", experiments::max_min_ratio(&curve));
            }
            Experiment::Noise => {
                let grid: Vec<f64> = points.iter().step_by(seeds.len()).map(|p| p.setup.model.noise_sigma.powi(2)).collect();
                let ordered: Vec<f64> = results
                    .chunks(seeds.len())
                    .map(|chunk| experiments::mean(&chunk.iter().map(|r| r.one_sided_error).collect::<Vec<_>>()))
                    .collect();
                report.metric("r_squared", experiments::r_squared(&grid, &ordered));
            }
            _ => {}
        }
    }
    let csv = g.out_dir.join("results.csv");
    write_rows(&csv, &rows)?;
    artifact(&mut report, &csv);
    finish(g, &report)
}

pub fn sensitivity(g: &Globals, a: SensitivityArgs) -> Result<(), CliError> {
    let (input, m) = load_input(g, a.input.clone(), a.format)?;
    let rank = a.rank.unwrap_or(10);
    let trials = a.trials.unwrap_or(20);
    let target = a.target.unwrap_or(TargetChoice::FactorProduct);
    let s = settings(g, a.iterations, a.lambda, a.alpha);
    let t_hat = moment::hajek(&m, &moment::cooccurrence(&m)?)?;
    let cfg = LossConfig::per_term(&t_hat, rank, s.lambda, s.alpha);
    let mut report = RunReport::new(
        "sensitivity",
        &json!({ "input": input, "rank": rank, "trials": trials, "sigmas": a.sigmas, "target": target, "settings": s }),
        g.seed,
    )?;
    let sens = privacy::estimate_sensitivity(&m, rank, &s.gd, Some(cfg), trials, g.seed)?;
    let mut rows: Vec<MetricRow> = sens
        .per_trial_gaps
        .iter()
        .zip(&sens.changed_rows)
        .enumerate()
        .map(|(k, (&gap, &changed))| row("sensitivity", &format!("trial={k};row={changed}"), g.seed, "gap", gap))
        .collect();
    report.metric("max_gap", sens.max_gap).metric("trials", trials as f64);
    report.notes.push(sens.caveat.clone());
    match (a.epsilon, a.delta) {
        (Some(eps), delta) => {
            let p = privacy::DpParams::from_sensitivity(sens.max_gap, eps, delta.unwrap_or(1e-5))?;
            report.metric("epsilon", p.epsilon).metric("delta", p.delta).metric("dp_sigma", p.sigma);
        }
        (None, Some(_)) => return Err(CliError::Usage("--delta needs --epsilon".into())),
        (None, None) => {}
    }
    if let Some(sigmas) = &a.sigmas {
        let resp = privacy::noise_response(&m, rank, &s.gd, Some(cfg), sigmas, g.seed, target.into())?;
        for (sigma, gap) in resp.sigmas.iter().zip(&resp.gaps) {
            rows.push(row("noise-response", &format!("sigma={sigma}"), g.seed, "gap", *gap));
        }
        report.metric("slope", resp.slope).metric("intercept", resp.intercept);
    }
    let csv = g.out_dir.join("sensitivity.csv");
    write_rows(&csv, &rows)?;
    artifact(&mut report, &csv);
    finish(g, &report)
}
