//! Command-line driver: training, scoring, simulation, fold studies,
//! rank ablations, derivative checks and timing sweeps over the library.
//!
//! Every subcommand reads an optional TOML run configuration and lets
//! command-line flags override individual values. Runs that produce files
//! echo the fully resolved configuration next to them as
//! `resolved_config.toml`, so a finished run can be reproduced from its
//! output directory alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use distboost::boosting::{fit, load_model, save_model, BoostedModel, FitConfig, Stabilization};
use distboost::data::{
    fold_manifest, load_csv, make_folds, scenario_spec, simulate, write_csv, write_named_csv,
    Dataset, Fold, LoadReport, SimulationSpec,
};
use distboost::diff::fd_check;
use distboost::distributions::{CovarianceFactor, DistributionSpec, Family, LinkedParams};
use distboost::eval::{
    ablate_rank, ablation_csv, ablation_text, bench_csv, bench_fit, compare, random_search,
    score_nll, trials_csv, CompareCell,
};
use distboost::linalg::LowerTriangular;
use distboost::{Error, Result};

/// Folds drawn by the study subcommands: fold 0 tunes, the rest score.
const STUDY_FOLDS: usize = 11;
/// Training share of every fold split.
const STUDY_TRAIN_FRACTION: f64 = 0.8;
/// Odd 64-bit constant separating derived seed streams from the run seed.
const SEED_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Gradient check tolerances and steps: first differences are most
/// accurate near eps^(1/3), second differences near eps^(1/4).
const GRAD_STEP: f64 = 1e-5;
const HESS_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const HESS_TOL: f64 = 1e-3;
const GRADCHECK_DIMS: [usize; 3] = [2, 3, 5];

/// Row counts of the bench row sweep.
const BENCH_ROWS: [usize; 4] = [500, 1_000, 2_000, 4_000];
/// Round counts of the bench round sweep.
const BENCH_ROUNDS: [usize; 4] = [10, 20, 40, 80];
/// Rows used by the round sweep on simulated data.
const BENCH_SWEEP_ROWS: usize = 2_000;

#[derive(Parser)]
#[command(
    name = "distboost",
    version,
    about = "Multi-target distributional gradient boosting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a CSV dataset and save the model document.
    Train(CommonOpts),
    /// Score a saved model on a CSV dataset and write per-row parameters.
    Predict {
        /// Path of a saved model document.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Draw a synthetic dataset and its true parameters.
    Simulate {
        /// Rows to draw.
        #[arg(long, default_value_t = 1_000)]
        n: usize,
        /// Uninformative extra feature columns.
        #[arg(long, default_value_t = 2)]
        noise_features: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Fold study: the configured joint model against independent
    /// per-target Gaussian fits on shared folds.
    Evaluate {
        /// Random-search trials on the tuning fold; 0 keeps the
        /// configured parameters.
        #[arg(long, default_value_t = 0)]
        trials: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Refit the low-rank family across ranks on shared folds.
    Ablate {
        /// Comma-separated ranks to refit, for example 2,4,6.
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Compare analytic gradients and Hessians with finite differences.
    Gradcheck {
        /// Random cases per family.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Time fits across row counts and boosting rounds.
    Bench(CommonOpts),
}

/// Flags shared by every subcommand. Each one overrides the matching
/// value of the TOML run configuration when both are given.
#[derive(Args, Debug, Clone, Default)]
struct CommonOpts {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with one header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated response column names.
    #[arg(long, value_delimiter = ',')]
    responses: Option<Vec<String>>,
    /// Response family: gaussian-chol, gaussian-lra, student-t or dirichlet.
    #[arg(long)]
    family: Option<String>,
    /// Rank of the low-rank covariance family.
    #[arg(long)]
    rank: Option<usize>,
    /// Boosting rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Shrinkage applied to every leaf.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Maximum tree depth.
    #[arg(long)]
    max_depth: Option<usize>,
    /// Minimum loss reduction to keep a split.
    #[arg(long)]
    gamma: Option<f64>,
    /// Row fraction drawn per round.
    #[arg(long)]
    subsample: Option<f64>,
    /// Feature fraction drawn per tree.
    #[arg(long)]
    colsample: Option<f64>,
    /// Minimum summed Hessian per leaf.
    #[arg(long)]
    min_child_weight: Option<f64>,
    /// Early-stopping patience in rounds; 0 disables.
    #[arg(long)]
    early_stopping: Option<usize>,
    /// Gradient and Hessian stabilization: none, mad or l2.
    #[arg(long)]
    stabilization: Option<String>,
    /// Run seed driving simulation, fold shuffles and fitting; overrides
    /// the [fit] seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Rayon thread cap; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One run of the tool: data bindings plus the fitting parameters.
/// Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Training or evaluation CSV.
    data: Option<PathBuf>,
    /// Optional validation CSV monitored during training.
    valid_data: Option<PathBuf>,
    /// Response column names.
    responses: Vec<String>,
    /// Response family name.
    family: Option<String>,
    /// Rank of the low-rank covariance family.
    rank: Option<usize>,
    /// Run seed; also becomes the fit seed when set.
    seed: Option<u64>,
    /// Rayon thread cap.
    threads: Option<usize>,
    /// Output directory.
    out: Option<PathBuf>,
    /// Fitting parameters.
    fit: FitConfig,
}

/// Reads the optional TOML configuration and applies flag overrides.
fn resolve(common: &CommonOpts) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str::<RunConfig>(&text).map_err(|e| {
                Error::InvalidConfig(format!("config {}: {e}", path.display()))
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &common.data {
        run.data = Some(v.clone());
    }
    if let Some(v) = &common.responses {
        run.responses = v.clone();
    }
    if let Some(v) = &common.family {
        run.family = Some(v.clone());
    }
    if let Some(v) = common.rank {
        run.rank = Some(v);
    }
    if let Some(v) = common.threads {
        run.threads = Some(v);
    }
    if let Some(v) = &common.out {
        run.out = Some(v.clone());
    }
    if let Some(v) = common.rounds {
        run.fit.n_rounds = v;
    }
    if let Some(v) = common.learning_rate {
        run.fit.learning_rate = v;
    }
    if let Some(v) = common.max_depth {
        run.fit.max_depth = v;
    }
    if let Some(v) = common.gamma {
        run.fit.gamma = v;
    }
    if let Some(v) = common.subsample {
        run.fit.subsample = v;
    }
    if let Some(v) = common.colsample {
        run.fit.colsample = v;
    }
    if let Some(v) = common.min_child_weight {
        run.fit.min_child_weight = v;
    }
    if let Some(v) = common.early_stopping {
        run.fit.early_stopping_rounds = v;
    }
    if let Some(v) = &common.stabilization {
        run.fit.stabilization = v.parse::<Stabilization>()?;
    }
    if let Some(v) = common.seed {
        run.seed = Some(v);
    }
    // The run seed, wherever it came from, drives the fit as well.
    if let Some(seed) = run.seed {
        run.fit.seed = seed;
    }
    Ok(run)
}

fn run_seed(run: &RunConfig) -> u64 {
    run.seed.unwrap_or(0)
}

/// Caps the global rayon pool when a thread count is configured.
fn configure_threads(run: &RunConfig) -> Result<()> {
    if let Some(n) = run.threads {
        if n == 0 {
            return Err(Error::InvalidConfig(
                "threads must be at least 1".to_string(),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn prepare_out(run: &RunConfig) -> Result<PathBuf> {
    let dir = run.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

/// Writes the resolved configuration next to the run's outputs. Reading
/// it back with --config reproduces the run exactly.
fn echo_config(run: &RunConfig, out: &Path) -> Result<()> {
    let text = toml::to_string_pretty(run)
        .map_err(|e| Error::InvalidConfig(format!("serialize resolved config: {e}")))?;
    write_text(&out.join("resolved_config.toml"), &text)
}

fn load_data(run: &RunConfig) -> Result<(Dataset, LoadReport)> {
    let path = run.data.as_ref().ok_or_else(|| {
        Error::InvalidConfig("no input data: pass --data or set data in the config".to_string())
    })?;
    load_csv(path, &run.responses)
}

fn require_family(run: &RunConfig) -> Result<Family> {
    match run.family.as_deref() {
        Some(name) => name.parse(),
        None => Err(Error::InvalidConfig(
            "no family: pass --family or set family in the config".to_string(),
        )),
    }
}

fn require_responses(run: &RunConfig) -> Result<()> {
    if run.responses.is_empty() {
        return Err(Error::InvalidConfig(
            "no response columns: pass --responses or set responses in the config".to_string(),
        ));
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Predict { model, common } => cmd_predict(&model, &common),
        Command::Simulate {
            n,
            noise_features,
            common,
        } => cmd_simulate(n, noise_features, &common),
        Command::Evaluate { trials, common } => cmd_evaluate(trials, &common),
        Command::Ablate { ranks, common } => cmd_ablate(&ranks, &common),
        Command::Gradcheck { trials, common } => cmd_gradcheck(trials, &common),
        Command::Bench(common) => cmd_bench(&common),
    }
}

/// Maps every error to the documented exit codes: 2 for configuration
/// and usage problems, 3 for data problems, 4 for numeric failures.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::Unsupported(_) => 2,
        Error::Parse { .. }
        | Error::EmptyDataset
        | Error::InvalidResponse(_)
        | Error::FeatureMismatch { .. }
        | Error::ConstantColumn(_)
        | Error::Io(_) => 3,
        Error::NonFinite(_)
        | Error::NoConvergence(_)
        | Error::SingularCovariance
        | Error::NotPositiveDefinite => 4,
    }
}

fn cmd_train(common: &CommonOpts) -> Result<i32> {
    let run = resolve(common)?;
    configure_threads(&run)?;
    let out = prepare_out(&run)?;
    require_responses(&run)?;
    let (train, report) = load_data(&run)?;
    if report.dropped_rows > 0 {
        eprintln!("dropped {} rows with missing responses", report.dropped_rows);
    }
    let family = require_family(&run)?;
    let spec = DistributionSpec::new(family, train.n_responses(), run.rank)?;
    let valid = match &run.valid_data {
        Some(path) => Some(load_csv(path, &run.responses)?.0),
        None => None,
    };
    let model = fit(&train, valid.as_ref(), &spec, &run.fit)?;
    save_model(&model, &out.join("model.json"))?;
    write_text(&out.join("training_log.csv"), &training_log_csv(&model))?;
    echo_config(&run, &out)?;
    println!(
        "trained {} rounds (best {}) on {} rows, final train NLL {:.6}",
        model.rounds.len(),
        model.best_round,
        train.n_rows(),
        model.train_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

/// One line per round: round index, train NLL and, when a validation
/// set was monitored, the validation NLL.
fn training_log_csv(model: &BoostedModel) -> String {
    let mut text = String::from("round,train_nll,valid_nll\n");
    for (i, train_nll) in model.train_history.iter().enumerate() {
        let valid = model
            .valid_history
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        text.push_str(&format!("{},{},{}\n", i + 1, train_nll, valid));
    }
    text
}

fn cmd_predict(model_path: &Path, common: &CommonOpts) -> Result<i32> {
    let run = resolve(common)?;
    configure_threads(&run)?;
    let out = prepare_out(&run)?;
    let model = load_model(model_path)?;
    // Named response columns are stripped from the features, so the
    // training CSV itself can be scored.
    let (ds, _) = load_data(&run)?;
    let preds = model.predict_dist(&ds.features)?;
    let text = predictions_csv(&model, &preds)?;
    write_text(&out.join("predictions.csv"), &text)?;
    echo_config(&run, &out)?;
    println!(
        "wrote {} prediction rows to {}",
        preds.len(),
        out.join("predictions.csv").display()
    );
    Ok(0)
}

/// Constrained parameter names in prediction order: the raw names with
/// their link prefixes resolved.
fn linked_param_names(spec: &DistributionSpec) -> Vec<String> {
    spec.param_names()
        .into_iter()
        .map(|name| {
            if name == "log_nu_minus_2" {
                "nu".to_string()
            } else if let Some(stripped) = name.strip_prefix("log_") {
                stripped.to_string()
            } else {
                name
            }
        })
        .collect()
}

fn push_lower_triangle(values: &mut Vec<f64>, chol: &LowerTriangular, dim: usize) {
    for i in 0..dim {
        values.push(chol.get(i, i));
    }
    for i in 1..dim {
        for j in 0..i {
            values.push(chol.get(i, j));
        }
    }
}

/// Constrained parameter values matching `linked_param_names` order.
fn linked_param_values(params: &LinkedParams, dim: usize) -> Vec<f64> {
    match params {
        LinkedParams::Gaussian(p) => {
            let mut values = p.mu.clone();
            match &p.cov {
                CovarianceFactor::Cholesky(chol) => {
                    push_lower_triangle(&mut values, chol, dim);
                }
                CovarianceFactor::LowRank { kdiag, v, .. } => {
                    values.extend_from_slice(kdiag);
                    values.extend_from_slice(v);
                }
            }
            values
        }
        LinkedParams::StudentT(p) => {
            let mut values = p.mu.clone();
            push_lower_triangle(&mut values, &p.chol, dim);
            values.push(p.nu);
            values
        }
        LinkedParams::Dirichlet(p) => p.alpha.clone(),
    }
}

/// Per-row constrained parameters, means and the upper triangle of the
/// predicted covariance (families that have one).
fn predictions_csv(
    model: &BoostedModel,
    preds: &[distboost::boosting::Prediction],
) -> Result<String> {
    let spec = &model.spec;
    let dim = spec.dim();
    let with_cov = preds.first().is_some_and(|p| p.covariance.is_some());
    let mut header = linked_param_names(spec);
    for i in 1..=dim {
        header.push(format!("mean_{i}"));
    }
    if with_cov {
        for i in 1..=dim {
            for j in i..=dim {
                header.push(format!("cov_{i}_{j}"));
            }
        }
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(&header)
        .expect("in-memory csv write");
    for pred in preds {
        let mut row = linked_param_values(&pred.params, dim);
        row.extend_from_slice(&pred.mean);
        if let Some(cov) = &pred.covariance {
            for i in 0..dim {
                for j in i..dim {
                    row.push(cov.get(i, j));
                }
            }
        }
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writer.write_record(&fields).expect("in-memory csv write");
    }
    let bytes = writer.into_inner().expect("in-memory csv flush");
    String::from_utf8(bytes)
        .map_err(|_| Error::InvalidConfig("predictions are not valid utf-8".to_string()))
}

fn cmd_simulate(n: usize, noise_features: usize, common: &CommonOpts) -> Result<i32> {
    let run = resolve(common)?;
    let out = prepare_out(&run)?;
    let family = require_family(&run)?;
    let sim = SimulationSpec {
        family,
        n,
        seed: run_seed(&run),
        noise_features,
    };
    let (ds, true_raw) = simulate(&sim)?;
    write_csv(&ds, &out.join("data.csv"))?;
    let spec = scenario_spec(family)?;
    write_named_csv(&out.join("true_params.csv"), &spec.param_names(), &true_raw)?;
    echo_config(&run, &out)?;
    println!(
        "simulated {} rows of the {family} scenario into {}",
        ds.n_rows(),
        out.display()
    );
    Ok(0)
}

fn cmd_evaluate(trials: usize, common: &CommonOpts) -> Result<i32> {
    let run = resolve(common)?;
    configure_threads(&run)?;
    let out = prepare_out(&run)?;
    require_responses(&run)?;
    let (ds, _) = load_data(&run)?;
    let family = require_family(&run)?;
    let spec = DistributionSpec::new(family, ds.n_responses(), run.rank)?;
    let seed = run_seed(&run);
    let start = Instant::now();
    let folds = make_folds(&ds, STUDY_FOLDS, STUDY_TRAIN_FRACTION, seed)?;
    write_text(&out.join("fold_manifest.txt"), &fold_manifest(&folds))?;

    // The tuning fold selects the joint model's parameters; the baseline
    // keeps the run configuration either way.
    let mut joint_config = run.fit.clone();
    if trials > 0 {
        let (best, log) = random_search(&folds[0], &spec, trials, seed.wrapping_add(SEED_STREAM))?;
        write_text(&out.join("trials.csv"), &trials_csv(&log))?;
        joint_config = best;
    }

    let scored: Vec<&Fold> = folds.iter().filter(|f| !f.is_tuning).collect();
    let mut joint_scores = Vec::with_capacity(scored.len());
    for fold in &scored {
        let valid = (joint_config.early_stopping_rounds > 0).then_some(&fold.test);
        let model = fit(&fold.train, valid, &spec, &joint_config)?;
        joint_scores.push(score_nll(&model, &fold.test)?);
    }

    // Independent baseline: one univariate Gaussian fit per target on the
    // same folds, scored by the sum of the per-target NLLs.
    let uni_spec = DistributionSpec::new(Family::GaussianCholesky, 1, None)?;
    let mut baseline_scores = Vec::with_capacity(scored.len());
    for fold in &scored {
        let mut total = 0.0;
        for target in 0..ds.n_responses() {
            let train = fold.train.select_responses(&[target], fold.train.name.clone());
            let test = fold.test.select_responses(&[target], fold.test.name.clone());
            let valid = (run.fit.early_stopping_rounds > 0).then_some(&test);
            let model = fit(&train, valid, &uni_spec, &run.fit)?;
            total += score_nll(&model, &test)?;
        }
        baseline_scores.push(total);
    }

    let cells = vec![
        CompareCell {
            model_id: format!("joint-{family}"),
            dataset: ds.name.clone(),
            fold_scores: joint_scores,
        },
        CompareCell {
            model_id: "independent-gaussian".to_string(),
            dataset: ds.name.clone(),
            fold_scores: baseline_scores,
        },
    ];
    let table = compare(&cells)?;
    write_text(&out.join("report.txt"), &table.to_text())?;
    write_text(&out.join("report_cells.csv"), &table.cells_csv())?;
    write_text(&out.join("report_ranks.csv"), &table.ranks_csv())?;
    echo_config(&run, &out)?;
    print!("{}", table.to_text());
    println!(
        "evaluated 2 models on {} folds in {:.2}s",
        scored.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(0)
}

fn cmd_ablate(ranks: &[usize], common: &CommonOpts) -> Result<i32> {
    let run = resolve(common)?;
    configure_threads(&run)?;
    let out = prepare_out(&run)?;
    require_responses(&run)?;
    let (ds, _) = load_data(&run)?;
    let rows = ablate_rank(
        &ds,
        ranks,
        &run.fit,
        STUDY_FOLDS,
        STUDY_TRAIN_FRACTION,
        run_seed(&run),
    )?;
    let text = ablation_text(&rows);
    write_text(&out.join("ablation.txt"), &text)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    echo_config(&run, &out)?;
    print!("{text}");
    Ok(0)
}

/// Compositional draw away from the simplex corners, matching the
/// response support of the Dirichlet head.
fn random_response(family: Family, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match family {
        Family::Dirichlet => {
            let parts: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = parts.iter().sum();
            parts.into_iter().map(|p| p / total).collect()
        }
        _ => (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

fn cmd_gradcheck(trials: usize, common: &CommonOpts) -> Result<i32> {
    let run = resolve(common)?;
    if trials == 0 {
        return Err(Error::InvalidConfig(
            "gradcheck needs at least one trial".to_string(),
        ));
    }
    let families = match run.family.as_deref() {
        Some(name) => vec![name.parse::<Family>()?],
        None => vec![
            Family::GaussianCholesky,
            Family::GaussianLowRank,
            Family::StudentTCholesky,
            Family::Dirichlet,
        ],
    };
    let seed = run_seed(&run);
    let mut breached = false;
    for (index, family) in families.into_iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64 ^ SEED_STREAM));
        let mut worst_grad = 0.0f64;
        let mut worst_hess = 0.0f64;
        let mut floored = 0usize;
        for _ in 0..trials {
            let dim = GRADCHECK_DIMS[rng.random_range(0..GRADCHECK_DIMS.len())];
            let rank =
                (family == Family::GaussianLowRank).then(|| rng.random_range(1..=dim));
            let spec = DistributionSpec::new(family, dim, rank)?;
            let raw: Vec<f64> = (0..spec.param_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let y = random_response(family, dim, &mut rng);
            let grad_report = fd_check(&spec, &raw, &y, GRAD_STEP)?;
            let hess_report = fd_check(&spec, &raw, &y, HESS_STEP)?;
            worst_grad = worst_grad.max(grad_report.max_grad_rel_err);
            worst_hess = worst_hess.max(hess_report.max_hess_rel_err);
            floored += hess_report.floored.len();
        }
        println!(
            "{family}: max grad rel err {worst_grad:.3e} (tol {GRAD_TOL:.0e}), \
             max hess rel err {worst_hess:.3e} (tol {HESS_TOL:.0e}), \
             floored entries {floored}"
        );
        if worst_grad >= GRAD_TOL || worst_hess >= HESS_TOL {
            breached = true;
        }
    }
    // Derivative checks write no data files; the configuration is echoed
    // only when an output directory was asked for.
    if run.out.is_some() {
        let out = prepare_out(&run)?;
        echo_config(&run, &out)?;
    }
    if breached {
        eprintln!("finite-difference tolerance breached");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_bench(common: &CommonOpts) -> Result<i32> {
    let run = resolve(common)?;
    configure_threads(&run)?;
    let out = prepare_out(&run)?;
    let seed = run_seed(&run);
    let mut base = run.fit.clone();
    // Wall time per round is the quantity of interest; early stopping
    // would make the sweeps incomparable.
    base.early_stopping_rounds = 0;
    let mut records = Vec::new();
    match &run.data {
        Some(_) => {
            require_responses(&run)?;
            let (ds, _) = load_data(&run)?;
            let family = require_family(&run)?;
            let spec = DistributionSpec::new(family, ds.n_responses(), run.rank)?;
            for rounds in BENCH_ROUNDS {
                let mut config = base.clone();
                config.n_rounds = rounds;
                records.push(bench_fit(&format!("rounds{rounds}"), &ds, &spec, &config)?);
            }
        }
        None => {
            let family = match run.family.as_deref() {
                Some(name) => name.parse::<Family>()?,
                None => Family::GaussianCholesky,
            };
            let spec = scenario_spec(family)?;
            let mut row_config = base.clone();
            row_config.n_rounds = base.n_rounds.min(50);
            for rows in BENCH_ROWS {
                let sim = SimulationSpec {
                    family,
                    n: rows,
                    seed,
                    noise_features: 2,
                };
                let (ds, _) = simulate(&sim)?;
                records.push(bench_fit(&format!("rows{rows}"), &ds, &spec, &row_config)?);
            }
            let sim = SimulationSpec {
                family,
                n: BENCH_SWEEP_ROWS,
                seed,
                noise_features: 2,
            };
            let (ds, _) = simulate(&sim)?;
            for rounds in BENCH_ROUNDS {
                let mut config = base.clone();
                config.n_rounds = rounds;
                records.push(bench_fit(&format!("rounds{rounds}"), &ds, &spec, &config)?);
            }
        }
    }
    let text = bench_csv(&records);
    write_text(&out.join("bench.csv"), &text)?;
    echo_config(&run, &out)?;
    print!("{text}");
    Ok(0)
}
