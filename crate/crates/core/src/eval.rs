//! Scoring and study drivers.
//!
//! Every reported number flows through this module: mean NLL scoring,
//! quantile summaries, pairwise dependency statistics, multi-model fold
//! comparisons with average ranks and fold spreads, low-rank ablation,
//! random hyper-parameter search, and wall-clock benchmarking.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boosting::{fit, BoostedModel, FitConfig};
use crate::data::{make_folds, Dataset, Fold};
use crate::distributions::{DistributionSpec, Family};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// Median and decile band of a sequence of scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    /// 0.5 quantile.
    pub median: f64,
    /// 0.1 quantile.
    pub q10: f64,
    /// 0.9 quantile.
    pub q90: f64,
}

/// Linear-interpolation quantile (the "type 7" definition) of a sorted
/// non-empty slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and decile band of a non-empty, finite sequence.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot summarize an empty sequence".to_string(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("summary input".to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        median: quantile_sorted(&sorted, 0.5),
        q10: quantile_sorted(&sorted, 0.1),
        q90: quantile_sorted(&sorted, 0.9),
    })
}

/// Scores of one model on one dataset across evaluation folds.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Identifier of the scored model.
    pub model_id: String,
    /// Name of the dataset the folds were drawn from.
    pub dataset: String,
    /// Mean test NLL per evaluation fold.
    pub fold_scores: Vec<f64>,
    /// Median and decile band of the fold scores.
    pub summary: Summary,
    /// Wall-clock seconds spent fitting and scoring all folds.
    pub wall_seconds: f64,
}

impl EvalReport {
    /// Builds a report, deriving the summary from the fold scores.
    pub fn new(
        model_id: String,
        dataset: String,
        fold_scores: Vec<f64>,
        wall_seconds: f64,
    ) -> Result<Self> {
        let summary = summarize(&fold_scores)?;
        Ok(EvalReport {
            model_id,
            dataset,
            fold_scores,
            summary,
            wall_seconds,
        })
    }
}

/// Mean per-observation NLL of a fitted model on a test set.
pub fn score_nll(model: &BoostedModel, test: &Dataset) -> Result<f64> {
    model.mean_nll(test)
}

/// Median and decile band of the pairwise Pearson correlations between
/// response columns, over all D(D-1)/2 unordered pairs.
pub fn dependency_strength(y: &Array2<f64>) -> Result<Summary> {
    let n = y.nrows();
    let d = y.ncols();
    if d < 2 {
        return Err(Error::InvalidConfig(
            "dependency strength needs at least 2 response columns".to_string(),
        ));
    }
    if n < 2 {
        return Err(Error::InvalidConfig(
            "dependency strength needs at least 2 rows".to_string(),
        ));
    }
    let mut centered = y.to_owned();
    for j in 0..d {
        let mean = centered.column(j).sum() / n as f64;
        centered.column_mut(j).mapv_inplace(|v| v - mean);
    }
    let mut sum_sq = vec![0.0; d];
    for (j, sq) in sum_sq.iter_mut().enumerate() {
        *sq = centered.column(j).iter().map(|v| v * v).sum();
        if *sq == 0.0 {
            return Err(Error::ConstantColumn(j));
        }
    }
    let mut correlations = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in (i + 1)..d {
            let cross: f64 = centered
                .column(i)
                .iter()
                .zip(centered.column(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            correlations.push(cross / (sum_sq[i] * sum_sq[j]).sqrt());
        }
    }
    summarize(&correlations)
}

/// Fold scores of one (model, dataset) pair, the unit `compare` consumes.
#[derive(Debug, Clone)]
pub struct CompareCell {
    /// Identifier of the model.
    pub model_id: String,
    /// Name of the dataset.
    pub dataset: String,
    /// Mean test NLL per fold.
    pub fold_scores: Vec<f64>,
}

/// One filled cell of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareEntry {
    /// Median and decile band of the fold scores.
    pub summary: Summary,
    /// Fold-score variability, max minus min.
    pub spread: f64,
    /// Rank of this model on this dataset, 1 = best median; ties share
    /// the mean of the ranks they cover.
    pub rank: f64,
}

/// Cross-model comparison: medians, decile bands, ranks, and spreads.
#[derive(Debug, Clone)]
pub struct CompareTable {
    /// Model identifiers, in first-appearance order.
    pub model_ids: Vec<String>,
    /// Dataset names, in first-appearance order.
    pub datasets: Vec<String>,
    /// entries[dataset index][model index].
    pub entries: Vec<Vec<CompareEntry>>,
    /// Mean rank of each model across datasets.
    pub average_ranks: Vec<f64>,
}

/// Ranks of `values` ascending, 1-based; exact ties share the mean of
/// the ranks they cover.
fn mean_ranks(values: &[f64]) -> Vec<f64> {
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Builds the comparison table from per-(model, dataset) fold scores.
///
/// Every (model, dataset) pair must be present exactly once and at least
/// two models are required.
pub fn compare(cells: &[CompareCell]) -> Result<CompareTable> {
    let mut model_ids: Vec<String> = Vec::new();
    let mut datasets: Vec<String> = Vec::new();
    for cell in cells {
        if !model_ids.contains(&cell.model_id) {
            model_ids.push(cell.model_id.clone());
        }
        if !datasets.contains(&cell.dataset) {
            datasets.push(cell.dataset.clone());
        }
    }
    if model_ids.len() < 2 {
        return Err(Error::InvalidConfig(
            "a comparison needs at least two models".to_string(),
        ));
    }
    let mut slots: Vec<Vec<Option<(Summary, f64)>>> =
        vec![vec![None; model_ids.len()]; datasets.len()];
    for cell in cells {
        let di = datasets.iter().position(|d| *d == cell.dataset).unwrap();
        let mi = model_ids.iter().position(|m| *m == cell.model_id).unwrap();
        if slots[di][mi].is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate comparison cell for model '{}' on dataset '{}'",
                cell.model_id, cell.dataset
            )));
        }
        let summary = summarize(&cell.fold_scores)?;
        let max = cell.fold_scores.iter().copied().fold(f64::MIN, f64::max);
        let min = cell.fold_scores.iter().copied().fold(f64::MAX, f64::min);
        slots[di][mi] = Some((summary, max - min));
    }
    let mut entries = Vec::with_capacity(datasets.len());
    let mut rank_totals = vec![0.0; model_ids.len()];
    for (di, dataset) in datasets.iter().enumerate() {
        let mut medians = Vec::with_capacity(model_ids.len());
        for (mi, model_id) in model_ids.iter().enumerate() {
            match &slots[di][mi] {
                Some((summary, _)) => medians.push(summary.median),
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "missing comparison cell for model '{model_id}' on dataset '{dataset}'"
                    )))
                }
            }
        }
        let ranks = mean_ranks(&medians);
        let row: Vec<CompareEntry> = slots[di]
            .iter()
            .zip(ranks.iter())
            .map(|(slot, &rank)| {
                let (summary, spread) = slot.clone().unwrap();
                CompareEntry {
                    summary,
                    spread,
                    rank,
                }
            })
            .collect();
        for (mi, entry) in row.iter().enumerate() {
            rank_totals[mi] += entry.rank;
        }
        entries.push(row);
    }
    let average_ranks = rank_totals
        .iter()
        .map(|t| t / datasets.len() as f64)
        .collect();
    Ok(CompareTable {
        model_ids,
        datasets,
        entries,
        average_ranks,
    })
}

/// Pads rows of cells into an aligned plain-text table.
fn aligned_text(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; columns];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            line.push_str(cell);
            if i + 1 < row.len() {
                line.push_str(&" ".repeat(widths[i] - cell.len() + 2));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn format_cell(summary: &Summary) -> String {
    format!(
        "{:.4} [{:.4}, {:.4}]",
        summary.median, summary.q10, summary.q90
    )
}

impl CompareTable {
    /// Aligned plain-text rendering: a median block with model columns
    /// and dataset rows, the average-rank row, and a fold-spread block.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["dataset".to_string()];
        header.extend(self.model_ids.iter().cloned());
        rows.push(header.clone());
        for (di, dataset) in self.datasets.iter().enumerate() {
            let mut row = vec![dataset.clone()];
            for entry in &self.entries[di] {
                row.push(format_cell(&entry.summary));
            }
            rows.push(row);
        }
        let mut rank_row = vec!["average rank".to_string()];
        for rank in &self.average_ranks {
            rank_row.push(format!("{rank:.2}"));
        }
        rows.push(rank_row);
        let mut out = aligned_text(&rows);
        out.push('\n');
        let mut spread_rows: Vec<Vec<String>> = vec![{
            let mut h = vec!["fold spread (max - min)".to_string()];
            h.extend(self.model_ids.iter().cloned());
            h
        }];
        for (di, dataset) in self.datasets.iter().enumerate() {
            let mut row = vec![dataset.clone()];
            for entry in &self.entries[di] {
                row.push(format!("{:.4}", entry.spread));
            }
            spread_rows.push(row);
        }
        out.push_str(&aligned_text(&spread_rows));
        out
    }

    /// Machine-readable long form: one row per (dataset, model) cell.
    pub fn cells_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["dataset", "model", "median", "q10", "q90", "spread", "rank"])
            .expect("in-memory csv write");
        for (di, dataset) in self.datasets.iter().enumerate() {
            for (mi, model) in self.model_ids.iter().enumerate() {
                let entry = &self.entries[di][mi];
                writer
                    .write_record([
                        dataset.as_str(),
                        model.as_str(),
                        &entry.summary.median.to_string(),
                        &entry.summary.q10.to_string(),
                        &entry.summary.q90.to_string(),
                        &entry.spread.to_string(),
                        &entry.rank.to_string(),
                    ])
                    .expect("in-memory csv write");
            }
        }
        finish_csv(writer)
    }

    /// Machine-readable average ranks, one row per model.
    pub fn ranks_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["model", "average_rank"])
            .expect("in-memory csv write");
        for (model, rank) in self.model_ids.iter().zip(self.average_ranks.iter()) {
            writer
                .write_record([model.as_str(), &rank.to_string()])
                .expect("in-memory csv write");
        }
        finish_csv(writer)
    }
}

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(writer.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Scores of the low-rank family at one rank across folds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Rank r the model was refit with.
    pub rank: usize,
    /// Mean test NLL per evaluation fold.
    pub fold_scores: Vec<f64>,
    /// Median and decile band of the fold scores.
    pub summary: Summary,
}

/// Refits the low-rank Gaussian family at each requested rank, holding
/// every other configuration field fixed, and reports per-rank fold
/// summaries. Fold 0 is the tuning fold and is never scored.
pub fn ablate_rank(
    dataset: &Dataset,
    ranks: &[usize],
    config: &FitConfig,
    n_folds: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if ranks.is_empty() {
        return Err(Error::InvalidConfig(
            "rank ablation needs at least one rank".to_string(),
        ));
    }
    let folds = make_folds(dataset, n_folds, train_fraction, seed)?;
    let scored: Vec<&Fold> = folds.iter().filter(|f| !f.is_tuning).collect();
    if scored.is_empty() {
        return Err(Error::InvalidConfig(
            "rank ablation needs at least one non-tuning fold".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let spec =
            DistributionSpec::new(Family::GaussianLowRank, dataset.n_responses(), Some(rank))?;
        let mut fold_scores = Vec::with_capacity(scored.len());
        for fold in &scored {
            let valid = (config.early_stopping_rounds > 0).then_some(&fold.test);
            let model = fit(&fold.train, valid, &spec, config)?;
            fold_scores.push(score_nll(&model, &fold.test)?);
        }
        let summary = summarize(&fold_scores)?;
        rows.push(AblationRow {
            rank,
            fold_scores,
            summary,
        });
    }
    Ok(rows)
}

/// Aligned plain-text rendering of an ablation, one row per rank.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut table: Vec<Vec<String>> = vec![vec![
        "rank".to_string(),
        "median [q10, q90]".to_string(),
    ]];
    for row in rows {
        table.push(vec![row.rank.to_string(), format_cell(&row.summary)]);
    }
    aligned_text(&table)
}

/// Machine-readable ablation table, one row per rank.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["rank", "median", "q10", "q90"])
        .expect("in-memory csv write");
    for row in rows {
        writer
            .write_record([
                row.rank.to_string(),
                row.summary.median.to_string(),
                row.summary.q10.to_string(),
                row.summary.q90.to_string(),
            ])
            .expect("in-memory csv write");
    }
    finish_csv(writer)
}

/// Hyper-parameter search space, matching the published tuning ranges.
const LEARNING_RATE_RANGE: (f64, f64) = (1e-3, 1.0);
const MAX_DEPTH_RANGE: (usize, usize) = (2, 10);
const GAMMA_RANGE: (f64, f64) = (0.0, 100.0);
const SUBSAMPLE_RANGE: (f64, f64) = (0.4, 1.0);
const COLSAMPLE_RANGE: (f64, f64) = (0.4, 1.0);
const MIN_CHILD_WEIGHT_RANGE: (f64, f64) = (0.0, 500.0);
/// Boosting budget used by every search trial.
const SEARCH_ROUNDS: usize = 500;
/// Early-stopping patience used by every search trial.
const SEARCH_EARLY_STOPPING: usize = 2;

/// One random-search trial: the sampled configuration and its tuning
/// score; None when the trial failed (for example, diverged).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    /// Zero-based trial index.
    pub trial: usize,
    /// Configuration the trial sampled.
    pub config: FitConfig,
    /// Mean NLL on the tuning fold's test split, when the fit succeeded.
    pub score: Option<f64>,
}

/// Samples one trial configuration from the search space.
fn sample_trial_config(rng: &mut ChaCha8Rng, fit_seed: u64) -> FitConfig {
    let (lr_lo, lr_hi) = LEARNING_RATE_RANGE;
    let learning_rate = (rng.random_range(lr_lo.ln()..=lr_hi.ln())).exp();
    FitConfig {
        learning_rate,
        max_depth: rng.random_range(MAX_DEPTH_RANGE.0..=MAX_DEPTH_RANGE.1),
        gamma: rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1),
        subsample: rng.random_range(SUBSAMPLE_RANGE.0..=SUBSAMPLE_RANGE.1),
        colsample: rng.random_range(COLSAMPLE_RANGE.0..=COLSAMPLE_RANGE.1),
        min_child_weight: rng.random_range(MIN_CHILD_WEIGHT_RANGE.0..=MIN_CHILD_WEIGHT_RANGE.1),
        n_rounds: SEARCH_ROUNDS,
        early_stopping_rounds: SEARCH_EARLY_STOPPING,
        seed: fit_seed,
        ..FitConfig::default()
    }
}

/// Uniform random search over the published tuning ranges (log-uniform
/// learning rate): each trial fits on the tuning fold's train split with
/// early stopping monitored on its test split and is scored there.
/// Returns the best configuration and the full trial log; failed trials
/// are recorded with a None score and skipped. Ties keep the earliest
/// trial.
pub fn random_search(
    fold: &Fold,
    spec: &DistributionSpec,
    n_trials: usize,
    seed: u64,
) -> Result<(FitConfig, Vec<TrialRecord>)> {
    if n_trials == 0 {
        return Err(Error::InvalidConfig(
            "random search needs at least one trial".to_string(),
        ));
    }
    let mut records = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64, 0));
        let config = sample_trial_config(&mut rng, derive_seed(seed, trial as u64, 1));
        let score = fit(&fold.train, Some(&fold.test), spec, &config)
            .and_then(|model| score_nll(&model, &fold.test))
            .ok();
        records.push(TrialRecord {
            trial,
            config,
            score,
        });
    }
    let best = records
        .iter()
        .filter_map(|r| r.score.map(|s| (r, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, _)| r.config.clone());
    match best {
        Some(config) => Ok((config, records)),
        None => Err(Error::NoConvergence(
            "hyper-parameter search produced no successful trial",
        )),
    }
}

/// Machine-readable trial log, one row per trial.
pub fn trials_csv(records: &[TrialRecord]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "trial",
            "learning_rate",
            "max_depth",
            "gamma",
            "subsample",
            "colsample",
            "min_child_weight",
            "score",
        ])
        .expect("in-memory csv write");
    for record in records {
        let score = record
            .score
            .map(|s| s.to_string())
            .unwrap_or_else(|| "failed".to_string());
        writer
            .write_record([
                record.trial.to_string(),
                record.config.learning_rate.to_string(),
                record.config.max_depth.to_string(),
                record.config.gamma.to_string(),
                record.config.subsample.to_string(),
                record.config.colsample.to_string(),
                record.config.min_child_weight.to_string(),
                score,
            ])
            .expect("in-memory csv write");
    }
    finish_csv(writer)
}

/// Wall-clock measurement of a single fit.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    /// Caller-chosen label for the measured configuration.
    pub label: String,
    /// Training rows.
    pub rows: usize,
    /// Distribution parameter count K.
    pub params: usize,
    /// Boosting rounds requested.
    pub rounds: usize,
    /// Seconds spent inside fit.
    pub wall_seconds: f64,
}

/// Times one fit with the given configuration.
pub fn bench_fit(
    label: &str,
    train: &Dataset,
    spec: &DistributionSpec,
    config: &FitConfig,
) -> Result<BenchRecord> {
    let start = Instant::now();
    fit(train, None, spec, config)?;
    Ok(BenchRecord {
        label: label.to_string(),
        rows: train.n_rows(),
        params: spec.param_count(),
        rounds: config.n_rounds,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Machine-readable benchmark table, one row per measurement.
pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["label", "rows", "params", "rounds", "wall_seconds"])
        .expect("in-memory csv write");
    for record in records {
        writer
            .write_record([
                record.label.clone(),
                record.rows.to_string(),
                record.params.to_string(),
                record.rounds.to_string(),
                record.wall_seconds.to_string(),
            ])
            .expect("in-memory csv write");
    }
    finish_csv(writer)
}

/// One candidate in a multi-model study.
#[derive(Debug, Clone)]
pub struct StudyModel {
    /// Identifier used in reports.
    pub id: String,
    /// Response family to fit.
    pub family: Family,
    /// Rank for the low-rank family, None otherwise.
    pub rank: Option<usize>,
    /// Boosting configuration; replaced by the tuned one when the study
    /// runs a hyper-parameter search.
    pub config: FitConfig,
}

/// Derivation labels keeping the study's fold and tuning streams apart.
const STREAM_FOLDS: u64 = 1;
const STREAM_TUNING: u64 = 2;

/// Runs the full fold study: per dataset, shuffled train/test folds with
/// fold 0 reserved for tuning; per (model, dataset), an optional random
/// search on the tuning fold followed by refits on every scored fold.
/// Returns per-cell reports and the comparison table.
pub fn run_study(
    datasets: &[Dataset],
    models: &[StudyModel],
    n_folds: usize,
    train_fraction: f64,
    tuning_trials: usize,
    seed: u64,
) -> Result<(Vec<EvalReport>, CompareTable)> {
    let mut reports = Vec::new();
    let mut cells = Vec::new();
    for (di, dataset) in datasets.iter().enumerate() {
        let folds = make_folds(
            dataset,
            n_folds,
            train_fraction,
            derive_seed(seed, STREAM_FOLDS, di as u64),
        )?;
        let scored: Vec<&Fold> = folds.iter().filter(|f| !f.is_tuning).collect();
        if scored.is_empty() {
            return Err(Error::InvalidConfig(
                "the study needs at least one non-tuning fold".to_string(),
            ));
        }
        for (mi, model) in models.iter().enumerate() {
            let spec =
                DistributionSpec::new(model.family, dataset.n_responses(), model.rank)?;
            let config = if tuning_trials > 0 {
                let tuning = folds
                    .iter()
                    .find(|f| f.is_tuning)
                    .expect("make_folds marks fold 0 as tuning");
                let cell = (di * models.len() + mi) as u64;
                random_search(
                    tuning,
                    &spec,
                    tuning_trials,
                    derive_seed(seed, STREAM_TUNING, cell),
                )?
                .0
            } else {
                model.config.clone()
            };
            let start = Instant::now();
            let mut fold_scores = Vec::with_capacity(scored.len());
            for fold in &scored {
                let valid = (config.early_stopping_rounds > 0).then_some(&fold.test);
                let fitted = fit(&fold.train, valid, &spec, &config)?;
                fold_scores.push(score_nll(&fitted, &fold.test)?);
            }
            let wall = start.elapsed().as_secs_f64();
            reports.push(EvalReport::new(
                model.id.clone(),
                dataset.name.clone(),
                fold_scores.clone(),
                wall,
            )?);
            cells.push(CompareCell {
                model_id: model.id.clone(),
                dataset: dataset.name.clone(),
                fold_scores,
            });
        }
    }
    let table = compare(&cells)?;
    Ok((reports, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, SimulationSpec};
    use rand_distr::{Distribution, StandardNormal};

    fn small_sim(n: usize, seed: u64) -> Dataset {
        let (ds, _) = simulate(&SimulationSpec {
            family: Family::GaussianCholesky,
            n,
            seed,
            noise_features: 1,
        })
        .expect("simulate");
        ds
    }

    fn quick_config(rounds: usize) -> FitConfig {
        FitConfig {
            n_rounds: rounds,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        }
    }

    #[test]
    fn summarize_matches_the_type7_hand_values() {
        let s = summarize(&[3.0, 1.0, 4.0, 2.0]).expect("summary");
        assert!((s.median - 2.5).abs() < 1e-12);
        assert!((s.q10 - 1.3).abs() < 1e-12);
        assert!((s.q90 - 3.7).abs() < 1e-12);
        let single = summarize(&[7.0]).expect("summary");
        assert_eq!(single.median, 7.0);
        assert_eq!(single.q10, 7.0);
        assert_eq!(single.q90, 7.0);
    }

    #[test]
    fn summarize_rejects_empty_and_non_finite_input() {
        assert!(matches!(summarize(&[]), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            summarize(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn summary_quantiles_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let s = summarize(&values).expect("summary");
        assert!(s.q10 <= s.median && s.median <= s.q90);
    }

    #[test]
    fn score_nll_matches_rowwise_recomputation() {
        let ds = small_sim(150, 3);
        let spec = DistributionSpec::new(Family::GaussianCholesky, 3, None).expect("spec");
        let model = fit(&ds, None, &spec, &quick_config(6)).expect("fit");
        let scored = score_nll(&model, &ds).expect("score");
        let raw = model.predict_raw(&ds.features).expect("raw");
        let mut total = 0.0;
        for i in 0..ds.n_rows() {
            let eta: Vec<f64> = raw.row(i).to_vec();
            let y: Vec<f64> = ds.responses.row(i).to_vec();
            total += spec.nll(&eta, &y).expect("nll");
        }
        assert!((scored - total / ds.n_rows() as f64).abs() < 1e-12);
    }

    #[test]
    fn score_nll_is_invariant_to_row_order() {
        let ds = small_sim(120, 8);
        let spec = DistributionSpec::new(Family::GaussianCholesky, 3, None).expect("spec");
        let model = fit(&ds, None, &spec, &quick_config(5)).expect("fit");
        let forward = score_nll(&model, &ds).expect("score");
        let reversed_rows: Vec<usize> = (0..ds.n_rows()).rev().collect();
        let reversed = ds.subset(&reversed_rows, "reversed");
        let backward = score_nll(&model, &reversed).expect("score");
        assert!((forward - backward).abs() < 1e-12);
    }

    #[test]
    fn intercept_standard_normal_scores_log_two_pi() {
        let spec = DistributionSpec::new(Family::GaussianCholesky, 2, None).expect("spec");
        let model = BoostedModel {
            spec,
            offsets: vec![0.0; 5],
            rounds: Vec::new(),
            config: FitConfig::default(),
            feature_names: Vec::new(),
            best_round: 0,
            train_history: Vec::new(),
            valid_history: Vec::new(),
        };
        let ds = Dataset::new(
            "zeros".to_string(),
            Array2::zeros((1, 0)),
            Vec::new(),
            Array2::zeros((1, 2)),
            vec!["y1".to_string(), "y2".to_string()],
        )
        .expect("dataset");
        let score = score_nll(&model, &ds).expect("score");
        assert!((score - std::f64::consts::TAU.ln()).abs() < 1e-12);
    }

    #[test]
    fn dependency_strength_of_a_scaled_copy_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200;
        let mut y = Array2::zeros((n, 2));
        for i in 0..n {
            let v: f64 = StandardNormal.sample(&mut rng);
            y[[i, 0]] = v;
            y[[i, 1]] = 2.0 * v;
        }
        let s = dependency_strength(&y).expect("strength");
        assert!((s.median - 1.0).abs() < 1e-12);
        assert!((s.q10 - 1.0).abs() < 1e-12);
        assert!((s.q90 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dependency_strength_of_two_columns_repeats_the_single_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 300;
        let mut y = Array2::zeros((n, 2));
        for i in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            y[[i, 0]] = a;
            y[[i, 1]] = 0.6 * a + 0.8 * b;
        }
        let s = dependency_strength(&y).expect("strength");
        assert_eq!(s.median, s.q10);
        assert_eq!(s.median, s.q90);
        assert!(s.median > 0.3 && s.median < 0.8);
    }

    #[test]
    fn dependency_strength_of_independent_columns_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 10_000;
        let mut y = Array2::zeros((n, 3));
        for i in 0..n {
            for j in 0..3 {
                y[[i, j]] = StandardNormal.sample(&mut rng);
            }
        }
        let s = dependency_strength(&y).expect("strength");
        assert!(s.median.abs() < 0.05, "median {}", s.median);
    }

    #[test]
    fn dependency_strength_rejects_constant_columns() {
        let mut y = Array2::zeros((50, 2));
        for i in 0..50 {
            y[[i, 0]] = i as f64;
        }
        match dependency_strength(&y) {
            Err(Error::ConstantColumn(index)) => assert_eq!(index, 1),
            other => panic!("expected ConstantColumn, got {other:?}"),
        }
    }

    fn cell(model: &str, dataset: &str, scores: &[f64]) -> CompareCell {
        CompareCell {
            model_id: model.to_string(),
            dataset: dataset.to_string(),
            fold_scores: scores.to_vec(),
        }
    }

    #[test]
    fn compare_matches_the_hand_worked_fixture() {
        let cells = vec![
            cell("a", "x", &[1.0, 2.0, 3.0]),
            cell("b", "x", &[2.0, 3.0, 4.0]),
            cell("c", "x", &[0.0, 5.0, 10.0]),
            cell("a", "y", &[5.0, 5.0]),
            cell("b", "y", &[1.0, 2.0]),
            cell("c", "y", &[2.0, 1.0]),
        ];
        let table = compare(&cells).expect("table");
        assert_eq!(table.model_ids, vec!["a", "b", "c"]);
        assert_eq!(table.datasets, vec!["x", "y"]);
        // Dataset x medians 2, 3, 5 -> ranks 1, 2, 3.
        assert_eq!(table.entries[0][0].rank, 1.0);
        assert_eq!(table.entries[0][1].rank, 2.0);
        assert_eq!(table.entries[0][2].rank, 3.0);
        // Dataset y medians 5, 1.5, 1.5 -> ranks 3, 1.5, 1.5.
        assert_eq!(table.entries[1][0].rank, 3.0);
        assert_eq!(table.entries[1][1].rank, 1.5);
        assert_eq!(table.entries[1][2].rank, 1.5);
        assert_eq!(table.average_ranks, vec![2.0, 1.75, 2.25]);
        // Spreads are max - min of the fold scores.
        assert_eq!(table.entries[0][2].spread, 10.0);
        assert_eq!(table.entries[1][0].spread, 0.0);
        // The average rank recomputes from the per-dataset ranks.
        for (mi, expected) in table.average_ranks.iter().enumerate() {
            let total: f64 = table.entries.iter().map(|row| row[mi].rank).sum();
            assert!((total / table.datasets.len() as f64 - expected).abs() < 1e-12);
        }
        let text = table.to_text();
        assert!(text.contains("2.0000 [1.2000, 2.8000]"));
        assert!(text.contains("average rank"));
        let csv = table.cells_csv();
        assert!(csv.starts_with("dataset,model,median"));
        assert_eq!(csv.lines().count(), 7);
        assert!(table.ranks_csv().contains("b,1.75"));
    }

    #[test]
    fn compare_gives_integer_ranks_on_a_total_order() {
        let cells = vec![
            cell("a", "x", &[1.0]),
            cell("b", "x", &[2.0]),
            cell("a", "y", &[1.0]),
            cell("b", "y", &[2.0]),
        ];
        let table = compare(&cells).expect("table");
        assert_eq!(table.average_ranks, vec![1.0, 2.0]);
        // Single fold: spread collapses to zero.
        assert_eq!(table.entries[0][0].spread, 0.0);
    }

    #[test]
    fn compare_rejects_degenerate_layouts() {
        let single = vec![cell("a", "x", &[1.0])];
        assert!(matches!(compare(&single), Err(Error::InvalidConfig(_))));
        let missing = vec![
            cell("a", "x", &[1.0]),
            cell("b", "x", &[2.0]),
            cell("a", "y", &[1.0]),
        ];
        assert!(matches!(compare(&missing), Err(Error::InvalidConfig(_))));
        let duplicated = vec![
            cell("a", "x", &[1.0]),
            cell("a", "x", &[3.0]),
            cell("b", "x", &[2.0]),
        ];
        assert!(matches!(compare(&duplicated), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn eval_report_orders_its_summary() {
        let report = EvalReport::new(
            "m".to_string(),
            "d".to_string(),
            vec![3.0, 1.0, 2.0],
            0.5,
        )
        .expect("report");
        assert!(report.summary.q10 <= report.summary.median);
        assert!(report.summary.median <= report.summary.q90);
        assert_eq!(report.wall_seconds, 0.5);
    }

    #[test]
    fn ablation_repeats_duplicate_ranks_identically() {
        let ds = small_sim(260, 14);
        let config = FitConfig {
            n_rounds: 6,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        let rows = ablate_rank(&ds, &[2, 2], &config, 3, 0.8, 17).expect("ablation");
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].fold_scores, rows[1].fold_scores);
        assert_eq!(rows[0].summary, rows[1].summary);
        let text = ablation_text(&rows);
        assert!(text.contains("rank"));
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn random_search_is_deterministic_and_stays_in_range() {
        let ds = small_sim(400, 19);
        let folds = make_folds(&ds, 2, 0.8, 23).expect("folds");
        let spec = DistributionSpec::new(Family::GaussianCholesky, 3, None).expect("spec");
        let (best_a, log_a) = random_search(&folds[0], &spec, 5, 77).expect("search");
        let (best_b, log_b) = random_search(&folds[0], &spec, 5, 77).expect("search");
        assert_eq!(best_a, best_b);
        assert_eq!(log_a, log_b);
        for record in &log_a {
            let c = &record.config;
            assert!(c.learning_rate >= 1e-3 && c.learning_rate <= 1.0);
            assert!((2..=10).contains(&c.max_depth));
            assert!((0.0..=100.0).contains(&c.gamma));
            assert!((0.4..=1.0).contains(&c.subsample));
            assert!((0.4..=1.0).contains(&c.colsample));
            assert!((0.0..=500.0).contains(&c.min_child_weight));
            assert_eq!(c.n_rounds, 500);
            assert_eq!(c.early_stopping_rounds, 2);
        }
        // The returned config is the logged minimum.
        let best_score = log_a
            .iter()
            .filter_map(|r| r.score)
            .fold(f64::MAX, f64::min);
        let winner = log_a
            .iter()
            .find(|r| r.score == Some(best_score))
            .expect("winning trial");
        assert_eq!(winner.config, best_a);
        // A single trial returns that trial's config.
        let (only, log) = random_search(&folds[0], &spec, 1, 3).expect("search");
        assert_eq!(only, log[0].config);
        let csv = trials_csv(&log_a);
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn twenty_trials_beat_the_default_config() {
        let ds = small_sim(600, 29);
        let folds = make_folds(&ds, 2, 0.8, 31).expect("folds");
        let spec = DistributionSpec::new(Family::GaussianCholesky, 3, None).expect("spec");
        let tuning = &folds[0];
        let default = FitConfig::default();
        let default_model =
            fit(&tuning.train, Some(&tuning.test), &spec, &default).expect("fit");
        let default_score = score_nll(&default_model, &tuning.test).expect("score");
        let (_, log) = random_search(tuning, &spec, 20, 41).expect("search");
        let best_score = log
            .iter()
            .filter_map(|r| r.score)
            .fold(f64::MAX, f64::min);
        assert!(
            best_score <= default_score,
            "best trial {best_score} vs default {default_score}"
        );
    }

    #[test]
    fn bench_time_grows_with_rounds() {
        let ds = small_sim(2_000, 37);
        let spec = DistributionSpec::new(Family::GaussianCholesky, 3, None).expect("spec");
        let short = bench_fit("short", &ds, &spec, &quick_config(10)).expect("bench");
        let long = bench_fit("long", &ds, &spec, &quick_config(80)).expect("bench");
        assert!(
            long.wall_seconds >= 1.2 * short.wall_seconds,
            "10 rounds {:.4}s vs 80 rounds {:.4}s",
            short.wall_seconds,
            long.wall_seconds
        );
        let csv = bench_csv(&[short, long]);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn run_study_produces_reports_and_a_table() {
        let ds = small_sim(300, 43);
        let models = vec![
            StudyModel {
                id: "chol".to_string(),
                family: Family::GaussianCholesky,
                rank: None,
                config: quick_config(5),
            },
            StudyModel {
                id: "lra2".to_string(),
                family: Family::GaussianLowRank,
                rank: Some(2),
                config: quick_config(5),
            },
        ];
        let (reports, table) = run_study(&[ds], &models, 3, 0.8, 0, 51).expect("study");
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].fold_scores.len(), 2);
        assert!(reports.iter().all(|r| r.wall_seconds > 0.0));
        assert_eq!(table.model_ids, vec!["chol", "lra2"]);
        let ranks: f64 = table.average_ranks.iter().sum();
        assert!((ranks - 3.0).abs() < 1e-12);
    }
}
