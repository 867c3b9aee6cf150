//! Second-order gradient boosting over distribution parameters.
//!
//! A fit starts from the unconditional maximum likelihood estimates of
//! the raw parameters (the offsets) and then grows one regression tree
//! per parameter per round on the floored, stabilized gradients and
//! Hessians of the joint negative log-likelihood. Row subsamples are
//! shared by the K trees of a round so every parameter sees the same
//! data view; column subsamples are drawn per tree. All random draws
//! come from streams derived from the config seed, so a fit is
//! reproducible bit for bit regardless of thread count.

mod serialize;
pub mod tree;

pub use serialize::{load_model, model_from_str, model_to_string, save_model, MODEL_SCHEMA_VERSION};
pub use tree::{grow_tree, Node, Tree};

use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::grad_hess_batch;
use crate::distributions::special::{digamma, trigamma};
use crate::distributions::{validate_simplex, DistributionSpec, Family, LinkedParams};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_factorize, LowerTriangular, SquareMatrix};
use crate::seeds::derive_seed;

/// Gradient and Hessian rescaling applied per parameter column before
/// tree growth, keeping update magnitudes comparable across parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stabilization {
    /// No rescaling.
    None,
    /// Divide by the median absolute deviation, clamped below at 1e-4.
    Mad,
    /// Divide by the root mean square, clamped below at 1e-4.
    L2,
}

impl std::fmt::Display for Stabilization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stabilization::None => "none",
            Stabilization::Mad => "mad",
            Stabilization::L2 => "l2",
        };
        write!(f, "{name}")
    }
}

impl FromStr for Stabilization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Stabilization::None),
            "mad" => Ok(Stabilization::Mad),
            "l2" => Ok(Stabilization::L2),
            other => Err(Error::InvalidConfig(format!(
                "unknown stabilization '{other}' (expected none, mad or l2)"
            ))),
        }
    }
}

/// Hyper-parameters of a boosted fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Shrinkage applied to every tree's contribution, in [0.001, 1].
    pub learning_rate: f64,
    /// Maximum split levels per tree, in [2, 10].
    pub max_depth: usize,
    /// Penalty subtracted from every split gain, at least 0.
    pub gamma: f64,
    /// Fraction of rows drawn per round, in (0, 1].
    pub subsample: f64,
    /// Fraction of feature columns drawn per tree, in (0, 1].
    pub colsample: f64,
    /// Minimum stabilized Hessian sum per child, at least 0.
    pub min_child_weight: f64,
    /// Number of boosting rounds, at least 1.
    pub n_rounds: usize,
    /// Rounds without validation improvement before stopping; 0 = off.
    pub early_stopping_rounds: usize,
    /// L2 regularizer on leaf weights, at least 0.
    pub lambda_l2: f64,
    /// Gradient/Hessian rescaling mode.
    pub stabilization: Stabilization,
    /// Base seed for all subsampling streams.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.1,
            max_depth: 3,
            gamma: 0.0,
            subsample: 1.0,
            colsample: 1.0,
            min_child_weight: 1.0,
            n_rounds: 500,
            early_stopping_rounds: 2,
            lambda_l2: 1.0,
            stabilization: Stabilization::Mad,
            seed: 0,
        }
    }
}

impl FitConfig {
    /// Checks every knob against its documented range.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::InvalidConfig(message));
        if !(0.001..=1.0).contains(&self.learning_rate) {
            return fail(format!(
                "learning_rate must lie in [0.001, 1], got {}",
                self.learning_rate
            ));
        }
        if !(2..=10).contains(&self.max_depth) {
            return fail(format!(
                "max_depth must lie in [2, 10], got {}",
                self.max_depth
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be finite and at least 0, got {}", self.gamma));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return fail(format!(
                "subsample must lie in (0, 1], got {}",
                self.subsample
            ));
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return fail(format!(
                "colsample must lie in (0, 1], got {}",
                self.colsample
            ));
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return fail(format!(
                "min_child_weight must be finite and at least 0, got {}",
                self.min_child_weight
            ));
        }
        if self.n_rounds == 0 {
            return fail("n_rounds must be at least 1".to_string());
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return fail(format!(
                "lambda_l2 must be finite and at least 0, got {}",
                self.lambda_l2
            ));
        }
        Ok(())
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics input"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mad_of(values: &[f64]) -> f64 {
    let mut copy = values.to_vec();
    let med = median_of(&mut copy);
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median_of(&mut dev)
}

fn rms_of(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Rescales one gradient column and its Hessian column.
///
/// `mad` divides each column by its own median absolute deviation and
/// `l2` by its own root mean square, both clamped below at 1e-4 so a
/// degenerate column passes through scaled by at most 1e4. Applied per
/// parameter, per round, after Hessian flooring and before tree growth.
pub fn stabilize(g: &[f64], h: &[f64], mode: Stabilization) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(g.len(), h.len(), "column lengths must agree");
    let scale = |values: &[f64], divisor: f64| -> Vec<f64> {
        values.iter().map(|v| v / divisor).collect()
    };
    match mode {
        Stabilization::None => (g.to_vec(), h.to_vec()),
        Stabilization::Mad => (
            scale(g, mad_of(g).max(1e-4)),
            scale(h, mad_of(h).max(1e-4)),
        ),
        Stabilization::L2 => (
            scale(g, rms_of(g).max(1e-4)),
            scale(h, rms_of(h).max(1e-4)),
        ),
    }
}

/// Sample mean and biased (1/N) sample covariance of the responses.
fn sample_moments(y: &Array2<f64>) -> (Vec<f64>, SquareMatrix) {
    let n = y.nrows();
    let d = y.ncols();
    let mut mean = vec![0.0; d];
    for row in y.rows() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v / n as f64;
        }
    }
    let mut cov = SquareMatrix::zeros(d);
    for row in y.rows() {
        for i in 0..d {
            let ri = row[i] - mean[i];
            for j in 0..=i {
                let rj = row[j] - mean[j];
                let v = cov.get(i, j) + ri * rj / n as f64;
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
    }
    (mean, cov)
}

/// Estimates the unconditional maximum likelihood raw parameters used
/// as boosting offsets.
///
/// Gaussian heads use the sample mean and the Cholesky factor of the
/// biased sample covariance, with the low-rank head keeping the first
/// `r` factor columns and putting the remainder on the diagonal. The
/// Dirichlet head runs a Newton iteration from a moment-matching start
/// and the Student-T head refines a Gaussian start (degrees of freedom
/// 30) with coordinate Newton steps until the mean NLL improves by
/// less than 1e-10.
pub fn fit_offsets(spec: &DistributionSpec, y: &Array2<f64>) -> Result<Vec<f64>> {
    if y.ncols() != spec.dim() {
        return Err(Error::InvalidResponse(format!(
            "family {} expects {} response columns, got {}",
            spec.family(),
            spec.dim(),
            y.ncols()
        )));
    }
    match spec.family() {
        Family::GaussianCholesky => gaussian_offsets(spec, y),
        Family::GaussianLowRank => lowrank_offsets(spec, y),
        Family::StudentTCholesky => student_offsets(spec, y),
        Family::Dirichlet => dirichlet_offsets(spec, y),
    }
}

fn require_rows(y: &Array2<f64>, d: usize) -> Result<()> {
    if y.nrows() < d + 2 {
        return Err(Error::InvalidResponse(format!(
            "moment estimation needs at least {} rows for {} targets, got {}",
            d + 2,
            d,
            y.nrows()
        )));
    }
    Ok(())
}

fn factorize_sample_cov(cov: &SquareMatrix) -> Result<LowerTriangular> {
    cholesky_factorize(cov).map_err(|_| Error::SingularCovariance)
}

fn gaussian_offsets(spec: &DistributionSpec, y: &Array2<f64>) -> Result<Vec<f64>> {
    let d = spec.dim();
    require_rows(y, d)?;
    let (mean, cov) = sample_moments(y);
    let chol = factorize_sample_cov(&cov)?;
    let mut raw = mean;
    for i in 0..d {
        raw.push(chol.get(i, i).ln());
    }
    for i in 1..d {
        for j in 0..i {
            raw.push(chol.get(i, j));
        }
    }
    Ok(raw)
}

/// Share of each marginal variance the low-rank offsets keep on the
/// noise diagonal. Without it, rows the loadings explain exactly would
/// start with a nearly singular composed covariance, whose huge
/// first-round gradients destabilize training.
const LOWRANK_NOISE_SHARE: f64 = 0.1;

fn lowrank_offsets(spec: &DistributionSpec, y: &Array2<f64>) -> Result<Vec<f64>> {
    let d = spec.dim();
    let r = spec.rank().expect("low-rank spec carries a rank");
    require_rows(y, d)?;
    let (mean, cov) = sample_moments(y);
    let chol = factorize_sample_cov(&cov)?;
    // Loadings are the first r Cholesky columns shrunk by sqrt(1 - c),
    // with c = LOWRANK_NOISE_SHARE; the diagonal keeps the remaining
    // mass, so composed marginal variances match the sample exactly
    // while off-diagonals shrink by only the factor (1 - c).
    let keep = 1.0 - LOWRANK_NOISE_SHARE;
    let mut raw = mean;
    for i in 0..d {
        let mut explained = 0.0;
        for j in 0..r.min(i + 1) {
            explained += chol.get(i, j) * chol.get(i, j);
        }
        let residual =
            (cov.get(i, i) - keep * explained).max(LOWRANK_NOISE_SHARE * cov.get(i, i));
        raw.push(residual.ln());
    }
    for i in 0..d {
        for j in 0..r {
            raw.push(if j <= i {
                keep.sqrt() * chol.get(i, j)
            } else {
                0.0
            });
        }
    }
    Ok(raw)
}

/// Mean NLL of a constant raw parameter vector over all rows.
fn mean_nll_at(spec: &DistributionSpec, raw: &[f64], y: &Array2<f64>) -> Result<f64> {
    let per_row: Result<Vec<f64>> = y
        .rows()
        .into_iter()
        .map(|row| spec.nll(raw, row.as_slice().expect("contiguous response row")))
        .collect();
    Ok(per_row?.iter().sum::<f64>() / y.nrows() as f64)
}

fn student_offsets(spec: &DistributionSpec, y: &Array2<f64>) -> Result<Vec<f64>> {
    let d = spec.dim();
    require_rows(y, d)?;
    let (mean, mut cov) = sample_moments(y);
    // With nu fixed at 30 the scale matrix implied by the sample
    // covariance is (nu - 2) / nu of it.
    let nu0 = 30.0;
    for i in 0..d {
        for j in 0..d {
            cov.set(i, j, cov.get(i, j) * (nu0 - 2.0) / nu0);
        }
    }
    let chol = factorize_sample_cov(&cov)?;
    let mut raw = mean;
    for i in 0..d {
        raw.push(chol.get(i, i).ln());
    }
    for i in 1..d {
        for j in 0..i {
            raw.push(chol.get(i, j));
        }
    }
    raw.push((nu0 - 2.0f64).ln());

    // Coordinate Newton refinement: simultaneous damped steps
    // -g_k / h_k on every raw coordinate, with step halving to keep
    // the mean NLL decreasing.
    let n = y.nrows();
    let k = spec.param_count();
    let mut current = mean_nll_at(spec, &raw, y)?;
    for _ in 0..200 {
        let eta = Array2::from_shape_fn((n, k), |(_, j)| raw[j]);
        let batch = grad_hess_batch(spec, &eta, y)?;
        let mut delta = vec![0.0; k];
        for j in 0..k {
            let g: f64 = batch.grad.column(j).sum();
            let h: f64 = batch.hess.column(j).sum();
            delta[j] = -g / h;
        }
        let mut step = 1.0;
        let mut improved = None;
        for _ in 0..40 {
            let trial: Vec<f64> = raw
                .iter()
                .zip(delta.iter())
                .map(|(r, d)| r + step * d)
                .collect();
            if let Ok(v) = mean_nll_at(spec, &trial, y) {
                if v < current {
                    improved = Some((trial, v));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, value)) = improved else {
            // No direction of descent at floating-point resolution.
            return Ok(raw);
        };
        let gain = current - value;
        raw = trial;
        current = value;
        if gain < 1e-10 {
            return Ok(raw);
        }
    }
    Err(Error::NoConvergence("student-t offset estimation"))
}

fn dirichlet_offsets(spec: &DistributionSpec, y: &Array2<f64>) -> Result<Vec<f64>> {
    let d = spec.dim();
    let n = y.nrows();
    for (i, row) in y.rows().into_iter().enumerate() {
        validate_simplex(row.as_slice().expect("contiguous response row")).map_err(|e| {
            Error::InvalidResponse(format!("data row {i}: {e}"))
        })?;
    }

    // Moment-matching start: each component's variance pins the common
    // concentration, and the median across components is robust to
    // near-degenerate columns.
    let mut mean = vec![0.0; d];
    let mut mean_sq = vec![0.0; d];
    let mut mean_log = vec![0.0; d];
    for row in y.rows() {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
            mean_sq[j] += row[j] * row[j] / n as f64;
            mean_log[j] += row[j].ln() / n as f64;
        }
    }
    let mut concentration_votes: Vec<f64> = (0..d)
        .filter_map(|j| {
            let var = mean_sq[j] - mean[j] * mean[j];
            (var > 1e-12).then(|| mean[j] * (1.0 - mean[j]) / var - 1.0)
        })
        .filter(|s| *s > 0.0)
        .collect();
    let alpha0 = if concentration_votes.is_empty() {
        d as f64
    } else {
        median_of(&mut concentration_votes).clamp(0.5, 1e6)
    };
    let mut alpha: Vec<f64> = mean.iter().map(|m| (m * alpha0).max(1e-3)).collect();

    // Newton iteration on the exact mean NLL. The Hessian is
    // diag(trigamma(alpha_d)) - trigamma(alpha_0) 11', inverted in
    // closed form through the rank-one update.
    let nll = |alpha: &[f64]| -> f64 {
        let a0: f64 = alpha.iter().sum();
        let mut v = -crate::distributions::special::ln_gamma(a0);
        for j in 0..d {
            v += crate::distributions::special::ln_gamma(alpha[j]);
            v -= (alpha[j] - 1.0) * mean_log[j];
        }
        v
    };
    let mut current = nll(&alpha);
    for _ in 0..200 {
        let a0: f64 = alpha.iter().sum();
        let grad: Vec<f64> = (0..d)
            .map(|j| digamma(alpha[j]) - digamma(a0) - mean_log[j])
            .collect();
        if grad.iter().all(|g| g.abs() < 1e-10) {
            return Ok(alpha.iter().map(|a| a.ln()).collect());
        }
        let q: Vec<f64> = alpha.iter().map(|a| trigamma(*a)).collect();
        let c = trigamma(a0);
        let s1: f64 = q.iter().map(|v| 1.0 / v).sum();
        let sg: f64 = grad.iter().zip(q.iter()).map(|(g, v)| g / v).sum();
        let denom = 1.0 - c * s1;
        if denom.abs() < 1e-300 {
            return Err(Error::NoConvergence("dirichlet offset estimation"));
        }
        let shift = c * sg / denom;
        let delta: Vec<f64> = (0..d).map(|j| -(grad[j] + shift) / q[j]).collect();

        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = alpha
                .iter()
                .zip(delta.iter())
                .map(|(a, dl)| a + step * dl)
                .collect();
            if trial.iter().all(|a| *a > 0.0) {
                let v = nll(&trial);
                if v.is_finite() && v <= current {
                    alpha = trial;
                    current = v;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            return Err(Error::NoConvergence("dirichlet offset estimation"));
        }
    }
    Err(Error::NoConvergence("dirichlet offset estimation"))
}

/// A fitted boosting model: offsets plus one tree per parameter per
/// round, along with everything needed to reproduce the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    /// Response distribution this model parameterizes.
    pub spec: DistributionSpec,
    /// Raw-scale intercepts, one per distribution parameter.
    pub offsets: Vec<f64>,
    /// One K-tuple of trees per boosting round.
    pub rounds: Vec<Vec<Tree>>,
    /// Hyper-parameters the model was fit with.
    pub config: FitConfig,
    /// Names of the training feature columns, in order.
    pub feature_names: Vec<String>,
    /// Number of leading rounds used by prediction.
    pub best_round: usize,
    /// Mean training NLL after each round.
    pub train_history: Vec<f64>,
    /// Mean validation NLL after each round; empty without a split.
    pub valid_history: Vec<f64>,
}

/// Linked distribution view of one predicted row.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Constrained parameters after applying the links.
    pub params: LinkedParams,
    /// Predicted mean of each response.
    pub mean: Vec<f64>,
    /// Predicted covariance; None for families without one (Dirichlet).
    pub covariance: Option<SquareMatrix>,
}

impl BoostedModel {
    /// Raw predictions for a feature matrix: offsets plus the shrunken
    /// contributions of the first `best_round` rounds.
    pub fn predict_raw(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.feature_names.len() {
            return Err(Error::FeatureMismatch {
                expected: self.feature_names.len(),
                got: features.ncols(),
            });
        }
        let k = self.spec.param_count();
        let lr = self.config.learning_rate;
        let rows: Vec<Vec<f64>> = (0..features.nrows())
            .into_par_iter()
            .map(|i| {
                let mut eta = self.offsets.clone();
                for round in &self.rounds[..self.best_round] {
                    for (kk, tree) in round.iter().enumerate() {
                        eta[kk] += lr * tree.predict_row(features, i);
                    }
                }
                eta
            })
            .collect();
        let mut out = Array2::zeros((features.nrows(), k));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }

    /// Linked per-row parameters, means and covariances.
    pub fn predict_dist(&self, features: &Array2<f64>) -> Result<Vec<Prediction>> {
        let raw = self.predict_raw(features)?;
        let mut out = Vec::with_capacity(raw.nrows());
        for row in raw.rows() {
            let raw_row = row.as_slice().expect("contiguous prediction row");
            let params = self.spec.link_apply(raw_row)?;
            let mean = self.spec.mean(raw_row)?;
            let covariance = match self.spec.covariance(raw_row) {
                Ok(c) => Some(c),
                Err(Error::Unsupported(_)) => None,
                Err(e) => return Err(e),
            };
            out.push(Prediction {
                params,
                mean,
                covariance,
            });
        }
        Ok(out)
    }

    /// Mean NLL of this model on a dataset.
    pub fn mean_nll(&self, data: &Dataset) -> Result<f64> {
        let raw = self.predict_raw(&data.features)?;
        mean_nll_rows(&self.spec, &raw, &data.responses)
    }
}

/// Mean per-observation NLL of row-wise raw parameters. Rows are
/// evaluated in parallel but summed in order, so the result does not
/// depend on thread count.
pub(crate) fn mean_nll_rows(
    spec: &DistributionSpec,
    eta: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<f64> {
    let n = y.nrows();
    let per_row: Result<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            spec.nll(
                eta.row(i).as_slice().expect("contiguous parameter row"),
                y.row(i).as_slice().expect("contiguous response row"),
            )
        })
        .collect();
    Ok(per_row?.iter().sum::<f64>() / n as f64)
}

fn with_round(e: Error, round: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (round {round})")),
        other => other,
    }
}

fn sample_indices(rng: &mut rand_chacha::ChaCha8Rng, total: usize, count: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, total, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Fits a boosted model to a training set, optionally early-stopping
/// on a validation split.
///
/// Each round computes the gradient/Hessian batch at the current raw
/// predictions, stabilizes each parameter column, draws one shared row
/// subsample and a per-tree column subsample, grows one tree per
/// parameter and applies the shrunken updates. With a validation split
/// and `early_stopping_rounds > 0`, training stops once the mean
/// validation NLL has not improved for that many rounds and
/// `best_round` is the argmin of the recorded sequence.
pub fn fit(
    train: &Dataset,
    valid: Option<&Dataset>,
    spec: &DistributionSpec,
    config: &FitConfig,
) -> Result<BoostedModel> {
    config.validate()?;
    if train.n_responses() != spec.dim() {
        return Err(Error::InvalidResponse(format!(
            "family {} expects {} response columns, got {}",
            spec.family(),
            spec.dim(),
            train.n_responses()
        )));
    }
    if let Some(v) = valid {
        if v.n_features() != train.n_features() {
            return Err(Error::FeatureMismatch {
                expected: train.n_features(),
                got: v.n_features(),
            });
        }
        if v.n_responses() != train.n_responses() {
            return Err(Error::InvalidResponse(format!(
                "validation split has {} response columns, training has {}",
                v.n_responses(),
                train.n_responses()
            )));
        }
    }

    let offsets = fit_offsets(spec, &train.responses)?;
    let n = train.n_rows();
    let p = train.n_features();
    let k = spec.param_count();
    let mut eta = Array2::from_shape_fn((n, k), |(_, j)| offsets[j]);
    let mut eta_valid =
        valid.map(|v| Array2::from_shape_fn((v.n_rows(), k), |(_, j)| offsets[j]));

    let mut rounds: Vec<Vec<Tree>> = Vec::new();
    let mut train_history = Vec::new();
    let mut valid_history: Vec<f64> = Vec::new();
    let mut best_valid = f64::INFINITY;
    let mut stall = 0usize;

    for t in 0..config.n_rounds {
        let round_no = t + 1;
        let batch =
            grad_hess_batch(spec, &eta, &train.responses).map_err(|e| with_round(e, round_no))?;
        let mut g_cols = Vec::with_capacity(k);
        let mut h_cols = Vec::with_capacity(k);
        for j in 0..k {
            let (g, h) = stabilize(
                batch.grad.column(j).to_vec().as_slice(),
                batch.hess.column(j).to_vec().as_slice(),
                config.stabilization,
            );
            g_cols.push(g);
            h_cols.push(h);
        }

        // One shared row subsample per round; column draws are per tree.
        let row_mask: Vec<usize> = if config.subsample < 1.0 {
            let count = ((n as f64 * config.subsample).floor() as usize).clamp(1, n);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                t as u64,
                k as u64,
            ));
            sample_indices(&mut rng, n, count)
        } else {
            (0..n).collect()
        };

        let grown: Vec<(Tree, Vec<f64>, Vec<f64>)> = (0..k)
            .into_par_iter()
            .map(|kk| {
                let tree_seed = derive_seed(config.seed, t as u64, kk as u64);
                let tree = if p == 0 {
                    let g_sum: f64 = row_mask.iter().map(|&i| g_cols[kk][i]).sum();
                    let h_sum: f64 = row_mask.iter().map(|&i| h_cols[kk][i]).sum();
                    Tree::leaf(-g_sum / (h_sum + config.lambda_l2))
                } else {
                    let col_mask: Vec<usize> = if config.colsample < 1.0 {
                        let count =
                            ((p as f64 * config.colsample).floor() as usize).clamp(1, p);
                        let mut rng =
                            rand_chacha::ChaCha8Rng::seed_from_u64(tree_seed);
                        sample_indices(&mut rng, p, count)
                    } else {
                        (0..p).collect()
                    };
                    grow_tree(
                        &train.features,
                        &g_cols[kk],
                        &h_cols[kk],
                        config,
                        &row_mask,
                        &col_mask,
                        tree_seed,
                    )
                };
                let train_pred: Vec<f64> = (0..n)
                    .map(|i| tree.predict_row(&train.features, i))
                    .collect();
                let valid_pred: Vec<f64> = valid
                    .map(|v| {
                        (0..v.n_rows())
                            .map(|i| tree.predict_row(&v.features, i))
                            .collect()
                    })
                    .unwrap_or_default();
                (tree, train_pred, valid_pred)
            })
            .collect();

        let mut round_trees = Vec::with_capacity(k);
        for (kk, (tree, train_pred, valid_pred)) in grown.into_iter().enumerate() {
            for (i, pred) in train_pred.iter().enumerate() {
                eta[(i, kk)] += config.learning_rate * pred;
            }
            if let Some(ev) = eta_valid.as_mut() {
                for (i, pred) in valid_pred.iter().enumerate() {
                    ev[(i, kk)] += config.learning_rate * pred;
                }
            }
            round_trees.push(tree);
        }
        rounds.push(round_trees);

        let train_nll = mean_nll_rows(spec, &eta, &train.responses)
            .map_err(|e| with_round(e, round_no))?;
        train_history.push(train_nll);

        if let (Some(ev), Some(v)) = (eta_valid.as_ref(), valid) {
            let valid_nll =
                mean_nll_rows(spec, ev, &v.responses).map_err(|e| with_round(e, round_no))?;
            valid_history.push(valid_nll);
            if config.early_stopping_rounds > 0 {
                if valid_nll < best_valid {
                    best_valid = valid_nll;
                    stall = 0;
                } else {
                    stall += 1;
                    if stall >= config.early_stopping_rounds {
                        break;
                    }
                }
            }
        }
    }

    let best_round = if config.early_stopping_rounds > 0 && !valid_history.is_empty() {
        let (best_idx, _) = valid_history
            .iter()
            .enumerate()
            .fold((0usize, f64::INFINITY), |(bi, bv), (i, &v)| {
                if v < bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        best_idx + 1
    } else {
        rounds.len()
    };

    Ok(BoostedModel {
        spec: *spec,
        offsets,
        rounds,
        config: config.clone(),
        feature_names: train.feature_names.clone(),
        best_round,
        train_history,
        valid_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, SimulationSpec};

    fn gaussian_spec(d: usize) -> DistributionSpec {
        DistributionSpec::new(Family::GaussianCholesky, d, None).expect("valid spec")
    }

    #[test]
    fn divergent_training_surfaces_as_a_round_stamped_error() {
        // Undamped Newton steps on exp-linked scale coordinates overshoot when
        // the current scale is far too large: the gradient saturates near 1
        // while the Hessian vanishes, so raw steps grow without bound. At an
        // aggressive learning rate on a strongly heteroscedastic fixture this
        // drives the predictor to overflow, which must surface as NonFinite
        // with the offending round attached rather than as a poisoned model.
        let ds = small_sim(800, 5);
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 60,
            learning_rate: 0.3,
            stabilization: Stabilization::None,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        match fit(&ds, None, &spec, &config) {
            Err(Error::NonFinite(message)) => {
                assert!(
                    message.contains("round"),
                    "divergence should carry the round index, got: {message}"
                );
            }
            Err(other) => panic!("expected NonFinite, got {other:?}"),
            Ok(model) => panic!(
                "expected divergence at this learning rate, got final NLL {}",
                model.train_history.last().unwrap()
            ),
        }
    }

    #[test]
    fn config_defaults_match_the_documented_values() {
        let c = FitConfig::default();
        assert_eq!(c.lambda_l2, 1.0);
        assert_eq!(c.stabilization, Stabilization::Mad);
        assert_eq!(c.n_rounds, 500);
        assert_eq!(c.early_stopping_rounds, 2);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_ranges_are_enforced() {
        let mut c = FitConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c = FitConfig::default();
        c.max_depth = 11;
        assert!(c.validate().is_err());
        c = FitConfig::default();
        c.subsample = 0.0;
        assert!(c.validate().is_err());
        c = FitConfig::default();
        c.n_rounds = 0;
        assert!(c.validate().is_err());
        c = FitConfig::default();
        c.gamma = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stabilize_leaves_zero_gradients_unchanged() {
        let g = vec![0.0; 8];
        let h = vec![1e-6; 8];
        let (gs, _) = stabilize(&g, &h, Stabilization::Mad);
        assert_eq!(gs, g);
    }

    #[test]
    fn stabilize_is_scale_equivariant_under_mad() {
        let g = vec![0.3, -0.2, 1.4, 0.0, -0.7, 0.9];
        let h = vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let (gs, hs) = stabilize(&g, &h, Stabilization::Mad);
        let g_big: Vec<f64> = g.iter().map(|v| v * 1000.0).collect();
        let (gs_big, hs_big) = stabilize(&g_big, &h, Stabilization::Mad);
        for (a, b) in gs.iter().zip(gs_big.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(hs, hs_big);
    }

    #[test]
    fn stabilized_columns_have_unit_dispersion() {
        let columns = [
            vec![0.001, -0.002, 0.004, -0.001, 0.003, -0.005, 0.002],
            vec![100.0, -250.0, 75.0, 300.0, -120.0, 60.0, -90.0],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0],
        ];
        for col in &columns {
            let h = vec![1.0; col.len()];
            let (gs, _) = stabilize(col, &h, Stabilization::Mad);
            let m = mad_of(&gs);
            assert!(
                (m - 1.0).abs() < 1e-12 || m.abs() < 1e-12,
                "post-stabilization MAD {m}"
            );
            let (gl, _) = stabilize(col, &h, Stabilization::L2);
            let r = rms_of(&gl);
            assert!((r - 1.0).abs() < 1e-12 || r.abs() < 1e-12);
        }
    }

    #[test]
    fn stabilize_none_is_identity() {
        let g = vec![1.0, 2.0];
        let h = vec![3.0, 4.0];
        let (gs, hs) = stabilize(&g, &h, Stabilization::None);
        assert_eq!(gs, g);
        assert_eq!(hs, h);
    }

    #[test]
    fn gaussian_offsets_recover_standard_normal_moments() {
        let spec = gaussian_spec(2);
        // Standard bivariate normal: identity factor in raw form.
        let raw_true = vec![0.0, 0.0, 0.0, 0.0, 0.0];
        let y = spec.sample(&raw_true, 10_000, 31).expect("sample");
        let offsets = fit_offsets(&spec, &y).expect("offsets");
        let mean = spec.mean(&offsets).expect("mean");
        let cov = spec.covariance(&offsets).expect("covariance");
        for d in 0..2 {
            assert!(mean[d].abs() < 0.05, "mean {d}: {}", mean[d]);
            for e in 0..2 {
                let target = if d == e { 1.0 } else { 0.0 };
                assert!(
                    (cov.get(d, e) - target).abs() < 0.05,
                    "cov ({d},{e}): {}",
                    cov.get(d, e)
                );
            }
        }
    }

    #[test]
    fn duplicated_response_columns_are_rejected_as_singular() {
        let spec = gaussian_spec(2);
        let mut y = Array2::zeros((50, 2));
        for i in 0..50 {
            let v = (i as f64).sin();
            y[(i, 0)] = v;
            y[(i, 1)] = v;
        }
        assert!(matches!(
            fit_offsets(&spec, &y),
            Err(Error::SingularCovariance)
        ));
    }

    #[test]
    fn offsets_require_enough_rows() {
        let spec = gaussian_spec(3);
        let y = Array2::zeros((4, 3));
        assert!(matches!(
            fit_offsets(&spec, &y),
            Err(Error::InvalidResponse(_))
        ));
    }

    #[test]
    fn dirichlet_offsets_recover_known_concentrations() {
        let spec = DistributionSpec::new(Family::Dirichlet, 3, None).expect("spec");
        let raw_true: Vec<f64> = [2.0f64, 3.0, 4.0].iter().map(|a| a.ln()).collect();
        let y = spec.sample(&raw_true, 10_000, 77).expect("sample");
        let offsets = fit_offsets(&spec, &y).expect("offsets");
        for (j, raw_j) in offsets.iter().enumerate() {
            let alpha = raw_j.exp();
            let truth = [2.0, 3.0, 4.0][j];
            assert!(
                (alpha - truth).abs() / truth < 0.05,
                "alpha_{j}: {alpha} vs {truth}"
            );
        }
        // Stationarity: the digamma residuals vanish at the MLE.
        let a: Vec<f64> = offsets.iter().map(|r| r.exp()).collect();
        let a0: f64 = a.iter().sum();
        let mut mean_log = vec![0.0; 3];
        for row in y.rows() {
            for j in 0..3 {
                mean_log[j] += row[j].ln() / y.nrows() as f64;
            }
        }
        for j in 0..3 {
            let g = digamma(a[j]) - digamma(a0) - mean_log[j];
            assert!(g.abs() < 1e-8, "gradient {j}: {g}");
        }
    }

    #[test]
    fn dirichlet_offsets_reject_off_simplex_rows() {
        let spec = DistributionSpec::new(Family::Dirichlet, 3, None).expect("spec");
        let mut y = Array2::from_elem((20, 3), 1.0 / 3.0);
        y[(7, 0)] = 0.9;
        let err = fit_offsets(&spec, &y).unwrap_err();
        assert!(matches!(err, Error::InvalidResponse(_)));
        assert!(err.to_string().contains("row 7"), "{err}");
    }

    #[test]
    fn student_offsets_land_on_a_stationary_point() {
        let spec = DistributionSpec::new(Family::StudentTCholesky, 2, None).expect("spec");
        // nu = 6, non-trivial scale structure.
        let raw_true = vec![0.5, -0.3, 0.2, -0.1, 0.4, (6.0f64 - 2.0).ln()];
        let y = spec.sample(&raw_true, 8_000, 13).expect("sample");
        let offsets = fit_offsets(&spec, &y).expect("offsets");
        let n = y.nrows();
        let eta = Array2::from_shape_fn((n, 6), |(_, j)| offsets[j]);
        let batch = grad_hess_batch(&spec, &eta, &y).expect("derivatives");
        for j in 0..6 {
            let mean_grad = batch.grad.column(j).sum() / n as f64;
            assert!(mean_grad.abs() < 1e-4, "coordinate {j}: {mean_grad}");
        }
        // The tail estimate must stay in a sane band around the truth.
        let nu = 2.0 + offsets[5].exp();
        assert!((3.0..12.0).contains(&nu), "nu {nu}");
    }

    #[test]
    fn lowrank_offsets_reproduce_leading_structure() {
        let spec = DistributionSpec::new(Family::GaussianLowRank, 3, Some(2)).expect("spec");
        let chol_spec = gaussian_spec(3);
        let raw_true = vec![1.0, -1.0, 0.5, 0.1, -0.2, 0.05, 0.8, -0.5, 0.3];
        let y = chol_spec.sample(&raw_true, 6_000, 51).expect("sample");
        let offsets = fit_offsets(&spec, &y).expect("offsets");
        assert_eq!(offsets.len(), spec.param_count());
        let cov = spec.covariance(&offsets).expect("covariance");
        let sample_cov = sample_moments(&y).1;
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (cov.get(i, j) - sample_cov.get(i, j)).abs() < 0.2,
                    "({i},{j}): {} vs {}",
                    cov.get(i, j),
                    sample_cov.get(i, j)
                );
            }
        }
    }

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

    #[test]
    fn zero_features_keep_predictions_at_the_offsets() {
        let full = small_sim(600, 2);
        let empty = Dataset::new(
            "no-features",
            Array2::zeros((600, 0)),
            vec![],
            full.responses.clone(),
            full.response_names.clone(),
        )
        .expect("dataset");
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 25,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        let model = fit(&empty, None, &spec, &config).expect("fit");
        let offsets = fit_offsets(&spec, &empty.responses).expect("offsets");
        let offset_nll = mean_nll_at(&spec, &offsets, &empty.responses).expect("nll");
        let final_nll = *model.train_history.last().expect("history");
        assert!(
            (final_nll - offset_nll).abs() < 1e-9,
            "{final_nll} vs {offset_nll}"
        );
        let raw = model.predict_raw(&empty.features).expect("predict");
        for i in 0..3 {
            for (j, off) in offsets.iter().enumerate() {
                assert!((raw[(i * 100, j)] - off).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_columns_behave_like_zero_features() {
        let full = small_sim(400, 8);
        let constant = Dataset::new(
            "constant",
            Array2::from_elem((400, 2), 1.0),
            vec!["c1".to_string(), "c2".to_string()],
            full.responses.clone(),
            full.response_names.clone(),
        )
        .expect("dataset");
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 20,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        let model = fit(&constant, None, &spec, &config).expect("fit");
        let offsets = fit_offsets(&spec, &constant.responses).expect("offsets");
        let offset_nll = mean_nll_at(&spec, &offsets, &constant.responses).expect("nll");
        assert!((model.train_history.last().unwrap() - offset_nll).abs() < 1e-9);
    }

    #[test]
    fn boosting_beats_the_intercept_model_out_of_sample() {
        let (ds, _) = simulate(&SimulationSpec {
            family: Family::GaussianCholesky,
            n: 10_000,
            seed: 12,
            noise_features: 1,
        })
        .expect("simulate");
        let train_rows: Vec<usize> = (0..6_400).collect();
        let valid_rows: Vec<usize> = (6_400..8_000).collect();
        let test_rows: Vec<usize> = (8_000..10_000).collect();
        let train = ds.subset(&train_rows, "train");
        let valid = ds.subset(&valid_rows, "valid");
        let test = ds.subset(&test_rows, "test");
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 80,
            learning_rate: 0.1,
            ..FitConfig::default()
        };
        let model = fit(&train, Some(&valid), &spec, &config).expect("fit");
        let model_nll = model.mean_nll(&test).expect("score");
        let offsets = fit_offsets(&spec, &train.responses).expect("offsets");
        let intercept_nll = mean_nll_at(&spec, &offsets, &test.responses).expect("nll");
        assert!(
            model_nll < intercept_nll,
            "boosted {model_nll} vs intercept {intercept_nll}"
        );
    }

    #[test]
    fn training_loss_is_monotone_without_stochasticity() {
        let ds = small_sim(800, 5);
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 60,
            learning_rate: 0.1,
            stabilization: Stabilization::None,
            subsample: 1.0,
            colsample: 1.0,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        let model = fit(&ds, None, &spec, &config).expect("fit");
        for w in model.train_history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-10,
                "training NLL increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let ds = small_sim(500, 21);
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 15,
            subsample: 0.8,
            colsample: 0.7,
            early_stopping_rounds: 0,
            seed: 33,
            ..FitConfig::default()
        };
        let a = fit(&ds, None, &spec, &config).expect("fit");
        let b = fit(&ds, None, &spec, &config).expect("fit");
        assert_eq!(a, b);
        let mut other = config.clone();
        other.seed = 34;
        let c = fit(&ds, None, &spec, &other).expect("fit");
        assert_ne!(a, c);
    }

    #[test]
    fn doubling_the_learning_rate_doubles_one_round_deltas() {
        let ds = small_sim(300, 14);
        let spec = gaussian_spec(3);
        let slow = FitConfig {
            n_rounds: 1,
            learning_rate: 0.125,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        let fast = FitConfig {
            learning_rate: 0.25,
            ..slow.clone()
        };
        let a = fit(&ds, None, &spec, &slow).expect("fit");
        let b = fit(&ds, None, &spec, &fast).expect("fit");
        // Same gradients, same trees; only the shrinkage differs.
        assert_eq!(a.rounds, b.rounds);
        for (tree_a, tree_b) in a.rounds[0].iter().zip(b.rounds[0].iter()) {
            for i in 0..5 {
                let ca = slow.learning_rate * tree_a.predict_row(&ds.features, i);
                let cb = fast.learning_rate * tree_b.predict_row(&ds.features, i);
                // Dyadic rates make the doubling exact in floating point.
                assert_eq!(cb, 2.0 * ca);
            }
        }
    }

    #[test]
    fn early_stopping_reports_the_validation_argmin() {
        let ds = small_sim(1_200, 6);
        let train = ds.subset(&(0..900).collect::<Vec<_>>(), "train");
        let valid = ds.subset(&(900..1_200).collect::<Vec<_>>(), "valid");
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 150,
            learning_rate: 0.15,
            max_depth: 4,
            early_stopping_rounds: 3,
            ..FitConfig::default()
        };
        let model = fit(&train, Some(&valid), &spec, &config).expect("fit");
        assert!(!model.valid_history.is_empty());
        let argmin = model
            .valid_history
            .iter()
            .enumerate()
            .fold((0usize, f64::INFINITY), |(bi, bv), (i, &v)| {
                if v < bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
        assert_eq!(model.best_round, argmin + 1);
        if model.valid_history.len() < config.n_rounds {
            // Stopped by the stall counter: the tail after the argmin
            // holds exactly early_stopping_rounds non-improving rounds.
            assert_eq!(
                model.valid_history.len(),
                argmin + 1 + config.early_stopping_rounds
            );
        }
    }

    #[test]
    fn predicting_the_training_set_matches_recorded_history() {
        let ds = small_sim(400, 30);
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 30,
            early_stopping_rounds: 0,
            subsample: 0.9,
            ..FitConfig::default()
        };
        let model = fit(&ds, None, &spec, &config).expect("fit");
        let recomputed = model.mean_nll(&ds).expect("score");
        let recorded = model.train_history[model.best_round - 1];
        assert!(
            (recomputed - recorded).abs() < 1e-9,
            "{recomputed} vs {recorded}"
        );
    }

    #[test]
    fn zero_round_models_predict_offsets() {
        let ds = small_sim(200, 9);
        let spec = gaussian_spec(3);
        let offsets = fit_offsets(&spec, &ds.responses).expect("offsets");
        let model = BoostedModel {
            spec,
            offsets: offsets.clone(),
            rounds: vec![],
            config: FitConfig::default(),
            feature_names: ds.feature_names.clone(),
            best_round: 0,
            train_history: vec![],
            valid_history: vec![],
        };
        let raw = model.predict_raw(&ds.features).expect("predict");
        for i in 0..ds.n_rows() {
            for (j, off) in offsets.iter().enumerate() {
                assert_eq!(raw[(i, j)], *off);
            }
        }
    }

    #[test]
    fn predictions_reject_mismatched_feature_counts() {
        let ds = small_sim(200, 11);
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 5,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        let model = fit(&ds, None, &spec, &config).expect("fit");
        let wrong = Array2::zeros((4, 5));
        assert!(matches!(
            model.predict_raw(&wrong),
            Err(Error::FeatureMismatch { expected: 2, got: 5 })
        ));
    }

    #[test]
    fn predicted_covariances_are_positive_definite() {
        let ds = small_sim(500, 44);
        let spec = gaussian_spec(3);
        let config = FitConfig {
            n_rounds: 40,
            early_stopping_rounds: 0,
            ..FitConfig::default()
        };
        let model = fit(&ds, None, &spec, &config).expect("fit");
        let preds = model.predict_dist(&ds.features).expect("predict");
        assert_eq!(preds.len(), 500);
        for p in &preds {
            let cov = p.covariance.as_ref().expect("gaussian covariance");
            assert!(cholesky_factorize(cov).is_ok());
        }
    }

    #[test]
    fn divergence_errors_carry_the_round_index() {
        let decorated = with_round(Error::NonFinite("raw parameter".to_string()), 17);
        assert!(decorated.to_string().contains("round 17"), "{decorated}");
        let passthrough = with_round(Error::SingularCovariance, 17);
        assert!(matches!(passthrough, Error::SingularCovariance));
    }
}
