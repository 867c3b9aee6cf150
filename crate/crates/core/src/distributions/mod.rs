//! Distribution heads: link functions, likelihoods, moments and sampling.
//!
//! A head maps a raw predictor vector eta (length K) through fixed link
//! functions to the parameters of a joint response distribution, and
//! evaluates the per-observation negative log-likelihood, the mean, the
//! covariance, and random draws. Four heads are provided: Gaussian with a
//! Cholesky-parameterized covariance, Gaussian with a diagonal-plus-low-rank
//! covariance, Student-T with a Cholesky scale matrix and a tail parameter,
//! and Dirichlet for compositional responses.
//!
//! The raw layout is a fixed contract shared with the boosting and
//! serialization code:
//!
//! * Cholesky heads: `raw[0..D)` is mu (identity link); `raw[D..2D)` is the
//!   factor diagonal (exp link); `raw[2D..)` holds the strictly-lower factor
//!   entries row by row (l21, l31, l32, ...), identity link. The Student-T
//!   head appends one entry for the tail: nu = 2 + exp(raw[K-1]).
//! * Low-rank head: `raw[0..D)` is mu; `raw[D..2D)` is the diagonal of the
//!   noise matrix (exp link); `raw[2D..)` is the D x r loading matrix V in
//!   row-major order, identity link.
//! * Dirichlet: alpha_d = exp(raw[d]).

pub mod special;

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, cholesky_factorize, compose_cov_cholesky, compose_cov_lowrank, LowerTriangular,
    SquareMatrix,
};
use crate::scalar::Real;

pub(crate) const LOG_2PI: f64 = 1.8378770664093454836;

/// Response family of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "gaussian-chol")]
    GaussianCholesky,
    #[serde(rename = "gaussian-lra")]
    GaussianLowRank,
    #[serde(rename = "student-t")]
    StudentTCholesky,
    #[serde(rename = "dirichlet")]
    Dirichlet,
}

impl Family {
    /// Name used on the command line and in model documents.
    pub fn name(&self) -> &'static str {
        match self {
            Family::GaussianCholesky => "gaussian-chol",
            Family::GaussianLowRank => "gaussian-lra",
            Family::StudentTCholesky => "student-t",
            Family::Dirichlet => "dirichlet",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-chol" => Ok(Family::GaussianCholesky),
            "gaussian-lra" => Ok(Family::GaussianLowRank),
            "student-t" => Ok(Family::StudentTCholesky),
            "dirichlet" => Ok(Family::Dirichlet),
            other => Err(Error::InvalidConfig(format!(
                "unknown family '{other}' (expected gaussian-chol, gaussian-lra, student-t or dirichlet)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully specified head: family, response dimension and, for the low-rank
/// family only, the rank of the loading matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpecFields", into = "SpecFields")]
pub struct DistributionSpec {
    family: Family,
    dim: usize,
    rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct SpecFields {
    family: Family,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
}

impl From<DistributionSpec> for SpecFields {
    fn from(spec: DistributionSpec) -> Self {
        SpecFields {
            family: spec.family,
            dim: spec.dim,
            rank: spec.rank,
        }
    }
}

impl TryFrom<SpecFields> for DistributionSpec {
    type Error = Error;

    fn try_from(fields: SpecFields) -> Result<Self> {
        DistributionSpec::new(fields.family, fields.dim, fields.rank)
    }
}

impl DistributionSpec {
    /// Validates and builds a head specification.
    pub fn new(family: Family, dim: usize, rank: Option<usize>) -> Result<Self> {
        if dim < 1 {
            return Err(Error::InvalidConfig(
                "response dimension must be at least 1".to_string(),
            ));
        }
        if family == Family::Dirichlet && dim < 2 {
            return Err(Error::InvalidConfig(
                "the dirichlet family needs at least 2 response components".to_string(),
            ));
        }
        match (family, rank) {
            (Family::GaussianLowRank, Some(r)) if r >= 1 => {}
            (Family::GaussianLowRank, Some(_)) => {
                return Err(Error::InvalidConfig("rank must be at least 1".to_string()));
            }
            (Family::GaussianLowRank, None) => {
                return Err(Error::InvalidConfig(
                    "the gaussian-lra family requires a rank".to_string(),
                ));
            }
            (_, Some(_)) => {
                return Err(Error::InvalidConfig(format!(
                    "rank is only meaningful for gaussian-lra, not {family}"
                )));
            }
            (_, None) => {}
        }
        Ok(DistributionSpec { family, dim, rank })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> Option<usize> {
        self.rank
    }

    /// Number of raw predictors K the head consumes.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        match self.family {
            Family::GaussianCholesky => d * (d + 3) / 2,
            Family::GaussianLowRank => d * (2 + self.rank.expect("rank checked at construction")),
            Family::StudentTCholesky => d * (d + 3) / 2 + 1,
            Family::Dirichlet => d,
        }
    }

    /// Maps a raw predictor vector through the link functions.
    ///
    /// Fails with `NonFinite` when an exp link overflows, or underflows to
    /// zero on a parameter that must stay strictly positive; either way the
    /// predictors have left the usable range.
    pub fn link_apply(&self, raw: &[f64]) -> Result<LinkedParams> {
        assert_eq!(
            raw.len(),
            self.param_count(),
            "raw predictor length must equal the parameter count"
        );
        let d = self.dim;
        match self.family {
            Family::GaussianCholesky => {
                let (mu, chol) = split_cholesky(d, raw)?;
                Ok(LinkedParams::Gaussian(GaussianParams {
                    mu,
                    cov: CovarianceFactor::Cholesky(chol),
                }))
            }
            Family::GaussianLowRank => {
                let rank = self.rank.expect("rank checked at construction");
                let mu = raw[..d].to_vec();
                let mut kdiag = Vec::with_capacity(d);
                for i in 0..d {
                    kdiag.push(checked_exp(raw[d + i], "noise diagonal", i)?.value());
                }
                let v = raw[2 * d..].to_vec();
                Ok(LinkedParams::Gaussian(GaussianParams {
                    mu,
                    cov: CovarianceFactor::LowRank { kdiag, v, rank },
                }))
            }
            Family::StudentTCholesky => {
                let (mu, chol) = split_cholesky(d, raw)?;
                let tail = checked_exp(raw[raw.len() - 1], "degrees of freedom", 0)?.value();
                Ok(LinkedParams::StudentT(StudentTParams {
                    mu,
                    chol,
                    nu: 2.0 + tail,
                }))
            }
            Family::Dirichlet => {
                let mut alpha = Vec::with_capacity(d);
                for i in 0..d {
                    alpha.push(checked_exp(raw[i], "concentration", i)?.value());
                }
                Ok(LinkedParams::Dirichlet(DirichletParams { alpha }))
            }
        }
    }

    /// Per-observation negative log-likelihood at the linked parameters.
    pub fn nll(&self, raw: &[f64], y: &[f64]) -> Result<f64> {
        assert_eq!(y.len(), self.dim, "response length must equal dim");
        nll_generic(self, raw, y)
    }

    /// Mean of the response distribution.
    pub fn mean(&self, raw: &[f64]) -> Result<Vec<f64>> {
        match self.link_apply(raw)? {
            LinkedParams::Gaussian(p) => Ok(p.mu),
            LinkedParams::StudentT(p) => Ok(p.mu),
            LinkedParams::Dirichlet(p) => {
                let alpha0: f64 = p.alpha.iter().sum();
                Ok(p.alpha.iter().map(|a| a / alpha0).collect())
            }
        }
    }

    /// Covariance matrix of the response distribution.
    ///
    /// For the Student-T head this is nu/(nu-2) times the scale matrix.
    pub fn covariance(&self, raw: &[f64]) -> Result<SquareMatrix> {
        match self.link_apply(raw)? {
            LinkedParams::Gaussian(p) => Ok(p.cov.compose()),
            LinkedParams::StudentT(p) => {
                let factor = p.nu / (p.nu - 2.0);
                let mut sigma = compose_cov_cholesky(&p.chol);
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        sigma.set(i, j, factor * sigma.get(i, j));
                    }
                }
                Ok(sigma)
            }
            LinkedParams::Dirichlet(_) => {
                Err(Error::Unsupported("covariance of a dirichlet head"))
            }
        }
    }

    /// Names for the raw parameter slots, in layout order. Used as CSV
    /// headers for raw prediction and true-parameter tables.
    pub fn param_names(&self) -> Vec<String> {
        let d = self.dim;
        let mut names: Vec<String> = (1..=d).map(|i| format!("mu{i}")).collect();
        match self.family {
            Family::GaussianCholesky | Family::StudentTCholesky => {
                names.extend((1..=d).map(|i| format!("log_l_{i}_{i}")));
                for i in 2..=d {
                    for j in 1..i {
                        names.push(format!("l_{i}_{j}"));
                    }
                }
                if self.family == Family::StudentTCholesky {
                    names.push("log_nu_minus_2".to_string());
                }
            }
            Family::GaussianLowRank => {
                let r = self.rank.expect("low-rank spec carries a rank");
                names.extend((1..=d).map(|i| format!("log_k_{i}")));
                for i in 1..=d {
                    for j in 1..=r {
                        names.push(format!("v_{i}_{j}"));
                    }
                }
            }
            Family::Dirichlet => {
                names = (1..=d).map(|i| format!("log_alpha_{i}")).collect();
            }
        }
        names
    }

    /// Draws n observations. Deterministic for a fixed seed.
    pub fn sample(&self, raw: &[f64], n: usize, seed: u64) -> Result<Array2<f64>> {
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((n, d));
        match self.link_apply(raw)? {
            LinkedParams::Gaussian(p) => {
                let chol = p.cov.factor()?;
                for mut row in out.rows_mut() {
                    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let x = mul_lower(&chol, &z);
                    for i in 0..d {
                        row[i] = p.mu[i] + x[i];
                    }
                }
            }
            LinkedParams::StudentT(p) => {
                let chi = ChiSquared::new(p.nu).expect("nu is always above 2");
                for mut row in out.rows_mut() {
                    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let w: f64 = chi.sample(&mut rng);
                    let scale = (p.nu / w).sqrt();
                    let x = mul_lower(&p.chol, &z);
                    for i in 0..d {
                        row[i] = p.mu[i] + scale * x[i];
                    }
                }
            }
            LinkedParams::Dirichlet(p) => {
                let gammas: Vec<Gamma<f64>> = p
                    .alpha
                    .iter()
                    .map(|&a| Gamma::new(a, 1.0).expect("concentrations are positive"))
                    .collect();
                for mut row in out.rows_mut() {
                    let mut total = 0.0;
                    for i in 0..d {
                        let g = gammas[i].sample(&mut rng);
                        row[i] = g;
                        total += g;
                    }
                    for i in 0..d {
                        row[i] /= total;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Linked (post-link) parameters of a head.
#[derive(Debug, Clone)]
pub enum LinkedParams {
    Gaussian(GaussianParams),
    StudentT(StudentTParams),
    Dirichlet(DirichletParams),
}

/// Mean vector and covariance factor of a Gaussian head.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub cov: CovarianceFactor,
}

/// Covariance in factored form, either a Cholesky factor or a positive
/// diagonal plus a row-major D x rank loading matrix.
#[derive(Debug, Clone)]
pub enum CovarianceFactor {
    Cholesky(LowerTriangular),
    LowRank {
        kdiag: Vec<f64>,
        v: Vec<f64>,
        rank: usize,
    },
}

impl CovarianceFactor {
    /// Composes the full covariance matrix.
    pub fn compose(&self) -> SquareMatrix {
        match self {
            CovarianceFactor::Cholesky(l) => compose_cov_cholesky(l),
            CovarianceFactor::LowRank { kdiag, v, rank } => {
                compose_cov_lowrank(kdiag, v, *rank)
            }
        }
    }

    /// A Cholesky factor of the composed covariance.
    pub fn factor(&self) -> Result<LowerTriangular> {
        match self {
            CovarianceFactor::Cholesky(l) => Ok(l.clone()),
            CovarianceFactor::LowRank { .. } => cholesky_factorize(&self.compose()),
        }
    }
}

/// Location, scale factor and tail parameter of a Student-T head.
#[derive(Debug, Clone)]
pub struct StudentTParams {
    pub mu: Vec<f64>,
    pub chol: LowerTriangular,
    pub nu: f64,
}

/// Concentrations of a Dirichlet head.
#[derive(Debug, Clone)]
pub struct DirichletParams {
    pub alpha: Vec<f64>,
}

/// Nudges a compositional response away from exact zeros:
/// y' = (y + 1e-6) / sum(y + 1e-6). Never applied silently; zero components
/// are otherwise rejected by the likelihood.
pub fn adjust_shares(y: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-6;
    let total: f64 = y.iter().map(|v| v + EPS).sum();
    y.iter().map(|v| (v + EPS) / total).collect()
}

/// NLL over any scalar type, so plain evaluation and dual-number sweeps share
/// one implementation.
pub(crate) fn nll_generic<T: Real>(spec: &DistributionSpec, raw: &[T], y: &[f64]) -> Result<T> {
    let d = spec.dim;
    debug_assert_eq!(raw.len(), spec.param_count());
    debug_assert_eq!(y.len(), d);
    match spec.family {
        Family::GaussianCholesky => {
            let (diag, resid) = cholesky_blocks(d, raw, y)?;
            let z = linalg::solve_lower_generic(d, &diag, &raw[2 * d..], &resid);
            gaussian_core(d, &raw[d..2 * d], &z)
        }
        Family::GaussianLowRank => {
            let rank = spec.rank.expect("rank checked at construction");
            let mut kdiag = Vec::with_capacity(d);
            for i in 0..d {
                kdiag.push(checked_exp(raw[d + i], "noise diagonal", i)?);
            }
            let v = &raw[2 * d..];
            // Assemble Sigma = diag(k) + V V^T in full storage and factorize.
            // Woodbury-style updates would be faster for large D but the
            // dimensions here stay small.
            let zero = T::from_f64(0.0);
            let mut full = vec![zero; d * d];
            for i in 0..d {
                for j in 0..=i {
                    let mut s = zero;
                    for k in 0..rank {
                        s = s + v[i * rank + k] * v[j * rank + k];
                    }
                    if i == j {
                        s = s + kdiag[i];
                    }
                    full[i * d + j] = s;
                    full[j * d + i] = s;
                }
            }
            let (ldiag, loff) = linalg::cholesky_generic(d, &full)?;
            let resid: Vec<T> = (0..d).map(|i| T::from_f64(y[i]) - raw[i]).collect();
            let z = linalg::solve_lower_generic(d, &ldiag, &loff, &resid);
            let mut out = T::from_f64(0.5 * d as f64 * LOG_2PI);
            for l in &ldiag {
                out = out + l.ln();
            }
            let mut q = zero;
            for zi in &z {
                q = q + *zi * *zi;
            }
            Ok(out + T::from_f64(0.5) * q)
        }
        Family::StudentTCholesky => {
            let off_end = 2 * d + d * (d - 1) / 2;
            let (diag, resid) = cholesky_blocks(d, raw, y)?;
            let z = linalg::solve_lower_generic(d, &diag, &raw[2 * d..off_end], &resid);
            let mut q = T::from_f64(0.0);
            for zi in &z {
                q = q + *zi * *zi;
            }
            let nu = T::from_f64(2.0) + checked_exp(raw[off_end], "degrees of freedom", 0)?;
            let half = T::from_f64(0.5);
            let a = half * (nu + T::from_f64(d as f64));
            // The factor diagonal is exp-linked, so its log-sum is the sum of
            // the raw entries.
            let mut lndet_half = T::from_f64(0.0);
            for i in 0..d {
                lndet_half = lndet_half + raw[d + i];
            }
            let one = T::from_f64(1.0);
            Ok((half * nu).ln_gamma() - a.ln_gamma()
                + T::from_f64(0.5 * d as f64) * (T::from_f64(PI) * nu).ln()
                + lndet_half
                + a * (one + q / nu).ln())
        }
        Family::Dirichlet => {
            validate_simplex(y)?;
            let zero = T::from_f64(0.0);
            let mut alpha0 = zero;
            let mut out = zero;
            for (i, &yi) in y.iter().enumerate() {
                let a = checked_exp(raw[i], "concentration", i)?;
                alpha0 = alpha0 + a;
                out = out + a.ln_gamma() - (a - T::from_f64(1.0)) * T::from_f64(yi.ln());
            }
            Ok(out - alpha0.ln_gamma())
        }
    }
}

/// Shared Gaussian NLL tail: (D/2) log 2pi + sum(log l_ii) + q/2, where the
/// log-diagonal is the raw (exp-linked) block itself.
fn gaussian_core<T: Real>(d: usize, raw_diag: &[T], z: &[T]) -> Result<T> {
    let mut out = T::from_f64(0.5 * d as f64 * LOG_2PI);
    for r in raw_diag {
        out = out + *r;
    }
    let mut q = T::from_f64(0.0);
    for zi in z {
        q = q + *zi * *zi;
    }
    Ok(out + T::from_f64(0.5) * q)
}

/// Exp-links the factor diagonal and forms the residual y - mu.
fn cholesky_blocks<T: Real>(d: usize, raw: &[T], y: &[f64]) -> Result<(Vec<T>, Vec<T>)> {
    let mut diag = Vec::with_capacity(d);
    for i in 0..d {
        diag.push(checked_exp(raw[d + i], "factor diagonal", i)?);
    }
    let resid: Vec<T> = (0..d).map(|i| T::from_f64(y[i]) - raw[i]).collect();
    Ok((diag, resid))
}

fn checked_exp<T: Real>(x: T, what: &str, index: usize) -> Result<T> {
    let out = x.exp();
    let value = out.value();
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::NonFinite(format!(
            "{what} {index}: exp link left the positive range (raw predictor {})",
            x.value()
        )));
    }
    Ok(out)
}

pub(crate) fn validate_simplex(y: &[f64]) -> Result<()> {
    for (i, &v) in y.iter().enumerate() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidResponse(format!(
                "component {i} is {v}, but shares must lie strictly inside (0, 1)"
            )));
        }
    }
    let total: f64 = y.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidResponse(format!(
            "shares sum to {total}, expected 1 within 1e-6"
        )));
    }
    Ok(())
}

fn split_cholesky(d: usize, raw: &[f64]) -> Result<(Vec<f64>, LowerTriangular)> {
    let mu = raw[..d].to_vec();
    let mut diag = Vec::with_capacity(d);
    for i in 0..d {
        diag.push(checked_exp(raw[d + i], "factor diagonal", i)?.value());
    }
    let offdiag = raw[2 * d..2 * d + d * (d - 1) / 2].to_vec();
    Ok((mu, LowerTriangular::new(diag, offdiag)))
}

/// x = L z for a lower-triangular factor.
fn mul_lower(l: &LowerTriangular, z: &[f64]) -> Vec<f64> {
    let d = l.dim();
    (0..d)
        .map(|i| (0..=i).map(|j| l.get(i, j) * z[j]).sum())
        .collect()
}
