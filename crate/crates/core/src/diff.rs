//! Derivative engine: per-observation gradients and diagonal Hessians of the
//! NLL with respect to the raw predictors.
//!
//! The engine runs the generic likelihood once per parameter with a
//! second-order forward-mode dual number seeded in that parameter's
//! direction. No derivative formulas are written by hand; the likelihood
//! code in `distributions` is the single source of truth, and a central
//! finite-difference oracle (`fd_check`) verifies the propagation rules.
//!
//! Hessian entries are clipped from below at [`HESS_FLOOR`] so the Newton
//! steps taken by the tree learner stay bounded in flat or locally concave
//! directions.

use ndarray::Array2;
use rayon::prelude::*;

use crate::distributions::special::{digamma, trigamma};
use crate::distributions::{nll_generic, DistributionSpec};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower bound applied to every Hessian entry.
pub const HESS_FLOOR: f64 = 1e-6;

/// Second-order scalar dual number: value, first and second derivative with
/// respect to a single seed direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual2 {
    pub v: f64,
    pub d: f64,
    pub h: f64,
}

impl Dual2 {
    /// A constant: zero derivative payload.
    pub fn constant(v: f64) -> Self {
        Dual2 { v, d: 0.0, h: 0.0 }
    }

    /// The seeded variable: unit first derivative.
    pub fn variable(v: f64) -> Self {
        Dual2 { v, d: 1.0, h: 0.0 }
    }

    fn recip(self) -> Self {
        let inv = 1.0 / self.v;
        let inv2 = inv * inv;
        Dual2 {
            v: inv,
            d: -self.d * inv2,
            h: (2.0 * self.d * self.d * inv - self.h) * inv2,
        }
    }
}

impl std::ops::Add for Dual2 {
    type Output = Dual2;
    fn add(self, rhs: Dual2) -> Dual2 {
        Dual2 {
            v: self.v + rhs.v,
            d: self.d + rhs.d,
            h: self.h + rhs.h,
        }
    }
}

impl std::ops::Sub for Dual2 {
    type Output = Dual2;
    fn sub(self, rhs: Dual2) -> Dual2 {
        Dual2 {
            v: self.v - rhs.v,
            d: self.d - rhs.d,
            h: self.h - rhs.h,
        }
    }
}

impl std::ops::Mul for Dual2 {
    type Output = Dual2;
    fn mul(self, rhs: Dual2) -> Dual2 {
        Dual2 {
            v: self.v * rhs.v,
            d: self.v * rhs.d + self.d * rhs.v,
            h: self.v * rhs.h + 2.0 * self.d * rhs.d + self.h * rhs.v,
        }
    }
}

impl std::ops::Div for Dual2 {
    type Output = Dual2;
    fn div(self, rhs: Dual2) -> Dual2 {
        self * rhs.recip()
    }
}

impl std::ops::Neg for Dual2 {
    type Output = Dual2;
    fn neg(self) -> Dual2 {
        Dual2 {
            v: -self.v,
            d: -self.d,
            h: -self.h,
        }
    }
}

impl Real for Dual2 {
    fn from_f64(x: f64) -> Self {
        Dual2::constant(x)
    }

    fn value(self) -> f64 {
        self.v
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual2 {
            v: e,
            d: e * self.d,
            h: e * (self.h + self.d * self.d),
        }
    }

    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        Dual2 {
            v: self.v.ln(),
            d: self.d * inv,
            h: (self.h - self.d * self.d * inv) * inv,
        }
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let half_inv = 0.5 / s;
        Dual2 {
            v: s,
            d: self.d * half_inv,
            h: self.h * half_inv - self.d * self.d * 0.25 / (s * self.v),
        }
    }

    fn ln_gamma(self) -> Self {
        let psi = digamma(self.v);
        Dual2 {
            v: crate::distributions::special::ln_gamma(self.v),
            d: psi * self.d,
            h: trigamma(self.v) * self.d * self.d + psi * self.h,
        }
    }
}

/// Gradients and floored Hessian diagonals for a batch of observations,
/// both N x K.
#[derive(Debug, Clone)]
pub struct GradHessBatch {
    pub grad: Array2<f64>,
    pub hess: Array2<f64>,
}

/// Gradient and floored diagonal Hessian of the NLL at one observation.
pub fn grad_hess(spec: &DistributionSpec, raw: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (grad, mut hess) = grad_hess_unfloored(spec, raw, y)?;
    for h in hess.iter_mut() {
        *h = h.max(HESS_FLOOR);
    }
    Ok((grad, hess))
}

/// Same as [`grad_hess`] but without the floor; used by the verification
/// oracle to tell genuinely flat directions apart from clipped ones.
fn grad_hess_unfloored(
    spec: &DistributionSpec,
    raw: &[f64],
    y: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = spec.param_count();
    assert_eq!(raw.len(), k, "raw predictor length must equal the parameter count");
    let mut grad = Vec::with_capacity(k);
    let mut hess = Vec::with_capacity(k);
    let mut duals: Vec<Dual2> = raw.iter().map(|&v| Dual2::constant(v)).collect();
    for j in 0..k {
        duals[j] = Dual2::variable(raw[j]);
        let out = nll_generic(spec, &duals, y)?;
        duals[j] = Dual2::constant(raw[j]);
        if !out.d.is_finite() || !out.h.is_finite() {
            return Err(Error::NonFinite(format!(
                "derivative of the loss with respect to predictor {j}"
            )));
        }
        grad.push(out.d);
        hess.push(out.h);
    }
    Ok((grad, hess))
}

/// Row-parallel [`grad_hess`] over an N x K predictor matrix and an N x D
/// response matrix. Rows are independent, so the result does not depend on
/// the thread count.
pub fn grad_hess_batch(
    spec: &DistributionSpec,
    raw: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<GradHessBatch> {
    let n = raw.nrows();
    let k = spec.param_count();
    assert_eq!(raw.ncols(), k, "predictor matrix must be N x K");
    assert_eq!(y.nrows(), n, "response matrix must have one row per observation");
    assert_eq!(y.ncols(), spec.dim(), "response matrix must be N x D");

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            grad_hess(
                spec,
                raw.row(i).as_slice().expect("row-major layout"),
                y.row(i).as_slice().expect("row-major layout"),
            )
        })
        .collect::<Result<_>>()?;

    let mut grad = Array2::zeros((n, k));
    let mut hess = Array2::zeros((n, k));
    for (i, (g, h)) in rows.into_iter().enumerate() {
        for j in 0..k {
            grad[(i, j)] = g[j];
            hess[(i, j)] = h[j];
        }
    }
    Ok(GradHessBatch { grad, hess })
}

/// Report produced by [`fd_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative gradient error over all parameters, with denominator
    /// max(|exact|, 1).
    pub max_grad_rel_err: f64,
    /// Largest relative Hessian-diagonal error over parameters whose
    /// curvature is trustworthy: not floored, and with a finite-difference
    /// magnitude above 10 times the floor.
    pub max_hess_rel_err: f64,
    /// Parameter indices where the floor replaced the raw second derivative.
    pub floored: Vec<usize>,
}

/// Verifies [`grad_hess`] against central finite differences with the given
/// step, returning the worst relative errors.
pub fn fd_check(spec: &DistributionSpec, raw: &[f64], y: &[f64], step: f64) -> Result<FdReport> {
    assert!(
        (1e-7..=1e-2).contains(&step),
        "finite-difference step must lie in [1e-7, 1e-2]"
    );
    let (grad, hess_raw) = grad_hess_unfloored(spec, raw, y)?;
    let base = spec.nll(raw, y)?;
    let mut bumped = raw.to_vec();
    let mut max_grad_rel_err: f64 = 0.0;
    let mut max_hess_rel_err: f64 = 0.0;
    let mut floored = Vec::new();
    for j in 0..raw.len() {
        bumped[j] = raw[j] + step;
        let up = spec.nll(&bumped, y)?;
        bumped[j] = raw[j] - step;
        let down = spec.nll(&bumped, y)?;
        bumped[j] = raw[j];

        let fd_grad = (up - down) / (2.0 * step);
        let fd_hess = (up - 2.0 * base + down) / (step * step);
        max_grad_rel_err =
            max_grad_rel_err.max((fd_grad - grad[j]).abs() / grad[j].abs().max(1.0));
        if hess_raw[j] < HESS_FLOOR {
            floored.push(j);
        } else if fd_hess.abs() > 10.0 * HESS_FLOOR {
            max_hess_rel_err =
                max_hess_rel_err.max((fd_hess - hess_raw[j]).abs() / hess_raw[j].abs().max(1.0));
        }
    }
    Ok(FdReport {
        max_grad_rel_err,
        max_hess_rel_err,
        floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Family;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(family: Family, dim: usize, rank: Option<usize>) -> DistributionSpec {
        DistributionSpec::new(family, dim, rank).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn random_response(family: Family, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match family {
            Family::Dirichlet => {
                let parts: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = parts.iter().sum();
                parts.into_iter().map(|p| p / total).collect()
            }
            _ => random_vec(rng, dim, -2.0, 2.0),
        }
    }

    #[test]
    fn univariate_normal_score_at_unit_residual() {
        let s = spec(Family::GaussianCholesky, 1, None);
        let (grad, hess) = grad_hess(&s, &[0.0, 0.0], &[1.0]).unwrap();
        // d nll / d mu = -(y - mu) / sigma^2 = -1; curvature 1 / sigma^2 = 1.
        assert!((grad[0] + 1.0).abs() < 1e-12);
        assert!((hess[0] - 1.0).abs() < 1e-12);
        // The log-scale entry: nll depends on it as eta + q exp(-2 eta) / 2.
        assert!((grad[1] - 0.0).abs() < 1e-12);
        assert!((hess[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hessian_floor_clips_flat_directions() {
        // With y exactly at mu the scale entry has zero curvature.
        let s = spec(Family::GaussianCholesky, 1, None);
        let (grad, hess) = grad_hess(&s, &[0.0, 0.0], &[0.0]).unwrap();
        assert!((grad[1] - 1.0).abs() < 1e-12);
        assert_eq!(hess[1], HESS_FLOOR);
        assert!((hess[0] - 1.0).abs() < 1e-12);

        let report = fd_check(&s, &[0.0, 0.0], &[0.0], 1e-4).unwrap();
        assert_eq!(report.floored, vec![1]);
    }

    #[test]
    fn derivatives_match_central_differences_for_all_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for family in [
            Family::GaussianCholesky,
            Family::GaussianLowRank,
            Family::StudentTCholesky,
            Family::Dirichlet,
        ] {
            for dim in [2usize, 3, 5] {
                let rank = (family == Family::GaussianLowRank).then_some(2);
                let s = spec(family, dim, rank);
                for case in 0..100 {
                    let raw = random_vec(&mut rng, s.param_count(), -1.0, 1.0);
                    let y = random_response(family, dim, &mut rng);
                    // First differences are most accurate near h ~ eps^(1/3),
                    // second differences near h ~ eps^(1/4), so each claim is
                    // checked at its own step.
                    let report = fd_check(&s, &raw, &y, 1e-5).unwrap();
                    assert!(
                        report.max_grad_rel_err < 1e-4,
                        "{family} dim {dim} case {case}: grad err {}",
                        report.max_grad_rel_err
                    );
                    let report = fd_check(&s, &raw, &y, 1e-4).unwrap();
                    assert!(
                        report.max_hess_rel_err < 1e-3,
                        "{family} dim {dim} case {case}: hess err {}",
                        report.max_hess_rel_err
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_matches_directional_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for family in [
            Family::GaussianCholesky,
            Family::GaussianLowRank,
            Family::StudentTCholesky,
            Family::Dirichlet,
        ] {
            let dim = 3;
            let rank = (family == Family::GaussianLowRank).then_some(2);
            let s = spec(family, dim, rank);
            let raw = random_vec(&mut rng, s.param_count(), -0.8, 0.8);
            let y = random_response(family, dim, &mut rng);
            let (grad, _) = grad_hess(&s, &raw, &y).unwrap();
            let h = 1e-5;
            for _ in 0..20 {
                let dir = random_vec(&mut rng, raw.len(), -1.0, 1.0);
                let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
                let up: Vec<f64> = raw.iter().zip(&dir).map(|(r, u)| r + h * u).collect();
                let down: Vec<f64> = raw.iter().zip(&dir).map(|(r, u)| r - h * u).collect();
                let fd = (s.nll(&up, &y).unwrap() - s.nll(&down, &y).unwrap()) / (2.0 * h);
                let analytic: f64 = grad.iter().zip(&dir).map(|(g, u)| g * u).sum();
                assert!(
                    (fd - analytic).abs() / analytic.abs().max(1.0) < 1e-4,
                    "{family}: directional {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn quadratic_mean_direction_is_exact_at_any_step() {
        // For fixed scale entries the Gaussian NLL is quadratic in each mu
        // entry, so the central second difference is exact up to rounding.
        let s = spec(Family::GaussianCholesky, 2, None);
        let raw = [0.3, -0.4, 0.2, -0.1, 0.6];
        let y = [1.0, -0.5];
        let (_, hess) = grad_hess(&s, &raw, &y).unwrap();
        for step in [1e-2, 1e-3] {
            let mut bumped = raw;
            for j in 0..2 {
                bumped[j] = raw[j] + step;
                let up = s.nll(&bumped, &y).unwrap();
                bumped[j] = raw[j] - step;
                let down = s.nll(&bumped, &y).unwrap();
                bumped[j] = raw[j];
                let base = s.nll(&raw, &y).unwrap();
                let fd = (up - 2.0 * base + down) / (step * step);
                assert!(
                    (fd - hess[j]).abs() < 1e-8,
                    "step {step} entry {j}: {fd} vs {}",
                    hess[j]
                );
            }
        }
    }

    #[test]
    fn dirichlet_gradient_vanishes_at_the_maximum_likelihood_point() {
        // Fit the two-component MLE by solving the score equations directly
        // with Newton on (psi(a_d) - psi(a_0) = mean log y_d), then check the
        // engine's per-parameter gradients average to zero there.
        let s = spec(Family::Dirichlet, 2, None);
        let truth = [1.8f64, 4.2];
        let n = 400;
        let sample: Vec<[f64; 2]> = {
            let draws = s.sample(&[truth[0].ln(), truth[1].ln()], n, 31).unwrap();
            (0..n).map(|i| [draws[(i, 0)], draws[(i, 1)]]).collect()
        };
        let mean_log: [f64; 2] = {
            let mut acc = [0.0f64; 2];
            for row in &sample {
                acc[0] += row[0].ln();
                acc[1] += row[1].ln();
            }
            [acc[0] / n as f64, acc[1] / n as f64]
        };

        // Newton iteration on the concentration vector.
        let mut alpha = [1.0f64, 1.0];
        for _ in 0..200 {
            let a0 = alpha[0] + alpha[1];
            let g = [
                digamma(alpha[0]) - digamma(a0) - mean_log[0],
                digamma(alpha[1]) - digamma(a0) - mean_log[1],
            ];
            let q = [trigamma(alpha[0]), trigamma(alpha[1])];
            let z = -trigamma(a0);
            // Invert the 2x2 Hessian [[q0+z, z], [z, q1+z]] exactly.
            let det = (q[0] + z) * (q[1] + z) - z * z;
            let step = [
                ((q[1] + z) * g[0] - z * g[1]) / det,
                (-z * g[0] + (q[0] + z) * g[1]) / det,
            ];
            alpha[0] = (alpha[0] - step[0]).max(1e-8);
            alpha[1] = (alpha[1] - step[1]).max(1e-8);
            if step[0].abs() + step[1].abs() < 1e-13 {
                break;
            }
        }

        let raw = [alpha[0].ln(), alpha[1].ln()];
        let mut mean_grad = [0.0f64; 2];
        for row in &sample {
            let (g, _) = grad_hess(&s, &raw, row).unwrap();
            mean_grad[0] += g[0];
            mean_grad[1] += g[1];
        }
        mean_grad[0] /= n as f64;
        mean_grad[1] /= n as f64;
        assert!(
            mean_grad[0].abs() < 1e-6 && mean_grad[1].abs() < 1e-6,
            "score at MLE: {mean_grad:?}, alpha {alpha:?}"
        );
    }

    #[test]
    fn batch_matches_single_rows_and_respects_the_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let s = spec(Family::StudentTCholesky, 3, None);
        let n = 64;
        let k = s.param_count();
        let mut raw = Array2::zeros((n, k));
        let mut y = Array2::zeros((n, 3));
        for i in 0..n {
            for j in 0..k {
                raw[(i, j)] = rng.random_range(-0.9..0.9);
            }
            for j in 0..3 {
                y[(i, j)] = rng.random_range(-2.0..2.0);
            }
        }
        let batch = grad_hess_batch(&s, &raw, &y).unwrap();
        assert!(batch.grad.iter().all(|v| v.is_finite()));
        assert!(batch.hess.iter().all(|v| v.is_finite() && *v >= HESS_FLOOR));
        for i in 0..n {
            let (g, h) = grad_hess(
                &s,
                raw.row(i).as_slice().unwrap(),
                y.row(i).as_slice().unwrap(),
            )
            .unwrap();
            for j in 0..k {
                assert_eq!(batch.grad[(i, j)], g[j]);
                assert_eq!(batch.hess[(i, j)], h[j]);
            }
        }
        // Determinism across repeated parallel runs.
        let again = grad_hess_batch(&s, &raw, &y).unwrap();
        assert_eq!(batch.grad, again.grad);
        assert_eq!(batch.hess, again.hess);
    }

    #[test]
    fn overflowing_predictors_surface_as_errors() {
        let s = spec(Family::GaussianCholesky, 1, None);
        assert!(matches!(
            grad_hess(&s, &[0.0, 800.0], &[1.0]),
            Err(Error::NonFinite(_))
        ));
    }
}
