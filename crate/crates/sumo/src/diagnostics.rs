//! Spectral traces of the optimizer moment and the Newton-Schulz error check.

use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, condition_number_gram, newton_schulz_error_bound, newton_schulz_orthogonalize,
    orthogonalize_svd, rank_one_relative_error, Matrix, NewtonSchulzVariant,
};
use crate::optimizer::{LayerState, StepReport};

/// Append-only per-step diagnostics. All columns have equal length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectralTrace {
    pub steps: Vec<u64>,
    pub kappa_m: Vec<f64>,
    pub condition_numbers: Vec<f64>,
    pub ns_errors: Vec<Option<f64>>,
    pub ns_bounds: Vec<Option<f64>>,
    pub losses: Vec<f64>,
    pub loss_finite: Vec<bool>,
    pub grad_norms: Vec<f64>,
    /// When set, every recorded moment is also run through this variant and
    /// compared with √r·(1 − 1/κ)^(2^i).
    pub ns_probe: Option<NewtonSchulzVariant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
    pub points: usize,
    pub excluded_zeros: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsErrorReport {
    pub measured: f64,
    pub bound: f64,
    pub kappa: f64,
    /// Index of the last strict gap in the Gram spectrum.
    pub rank: usize,
}

impl SpectralTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ns_probe(variant: NewtonSchulzVariant) -> Self {
        Self {
            ns_probe: Some(variant),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends one row for `state` after a step. A zero or missing moment is
    /// recorded as κ_M = 0 and condition number +∞.
    pub fn record_step(&mut self, state: &LayerState, report: &StepReport, loss: f64) -> Result<()> {
        if let Some(&last) = self.steps.last() {
            if state.step <= last {
                return Err(Error::InvalidArgument(format!(
                    "trace steps must increase: {} after {last}",
                    state.step
                )));
            }
        }
        let moment = state.moment.as_ref().filter(|m| m.norm() > 0.0);
        let (kappa_m, cond, ns) = match moment {
            None => (0.0, f64::INFINITY, None),
            Some(m) => {
                let ns = match self.ns_probe {
                    Some(v) => Some(ns_error_vs_bound(m, v)?),
                    None => None,
                };
                (rank_one_relative_error(m)?, condition_number_gram(m)?, ns)
            }
        };
        self.steps.push(state.step);
        self.kappa_m.push(kappa_m);
        self.condition_numbers.push(cond);
        self.ns_errors.push(ns.map(|r| r.measured));
        self.ns_bounds.push(ns.map(|r| r.bound));
        self.losses.push(loss);
        self.loss_finite.push(loss.is_finite());
        self.grad_norms.push(report.grad_norm);
        Ok(())
    }
}

/// Ordinary least squares of ln κ_M against step over `window`.
///
/// Rows with κ_M = 0 are skipped and counted in `excluded_zeros`. A flat
/// series yields slope 0 and R² 0.
pub fn fit_exponential_decay(trace: &SpectralTrace, window: RangeInclusive<u64>) -> Result<DecayFit> {
    let mut excluded = 0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &k) in trace.steps.iter().zip(&trace.kappa_m) {
        if !window.contains(&t) {
            continue;
        }
        if k <= 0.0 {
            excluded += 1;
            continue;
        }
        xs.push(t as f64);
        ys.push(k.ln());
    }
    if xs.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "{} usable points in window {:?} ({excluded} zeros excluded), need 10",
            xs.len(),
            window
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let flat = ys.iter().all(|&y| y == ys[0]);
    let (slope, r_squared) = if flat || syy == 0.0 {
        (0.0, 0.0)
    } else {
        let slope = sxy / sxx;
        let ss_res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - (my + slope * (x - mx))).powi(2))
            .sum();
        (slope, (1.0 - ss_res / syy).clamp(0.0, 1.0))
    };
    Ok(DecayFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        window: (*window.start(), *window.end()),
        points: xs.len(),
        excluded_zeros: excluded,
    })
}

/// The r of the error bound: largest j with λ_j > λ_{j+1} in the Gram
/// spectrum of `m` (relative tolerance 1e-9), at least 1.
pub fn gap_rank(m: &Matrix) -> Result<usize> {
    let s = linalg::svd(m)?.singular_values;
    let lam: Vec<f64> = s.iter().map(|x| x * x).collect();
    let tol = 1e-9 * lam[0];
    let rows = m.nrows().min(lam.len());
    let mut r = 0;
    for j in 0..rows.saturating_sub(1) {
        if lam[j] - lam[j + 1] > tol {
            r = j + 1;
        }
    }
    Ok(r.max(1))
}

/// Measured distance between Newton-Schulz and the SVD polar factor, next to
/// √r·(1 − 1/κ)^(2^i). The bound is only proved for the classic variant.
pub fn ns_error_vs_bound(m: &Matrix, variant: NewtonSchulzVariant) -> Result<NsErrorReport> {
    let approx = newton_schulz_orthogonalize(m, variant)?;
    let exact = orthogonalize_svd(m)?;
    let measured = (approx - exact).norm();
    let kappa = condition_number_gram(m)?;
    let rank = if kappa.is_finite() { gap_rank(m)? } else { m.nrows() };
    let bound = newton_schulz_error_bound(kappa, rank, variant.iterations)?;
    Ok(NsErrorReport {
        measured,
        bound,
        kappa,
        rank,
    })
}

/// An `(r + 1) × cols` matrix whose Gram spectrum is log-spaced from κ down
/// to 1, so the gap rank is exactly `r` (for κ > 1) and the condition number is κ.
pub fn bound_test_matrix<R: Rng + ?Sized>(kappa: f64, r: usize, cols: usize, rng: &mut R) -> Matrix {
    let rows = r + 1;
    let s: Vec<f64> = linalg::logspace(kappa, 1.0, rows).into_iter().map(f64::sqrt).collect();
    linalg::matrix_with_singular_values(rows, cols, &s, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::LayerState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn report() -> StepReport {
        StepReport {
            grad_norm: 1.0,
            projected_grad_norm: 1.0,
            update_norm: 0.0,
            limiter_fired: false,
            subspace_refreshed: false,
            orthogonalization_error_estimate: None,
        }
    }

    fn trace_from(kappas: &[f64]) -> SpectralTrace {
        SpectralTrace {
            steps: (1..=kappas.len() as u64).collect(),
            kappa_m: kappas.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn exact_exponential_fit() {
        let k: Vec<f64> = (1..=40).map(|t| 0.5 * 2f64.powi(-t)).collect();
        let fit = fit_exponential_decay(&trace_from(&k), 1..=40).unwrap();
        assert!((fit.slope + std::f64::consts::LN_2).abs() < 1e-6);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flat_fit_is_zero() {
        let fit = fit_exponential_decay(&trace_from(&[0.3; 20]), 1..=20).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.r_squared, 0.0);
    }

    #[test]
    fn zeros_are_excluded_and_counted() {
        let mut k = vec![0.1; 12];
        k[3] = 0.0;
        let fit = fit_exponential_decay(&trace_from(&k), 1..=12).unwrap();
        assert_eq!(fit.excluded_zeros, 1);
        assert_eq!(fit.points, 11);
        k[4] = 0.0;
        k[5] = 0.0;
        assert!(matches!(
            fit_exponential_decay(&trace_from(&k), 1..=12),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn record_step_rank_one_and_zero() {
        let mut trace = SpectralTrace::new();
        let mut state = LayerState::new(Matrix::zeros(4, 3), 0);
        state.step = 1;
        trace.record_step(&state, &report(), 1.0).unwrap();
        assert_eq!(trace.kappa_m[0], 0.0);
        assert_eq!(trace.condition_numbers[0], f64::INFINITY);

        let u = nalgebra::dvector![1.0, 2.0];
        let v = nalgebra::dvector![1.0, -1.0, 0.5];
        state.moment = Some(u * v.transpose());
        state.step = 2;
        trace.record_step(&state, &report(), f64::NAN).unwrap();
        assert!(trace.kappa_m[1] < 1e-12);
        assert_eq!(trace.loss_finite, vec![true, false]);
        assert!(trace.record_step(&state, &report(), 0.0).is_err());
        assert_eq!(trace.len(), 2);
    }

    #[test]
    fn kappa_100_rank_1_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = bound_test_matrix(100.0, 1, 8, &mut rng);
        let rep = ns_error_vs_bound(&m, NewtonSchulzVariant::classic(5)).unwrap();
        assert_eq!(rep.rank, 1);
        assert!((rep.kappa - 100.0).abs() < 1e-8);
        assert!((rep.bound - 0.99f64.powi(32)).abs() < 1e-9);
        assert!(rep.measured <= rep.bound + 1e-6);
    }

    #[test]
    fn orthogonal_input_has_zero_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = linalg::random_orthonormal(9, 3, &mut rng).transpose();
        let rep = ns_error_vs_bound(&q, NewtonSchulzVariant::classic(5)).unwrap();
        assert!(rep.measured <= 1e-6);
        assert!(rep.bound < 1e-12);
    }

    #[test]
    fn rank_deficient_bound_is_infinite() {
        let mut m = Matrix::zeros(2, 3);
        m[(0, 0)] = 1.0;
        let rep = ns_error_vs_bound(&m, NewtonSchulzVariant::classic(3)).unwrap();
        assert_eq!(rep.bound, f64::INFINITY);
        assert!(rep.measured.is_finite());
    }
}
