//! Random-walk Metropolis–Hastings for the subject parameters, and the
//! burn-in proposal-scale adaptation shared with the translation move.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{predict_subject, sum_sq_residuals, Mat6, Subject, Vec6};
use crate::ode::{IntegratorConfig, SubjectParams};

pub const TARGET_ACCEPTANCE: f64 = 0.25;

/// Optimal random-walk multiplier for a `d`-dimensional Gaussian target.
fn optimal_multiplier(d: usize) -> f64 {
    2.38 / (d as f64).sqrt()
}

/// Correlated random-walk proposal `exp(log_mult) · L z`, tuned during burn-in.
///
/// After each window of updates the log multiplier moves toward the target
/// acceptance with a gain decaying as `1/√window`. At windows 2, 4, 8, …
/// the shape `L` is reset to the Cholesky factor of the covariance of the
/// states visited since the previous reset (falling back to its diagonal
/// when that covariance is singular).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleAdapter<const N: usize> {
    log_mult: f64,
    shape: SMatrix<f64, N, N>,
    accepts: usize,
    tries: usize,
    windows: usize,
    n: usize,
    mean: SVector<f64, N>,
    m2: SMatrix<f64, N, N>,
}

impl<const N: usize> ScaleAdapter<N> {
    pub fn new(initial: f64) -> Self {
        Self {
            log_mult: 0.0,
            shape: SMatrix::from_diagonal_element(initial),
            accepts: 0,
            tries: 0,
            windows: 0,
            n: 0,
            mean: SVector::zeros(),
            m2: SMatrix::zeros(),
        }
    }

    /// Lower-triangular factor of the proposal covariance.
    pub fn factor(&self) -> SMatrix<f64, N, N> {
        self.shape * self.log_mult.exp()
    }

    /// Marginal proposal standard deviations.
    pub fn scale(&self) -> [f64; N] {
        let f = self.factor();
        std::array::from_fn(|k| f.row(k).norm())
    }

    /// Draws a proposal increment.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SVector<f64, N> {
        self.factor() * SVector::<f64, N>::from_fn(|_, _| rng.sample(StandardNormal))
    }

    pub fn record(&mut self, state: &[f64; N], accepted: bool) {
        self.tries += 1;
        self.accepts += usize::from(accepted);
        self.n += 1;
        let x = SVector::<f64, N>::from(*state);
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean).transpose();
    }

    pub fn end_window(&mut self) {
        if self.tries == 0 {
            return;
        }
        self.windows += 1;
        let rate = self.accepts as f64 / self.tries as f64;
        let err = if rate < TARGET_ACCEPTANCE {
            (rate - TARGET_ACCEPTANCE) / TARGET_ACCEPTANCE
        } else {
            (rate - TARGET_ACCEPTANCE) / (1.0 - TARGET_ACCEPTANCE)
        };
        self.log_mult += err / (self.windows as f64).sqrt();
        self.accepts = 0;
        self.tries = 0;

        if self.windows.is_power_of_two() && self.windows >= 2 && self.n > 2 * N {
            if let Some(shape) = empirical_factor(&self.m2, self.n) {
                self.shape = shape;
                self.log_mult = optimal_multiplier(N).ln();
            }
            self.n = 0;
            self.mean = SVector::zeros();
            self.m2 = SMatrix::zeros();
        }
    }
}

fn empirical_factor<const N: usize>(m2: &SMatrix<f64, N, N>, n: usize) -> Option<SMatrix<f64, N, N>> {
    let cov = m2 / (n - 1) as f64;
    let var = cov.diagonal();
    if !var.iter().all(|v| v.is_finite() && *v > 0.0) {
        return None;
    }
    // a small ridge keeps the factor well conditioned for near-degenerate walks
    let ridged = cov + SMatrix::from_diagonal(&(var * 1e-6));
    match ridged.cholesky() {
        Some(c) => Some(c.l()),
        None => Some(SMatrix::from_diagonal(&var.map(f64::sqrt))),
    }
}

/// Current subject parameters with their cached fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectState {
    pub theta: SubjectParams,
    pub fitted: Vec<f64>,
    pub ssr: f64,
}

impl SubjectState {
    pub fn new(theta: SubjectParams, subject: &Subject, cfg: &IntegratorConfig) -> Result<Self, crate::ode::OdeError> {
        let fitted = predict_subject(&theta, subject, cfg)?;
        let ssr = sum_sq_residuals(&subject.log10_vl, &fitted);
        Ok(Self { theta, fitted, ssr })
    }
}

pub(crate) fn prior_quad(theta: &[f64; 6], prior_mean: &[f64; 6], sigma_inv: &Mat6) -> f64 {
    let b = Vec6::from(*theta) - Vec6::from(*prior_mean);
    (b.transpose() * sigma_inv * b)[(0, 0)]
}

/// One joint random-walk update of `θ_i` with increment `factor · z`, targeting
/// `L_i(θ_i) · N(θ_i; W_iμ, Σ)`. A failed solve rejects the proposal.
#[allow(clippy::too_many_arguments)]
pub fn mh_update_subject<R: Rng + ?Sized>(
    state: &mut SubjectState,
    subject: &Subject,
    prior_mean: &[f64; 6],
    sigma_inv: &Mat6,
    sigma_inv_sq: f64,
    factor: &Mat6,
    cfg: &IntegratorConfig,
    rng: &mut R,
) -> bool {
    let current = state.theta.to_array();
    let step = factor * Vec6::from_fn(|_, _| rng.sample(StandardNormal));
    let proposal: [f64; 6] = std::array::from_fn(|k| current[k] + step[k]);
    if proposal == current {
        return true;
    }
    let theta = SubjectParams::from_array(proposal);
    let Ok(fitted) = predict_subject(&theta, subject, cfg) else {
        return false;
    };
    let ssr = sum_sq_residuals(&subject.log10_vl, &fitted);
    let log_ratio = -0.5 * sigma_inv_sq * (ssr - state.ssr)
        - 0.5 * (prior_quad(&proposal, prior_mean, sigma_inv) - prior_quad(&current, prior_mean, sigma_inv));
    let u: f64 = rng.random();
    if log_ratio.is_finite() && u.ln() < log_ratio {
        *state = SubjectState { theta, fitted, ssr };
        true
    } else {
        false
    }
}
