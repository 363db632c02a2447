//! Three-level Bayesian nonlinear mixed-effects model and its MCMC sampler.
//!
//! ```text
//! y_ij | θ_i, σ²  ~ N(f_ij(θ_i), σ²)          within subject
//! θ_i  | μ, Σ     ~ N(W_i μ, Σ)               between subjects
//! μ ~ N(η, Λ),  σ⁻² ~ Ga(a, b),  Σ⁻¹ ~ Wi(Ω, ν)
//! ```
//!
//! `Ga(a, b)` is shape–rate (mean `a/b`) and `Wi(Ω, ν)` has mean `νΩ`.
//! `W_i = (I₆, J₁ᵢ, J₂ᵢ)` appends the covariate effects to the sixth
//! coordinate, so `log φ_i = β₀ + β₁w₁ᵢ + β₂w₂ᵢ + b_i6`.

mod chain;
mod gibbs;
mod init;
mod mh;
mod rng;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::efficacy::{CovariatePair, EfficacyModel};
use crate::ode::{predict_log10_vl, IntegratorConfig, OdeError, SubjectParams};

pub use chain::{run_chain, ChainOutput, Sample};
pub use gibbs::{
    big_sigma_conditional, gibbs_big_sigma, gibbs_mu, gibbs_sigma, mu_conditional, sample_wishart,
    sigma_conditional, MuConditional,
};
pub use init::fit_subject;
pub use rng::derive_seed;
pub use mh::{mh_update_subject, ScaleAdapter, SubjectState, TARGET_ACCEPTANCE};

pub type Vec6 = SVector<f64, 6>;
pub type Vec8 = SVector<f64, 8>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Design = SMatrix<f64, 6, 8>;

pub const MU_NAMES: [&str; 8] = ["log_c", "log_delta", "log_dT", "log_rho", "log_R", "beta0", "beta1", "beta2"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("invalid hyperpriors: {0}")]
    Hyper(String),
    #[error("invalid MCMC configuration: {0}")]
    Config(String),
    #[error("invalid observations: {0}")]
    Data(String),
    #[error("{what} is not positive definite ({detail})")]
    NotPositiveDefinite { what: &'static str, detail: String },
    #[error("chain aborted at sweep {sweep}: {message}; state: {snapshot}")]
    Aborted { sweep: usize, message: String, snapshot: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperpriors {
    pub a: f64,
    pub b: f64,
    pub eta: Vec8,
    pub lambda: Mat8,
    pub omega: Mat6,
    pub nu: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Self {
            a: 4.5,
            b: 9.0,
            eta: Vec8::from([1.1, -1.0, -2.5, 1.2, 1.0, 1.0, 0.5, 0.5]),
            lambda: Mat8::from_diagonal_element(100.0),
            omega: Mat6::from_diagonal_element(2.5),
            nu: 10.0,
        }
    }
}

impl Hyperpriors {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(SamplerError::Hyper(format!("a = {}, b = {} must be positive", self.a, self.b)));
        }
        if !(self.nu > 5.0) || !self.nu.is_finite() {
            return Err(SamplerError::Hyper(format!("nu = {} must exceed 5", self.nu)));
        }
        if self.eta.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::Hyper("eta must be finite".into()));
        }
        spd_check(&self.lambda, "Lambda")?;
        spd_check(&self.omega, "Omega")?;
        Ok(())
    }
}

fn spd_check<const D: usize>(m: &SMatrix<f64, D, D>, what: &'static str) -> Result<(), SamplerError> {
    let sym = (m - m.transpose()).abs().max() <= 1e-12 * m.abs().max().max(1.0);
    if sym && m.iter().all(|v| v.is_finite()) && m.cholesky().is_some() {
        Ok(())
    } else {
        Err(SamplerError::NotPositiveDefinite { what, detail: format!("{m:?}") })
    }
}

/// `W_i = (I₆, J₁ᵢ, J₂ᵢ)`.
pub fn design_matrix(w: CovariatePair) -> Design {
    let mut d = Design::zeros();
    for k in 0..6 {
        d[(k, k)] = 1.0;
    }
    d[(5, 6)] = w.w1;
    d[(5, 7)] = w.w2;
    d
}

/// `W_i μ`: the first five population means, then `β₀ + β₁w₁ + β₂w₂`.
pub fn individual_mean(mu: &Vec8, w: CovariatePair) -> [f64; 6] {
    [mu[0], mu[1], mu[2], mu[3], mu[4], mu[5] + mu[6] * w.w1 + mu[7] * w.w2]
}

/// One subject's viral-load record and efficacy inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Days, nondecreasing.
    pub times: Vec<f64>,
    /// log₁₀ copies/ml.
    pub log10_vl: Vec<f64>,
    pub efficacy: EfficacyModel,
}

impl Subject {
    /// Covariates entering `W_i`; the control model has none.
    pub fn covariates(&self) -> CovariatePair {
        match &self.efficacy {
            EfficacyModel::Full(inputs) => inputs.covariates,
            EfficacyModel::Control => CovariatePair::default(),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| SamplerError::Data(format!("subject {}: {m}", self.id));
        if self.times.len() != self.log10_vl.len() {
            return Err(bad("times and values differ in length".into()));
        }
        if self.times.iter().chain(&self.log10_vl).any(|v| !v.is_finite()) {
            return Err(bad("non-finite time or value".into()));
        }
        if self.times.first().is_some_and(|&t| t < 0.0) || self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(bad("times must be nonnegative and nondecreasing".into()));
        }
        if let (EfficacyModel::Full(inputs), Some(&last)) = (&self.efficacy, self.times.last()) {
            let (lo, hi) = inputs.span();
            if self.times[0] < lo || last > hi {
                return Err(bad(format!("observation times fall outside the adherence span [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// All subjects of one fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    pub subjects: Vec<Subject>,
}

impl ObservationSet {
    pub fn validate(&self) -> Result<(), SamplerError> {
        self.subjects.iter().try_for_each(Subject::validate)
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(Subject::n_obs).sum()
    }
}

/// `f_i(θ_i)` at the subject's observation times. No solve is needed for a
/// subject without observations.
pub fn predict_subject(theta: &SubjectParams, subject: &Subject, cfg: &IntegratorConfig) -> Result<Vec<f64>, OdeError> {
    if subject.times.is_empty() {
        return Ok(Vec::new());
    }
    subject.efficacy.with_curve(theta.phi(), |g| predict_log10_vl(theta, g, &subject.times, cfg))
}

pub fn sum_sq_residuals(y: &[f64], fitted: &[f64]) -> f64 {
    y.iter().zip(fitted).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `Σ_j [½ log(σ⁻²/2π) − ½ σ⁻² (y_ij − f_ij)²]`.
pub fn log_likelihood_subject(
    theta: &SubjectParams,
    subject: &Subject,
    sigma_inv_sq: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, OdeError> {
    let fitted = predict_subject(theta, subject, cfg)?;
    Ok(gaussian_log_likelihood(sum_sq_residuals(&subject.log10_vl, &fitted), subject.n_obs(), sigma_inv_sq))
}

pub(crate) fn gaussian_log_likelihood(ssr: f64, n_obs: usize, sigma_inv_sq: f64) -> f64 {
    0.5 * n_obs as f64 * (sigma_inv_sq / (2.0 * std::f64::consts::PI)).ln() - 0.5 * sigma_inv_sq * ssr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub keep_every: usize,
    pub n_kept: usize,
    pub seed: u64,
    /// Initial random-walk standard deviation for every coordinate.
    pub proposal_scale: f64,
    /// Sweeps between proposal-scale adaptations during burn-in.
    pub adapt_window: usize,
    /// Adds a joint translation `(μ + δ, θ_i + W_iδ)` Metropolis step to every sweep.
    pub recentre: bool,
    /// Starts each `θ_i` at a penalized individual fit instead of `W_iη`.
    pub warm_start: bool,
    pub integrator: IntegratorConfig,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in: 20_000,
            keep_every: 4,
            n_kept: 20_000,
            seed: 1,
            proposal_scale: 0.05,
            adapt_window: 50,
            recentre: true,
            warm_start: true,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.keep_every == 0 || self.n_kept == 0 || self.adapt_window == 0 {
            return Err(SamplerError::Config("keep_every, n_kept and adapt_window must be at least 1".into()));
        }
        if !(self.proposal_scale >= 0.0) || !self.proposal_scale.is_finite() {
            return Err(SamplerError::Config(format!("proposal_scale = {} must be finite and >= 0", self.proposal_scale)));
        }
        self.integrator.validate().map_err(|e| SamplerError::Config(e.to_string()))
    }

    pub fn total_sweeps(&self) -> usize {
        self.burn_in + self.keep_every * self.n_kept
    }
}

#[cfg(test)]
mod tests;
