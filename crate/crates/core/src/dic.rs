//! Deviance, DIC and model ranking.
//!
//! `D(σ⁻², Θ) = σ⁻² Σᵢ‖y_i − f_i(θ_i)‖² − log σ⁻² Σᵢ m_i`, i.e. minus twice
//! the log-likelihood without the `2π` term. `DIC = 2D̄ − D(σ̄⁻², Θ̄)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{IntegratorConfig, OdeError, SubjectParams};
use crate::sampler::{predict_subject, ChainOutput, ObservationSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DicError {
    #[error("integration failed for subject {subject}: {source}")]
    Integration { subject: String, source: OdeError },
    #[error("DIC needs at least 2 retained samples, got {0}")]
    TooFewSamples(usize),
    #[error("{0} parameter sets for {1} subjects")]
    SubjectMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicSummary {
    pub model_label: String,
    pub d_bar: f64,
    pub d_at_mean: f64,
    pub p_d: f64,
    pub dic: f64,
}

impl DicSummary {
    pub fn new(model_label: impl Into<String>, d_bar: f64, d_at_mean: f64) -> Self {
        Self { model_label: model_label.into(), d_bar, d_at_mean, p_d: d_bar - d_at_mean, dic: 2.0 * d_bar - d_at_mean }
    }
}

/// Deviance from a residual sum of squares over `n_obs` observations.
#[inline]
pub fn deviance_from_ssr(sigma_inv_sq: f64, ssr: f64, n_obs: usize) -> f64 {
    sigma_inv_sq * ssr - sigma_inv_sq.ln() * n_obs as f64
}

pub fn deviance(
    sigma_inv_sq: f64,
    thetas: &[SubjectParams],
    obs: &ObservationSet,
    cfg: &IntegratorConfig,
) -> Result<f64, DicError> {
    if thetas.len() != obs.subjects.len() {
        return Err(DicError::SubjectMismatch(thetas.len(), obs.subjects.len()));
    }
    let ssrs: Vec<f64> = thetas
        .par_iter()
        .zip(&obs.subjects)
        .map(|(theta, s)| {
            let fitted = predict_subject(theta, s, cfg)
                .map_err(|source| DicError::Integration { subject: s.id.clone(), source })?;
            Ok(crate::sampler::sum_sq_residuals(&s.log10_vl, &fitted))
        })
        .collect::<Result<_, DicError>>()?;
    Ok(deviance_from_ssr(sigma_inv_sq, ssrs.iter().sum(), obs.n_obs()))
}

/// `D̄` from the stored trace and `D` at the posterior means of `σ⁻²` and
/// the log-scale `θ_i`.
pub fn dic_from_chain(label: &str, chain: &ChainOutput, obs: &ObservationSet) -> Result<DicSummary, DicError> {
    if chain.deviance_trace.len() < 2 {
        return Err(DicError::TooFewSamples(chain.deviance_trace.len()));
    }
    let d_bar = chain.deviance_trace.iter().sum::<f64>() / chain.deviance_trace.len() as f64;
    let d_at_mean = deviance(chain.mean_sigma_inv_sq(), &chain.mean_thetas(), obs, &chain.config.integrator)?;
    Ok(DicSummary::new(label, d_bar, d_at_mean))
}

/// Deviance of every retained sample, recomputed with fresh solves.
pub fn recompute_trace(chain: &ChainOutput, obs: &ObservationSet) -> Result<Vec<f64>, DicError> {
    chain
        .samples
        .iter()
        .map(|s| {
            let thetas: Vec<SubjectParams> = s.thetas.iter().map(|t| SubjectParams::from_array(*t)).collect();
            deviance(s.sigma_inv_sq, &thetas, obs, &chain.config.integrator)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedModel {
    pub rank: usize,
    pub summary: DicSummary,
    /// DIC minus the best model's DIC.
    pub delta_dic: f64,
}

/// Ascending DIC; ties broken by label.
pub fn rank_models(summaries: &[DicSummary]) -> Vec<RankedModel> {
    let mut sorted = summaries.to_vec();
    sorted.sort_by(|a, b| a.dic.total_cmp(&b.dic).then_with(|| a.model_label.cmp(&b.model_label)));
    let best = sorted.first().map_or(0.0, |s| s.dic);
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, summary)| RankedModel { rank: i + 1, delta_dic: summary.dic - best, summary })
        .collect()
}
