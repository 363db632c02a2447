use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::gibbs::{gibbs_big_sigma, gibbs_mu, gibbs_sigma, mu_conditional, sigma_conditional};
use super::init::fit_subject;
use super::mh::{mh_update_subject, ScaleAdapter, SubjectState};
use super::rng::{stream, SLOT_POPULATION, SLOT_RECENTRE, SLOT_SUBJECT0};
use super::{
    design_matrix, individual_mean, predict_subject, sum_sq_residuals, Hyperpriors, Mat6, Mat8, McmcConfig,
    ObservationSet, SamplerError, Vec8,
};
use crate::dic::deviance_from_ssr;
use crate::efficacy::CovariatePair;
use crate::ode::SubjectParams;

/// One retained draw of the full parameter set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub mu: [f64; 8],
    pub sigma_inv_sq: f64,
    /// Row-major `Σ`.
    pub big_sigma: [[f64; 6]; 6],
    pub thetas: Vec<[f64; 6]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub samples: Vec<Sample>,
    /// Per-subject MH acceptance fraction after burn-in.
    pub acceptance: Vec<f64>,
    /// Acceptance fraction of the translation move after burn-in.
    pub recentre_acceptance: Option<f64>,
    /// Deviance of each retained sample.
    pub deviance_trace: Vec<f64>,
    /// Frozen per-subject proposal standard deviations.
    pub proposal_scales: Vec<[f64; 6]>,
    pub config: McmcConfig,
}

impl ChainOutput {
    pub fn mean_mu(&self) -> [f64; 8] {
        mean_of(self.samples.iter().map(|s| s.mu))
    }

    pub fn mean_sigma_inv_sq(&self) -> f64 {
        self.samples.iter().map(|s| s.sigma_inv_sq).sum::<f64>() / self.samples.len() as f64
    }

    /// Posterior mean of each `θ_i`, on the log scale.
    pub fn mean_thetas(&self) -> Vec<SubjectParams> {
        let n = self.samples.first().map_or(0, |s| s.thetas.len());
        (0..n).map(|i| SubjectParams::from_array(mean_of(self.samples.iter().map(|s| s.thetas[i])))).collect()
    }
}

fn mean_of<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> [f64; N] {
    let mut acc = [0.0; N];
    let mut count = 0usize;
    for r in rows {
        for k in 0..N {
            acc[k] += r[k];
        }
        count += 1;
    }
    acc.map(|v| v / count as f64)
}

struct Slot {
    state: SubjectState,
    adapter: ScaleAdapter<6>,
    accepted: usize,
}

struct Population {
    mu: Vec8,
    sigma_inv_sq: f64,
    big_sigma: Mat6,
    sigma_inv: Mat6,
}

impl Population {
    fn snapshot(&self) -> String {
        format!("mu = {:?}, sigma^-2 = {}", self.mu.as_slice(), self.sigma_inv_sq)
    }
}

/// Runs burn-in with proposal adaptation, then keeps every `keep_every`-th
/// of `n_kept · keep_every` further sweeps. A sweep updates every subject by
/// MH (in parallel), optionally applies the translation move, then draws
/// `σ⁻²`, `μ` and `Σ⁻¹` in that order.
pub fn run_chain(obs: &ObservationSet, hyper: &Hyperpriors, cfg: &McmcConfig) -> Result<ChainOutput, SamplerError> {
    hyper.validate()?;
    cfg.validate()?;
    obs.validate()?;
    let subjects = &obs.subjects;
    let covariates: Vec<CovariatePair> = subjects.iter().map(|s| s.covariates()).collect();
    let n_obs = obs.n_obs();
    let integ = &cfg.integrator;
    let lambda_inv = hyper.lambda.cholesky().map(|c| c.inverse()).ok_or(SamplerError::NotPositiveDefinite {
        what: "Lambda",
        detail: "Cholesky failed".into(),
    })?;

    let sigma_inv = hyper.nu * hyper.omega;
    let mut pop = Population {
        mu: hyper.eta,
        sigma_inv_sq: hyper.a / hyper.b,
        big_sigma: sigma_inv.try_inverse().expect("validated Omega"),
        sigma_inv,
    };
    let starts: Vec<[f64; 6]> = subjects
        .par_iter()
        .zip(&covariates)
        .map(|(s, &w)| {
            let prior_mean = individual_mean(&pop.mu, w);
            if cfg.warm_start {
                fit_subject(s, &prior_mean, integ).unwrap_or(prior_mean)
            } else {
                prior_mean
            }
        })
        .collect();
    let mut slots: Vec<Slot> = subjects
        .par_iter()
        .zip(&starts)
        .map(|(s, theta)| {
            SubjectState::new(SubjectParams::from_array(*theta), s, integ).map(|state| Slot {
                state,
                adapter: ScaleAdapter::new(cfg.proposal_scale),
                accepted: 0,
            })
        })
        .collect::<Result<_, _>>()
        .map_err(|e| SamplerError::Aborted {
            sweep: 0,
            message: format!("initial state has no finite likelihood: {e}"),
            snapshot: pop.snapshot(),
        })?;
    if cfg.warm_start {
        let ssr: f64 = slots.iter().map(|s| s.state.ssr).sum();
        let (shape, rate) = sigma_conditional(ssr, n_obs, hyper);
        pop.sigma_inv_sq = shape / rate;
        pop.mu = mu_conditional(&starts, &covariates, &pop.sigma_inv, hyper)?.mean;
    }
    let mut recentre = ScaleAdapter::<8>::new(cfg.proposal_scale);
    let mut recentre_accepted = 0usize;

    let mut out = ChainOutput {
        samples: Vec::with_capacity(cfg.n_kept),
        acceptance: Vec::new(),
        recentre_acceptance: None,
        deviance_trace: Vec::with_capacity(cfg.n_kept),
        proposal_scales: Vec::new(),
        config: cfg.clone(),
    };

    for sweep in 0..cfg.total_sweeps() {
        let burning = sweep < cfg.burn_in;
        let abort = |message: String, pop: &Population| SamplerError::Aborted { sweep, message, snapshot: pop.snapshot() };

        let mu = pop.mu;
        let (sigma_inv, sigma_inv_sq) = (pop.sigma_inv, pop.sigma_inv_sq);
        slots.par_iter_mut().zip(subjects).zip(&covariates).enumerate().for_each(|(i, ((slot, subject), &w))| {
            let mut rng = stream(cfg.seed, sweep, SLOT_SUBJECT0 + i as u64);
            let factor = slot.adapter.factor();
            let prior_mean = individual_mean(&mu, w);
            let acc = mh_update_subject(&mut slot.state, subject, &prior_mean, &sigma_inv, sigma_inv_sq, &factor, integ, &mut rng);
            if burning {
                slot.adapter.record(&slot.state.theta.to_array(), acc);
            } else {
                slot.accepted += usize::from(acc);
            }
        });

        if cfg.recentre {
            let acc = translation_move(&mut pop, &mut slots, obs, &covariates, hyper, &lambda_inv, &recentre, cfg, sweep);
            if burning {
                recentre.record(&pop.mu.into(), acc);
            } else {
                recentre_accepted += usize::from(acc);
            }
        }

        let mut rng = stream(cfg.seed, sweep, SLOT_POPULATION);
        let ssr: f64 = slots.iter().map(|s| s.state.ssr).sum();
        pop.sigma_inv_sq = gibbs_sigma(ssr, n_obs, hyper, &mut rng);
        let thetas: Vec<[f64; 6]> = slots.iter().map(|s| s.state.theta.to_array()).collect();
        pop.mu = gibbs_mu(&thetas, &covariates, &pop.sigma_inv, hyper, &mut rng).map_err(|e| abort(e.to_string(), &pop))?;
        let (big_sigma, sigma_inv) =
            gibbs_big_sigma(&thetas, &covariates, &pop.mu, hyper, &mut rng).map_err(|e| abort(e.to_string(), &pop))?;
        pop.big_sigma = big_sigma;
        pop.sigma_inv = sigma_inv;

        if burning {
            if (sweep + 1) % cfg.adapt_window == 0 {
                slots.iter_mut().for_each(|s| s.adapter.end_window());
                recentre.end_window();
            }
            continue;
        }
        if (sweep - cfg.burn_in + 1) % cfg.keep_every == 0 {
            if !(pop.sigma_inv_sq > 0.0) || pop.big_sigma.cholesky().is_none() {
                return Err(abort("invalid population state".into(), &pop));
            }
            out.deviance_trace.push(deviance_from_ssr(pop.sigma_inv_sq, ssr, n_obs));
            out.samples.push(Sample {
                mu: pop.mu.into(),
                sigma_inv_sq: pop.sigma_inv_sq,
                big_sigma: std::array::from_fn(|r| std::array::from_fn(|c| pop.big_sigma[(r, c)])),
                thetas,
            });
        }
    }

    let kept_sweeps = (cfg.total_sweeps() - cfg.burn_in) as f64;
    out.acceptance = slots.iter().map(|s| s.accepted as f64 / kept_sweeps).collect();
    out.recentre_acceptance = cfg.recentre.then(|| recentre_accepted as f64 / kept_sweeps);
    out.proposal_scales = slots.iter().map(|s| s.adapter.scale()).collect();
    Ok(out)
}

/// Metropolis step on `(μ, θ_1..θ_n) → (μ + δ, θ_i + W_iδ)`. The random
/// effects `b_i` are unchanged, so only the `μ` prior and the likelihoods
/// enter the acceptance ratio.
#[allow(clippy::too_many_arguments)]
fn translation_move(
    pop: &mut Population,
    slots: &mut [Slot],
    obs: &ObservationSet,
    covariates: &[CovariatePair],
    hyper: &Hyperpriors,
    lambda_inv: &Mat8,
    adapter: &ScaleAdapter<8>,
    cfg: &McmcConfig,
    sweep: usize,
) -> bool {
    let mut rng = stream(cfg.seed, sweep, SLOT_RECENTRE);
    let delta: Vec8 = adapter.draw(&mut rng);
    if delta.iter().all(|d| *d == 0.0) {
        return true;
    }
    let mu_new = pop.mu + delta;
    let quad = |m: &Vec8| {
        let d = m - hyper.eta;
        (d.transpose() * lambda_inv * d)[(0, 0)]
    };

    let proposals: Option<Vec<SubjectState>> = slots
        .par_iter()
        .zip(&obs.subjects)
        .zip(covariates)
        .map(|((slot, subject), &w)| {
            let shifted = slot.state.theta.to_array();
            let step = design_matrix(w) * delta;
            let theta = SubjectParams::from_array(std::array::from_fn(|k| shifted[k] + step[k]));
            let fitted = predict_subject(&theta, subject, &cfg.integrator).ok()?;
            let ssr = sum_sq_residuals(&subject.log10_vl, &fitted);
            Some(SubjectState { theta, fitted, ssr })
        })
        .collect();
    let u: f64 = rng.random();
    let Some(proposals) = proposals else {
        return false;
    };
    let d_ssr: f64 = proposals.iter().zip(slots.iter()).map(|(p, s)| p.ssr - s.state.ssr).sum();
    let log_ratio = -0.5 * (quad(&mu_new) - quad(&pop.mu)) - 0.5 * pop.sigma_inv_sq * d_ssr;
    if log_ratio.is_finite() && u.ln() < log_ratio {
        pop.mu = mu_new;
        for (slot, p) in slots.iter_mut().zip(proposals) {
            slot.state = p;
        }
        true
    } else {
        false
    }
}
