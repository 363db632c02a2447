//! Chain starting values.
//!
//! Each subject is fitted by Nelder–Mead on its profile log-likelihood
//! (σ² maximized out) plus a weak ridge toward its prior mean `W_iη`, from
//! a few starts spread along `log φ` where flat "no drug effect" plateaus
//! trap a random walk started at `η`. The population quantities then start
//! at their full-conditional means given those fits.

use argmin::core::{CostFunction, Error as ArgminError, Executor, State};
use argmin::solver::neldermead::NelderMead;

use super::{predict_subject, sum_sq_residuals, Subject};
use crate::ode::{IntegratorConfig, SubjectParams};

/// Standard deviation of the ridge toward the prior mean.
pub const RIDGE_SD: f64 = 2.0;
const SIMPLEX_STEP: f64 = 0.5;
const MAX_ITERS: u64 = 800;
/// Offsets applied to `log φ` for the extra starts.
const PHI_OFFSETS: [f64; 3] = [0.0, -2.0, -4.0];

struct Objective<'a> {
    subject: &'a Subject,
    prior_mean: [f64; 6],
    cfg: &'a IntegratorConfig,
}

impl Objective<'_> {
    fn value(&self, theta: &[f64; 6]) -> f64 {
        let m = self.subject.times.len() as f64;
        let ridge: f64 = theta.iter().zip(&self.prior_mean).map(|(t, p)| (t - p).powi(2)).sum::<f64>();
        let penalty = 0.5 * ridge / (RIDGE_SD * RIDGE_SD);
        match predict_subject(&SubjectParams::from_array(*theta), self.subject, self.cfg) {
            Ok(fitted) => {
                let ssr = sum_sq_residuals(&self.subject.log10_vl, &fitted);
                // the small offset keeps an exact fit finite
                0.5 * m * (ssr / m + 1e-12).ln() + penalty
            }
            Err(_) => f64::INFINITY,
        }
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, ArgminError> {
        Ok(self.value(&std::array::from_fn(|k| p[k])))
    }
}

/// Penalized individual fit, or `None` when no start has a finite objective.
/// Subjects without observations return the prior mean.
pub fn fit_subject(subject: &Subject, prior_mean: &[f64; 6], cfg: &IntegratorConfig) -> Option<[f64; 6]> {
    if subject.times.is_empty() {
        return Some(*prior_mean);
    }
    let obj = Objective { subject, prior_mean: *prior_mean, cfg };
    let mut best: Option<([f64; 6], f64)> = None;
    for offset in PHI_OFFSETS {
        let mut start = *prior_mean;
        start[5] += offset;
        if !obj.value(&start).is_finite() {
            continue;
        }
        let mut simplex = vec![start.to_vec()];
        for k in 0..6 {
            let mut v = start.to_vec();
            v[k] += SIMPLEX_STEP;
            simplex.push(v);
        }
        let Ok(solver) = NelderMead::new(simplex).with_sd_tolerance(1e-7) else {
            continue;
        };
        let Ok(res) = Executor::new(Objective { subject, prior_mean: *prior_mean, cfg }, solver)
            .configure(|s| s.max_iters(MAX_ITERS))
            .run()
        else {
            continue;
        };
        let state = res.state();
        let (Some(p), cost) = (state.get_best_param(), state.get_best_cost()) else {
            continue;
        };
        if cost.is_finite() && best.is_none_or(|(_, c)| cost < c) {
            best = Some((std::array::from_fn(|k| p[k]), cost));
        }
    }
    best.map(|(p, _)| p)
}
