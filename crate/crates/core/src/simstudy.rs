//! Synthetic trials generated from the hierarchical model, and parameter
//! recovery scored by relative bias and scaled RMSE.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adherence::{build_profile, AdherenceError, MemsLog, MetricSpec, VisitSchedule};
use crate::efficacy::{standardize_covariates, EfficacyError, EfficacyInputs, EfficacyModel, Ic50Trajectory};
use crate::ode::{IntegratorConfig, SubjectParams};
use crate::sampler::{
    derive_seed, individual_mean, predict_subject, run_chain, Hyperpriors, Mat6, McmcConfig, ObservationSet,
    SamplerError, Subject, Vec8, MU_NAMES,
};

/// Population means used to generate the simulation study data.
pub const REFERENCE_TRUE_MU: [f64; 8] = [0.767, -0.977, -4.086, 0.433, 1.040, -2.615, -0.670, 0.719];

pub const PROTOCOL_WEEKS: [i64; 13] = [0, 2, 4, 8, 12, 16, 24, 32, 40, 48, 56, 64, 72];

const MAX_REDRAWS: usize = 100;
const MAX_FAILED_FRACTION: f64 = 0.2;
const TAG_TRIAL: u64 = 0x7472_6961_6c;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("subject {subject}: no admissible parameters after {redraws} redraws")]
    Degenerate { subject: usize, redraws: usize },
    #[error("{failed} of {total} replications failed")]
    TooManyFailures { failed: usize, total: usize, reasons: Vec<String> },
    #[error(transparent)]
    Adherence(#[from] AdherenceError),
    #[error(transparent)]
    Efficacy(#[from] EfficacyError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// MEMS logs with weekly dose-taking propensities drawn from a Beta with
/// the given mean and concentration (`α + β`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdherenceSource {
    pub mean: f64,
    pub concentration: f64,
    pub doses_per_day: u32,
}

impl Default for AdherenceSource {
    fn default() -> Self {
        Self { mean: 0.85, concentration: 20.0, doses_per_day: 2 }
    }
}

/// Baseline IC50 is log-normal; a failing subject's IC50 rises to
/// `fold · S₀` at a failure day drawn uniformly from `tf_range`, shared by
/// both drugs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ic50Source {
    pub log_s0_median: f64,
    pub log_s0_sd: f64,
    pub fold_change_median: f64,
    pub log_fold_sd: f64,
    pub failure_prob: f64,
    pub tf_range: (f64, f64),
}

impl Default for Ic50Source {
    fn default() -> Self {
        Self {
            log_s0_median: 20.0,
            log_s0_sd: 0.5,
            fold_change_median: 4.0,
            log_fold_sd: 0.5,
            failure_prob: 0.5,
            tf_range: (112.0, 448.0),
        }
    }
}

/// Raw baseline covariates before cohort standardization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateSource {
    pub log10_vl_mean: f64,
    pub log10_vl_sd: f64,
    pub cd4_mean: f64,
    pub cd4_sd: f64,
}

impl Default for CovariateSource {
    fn default() -> Self {
        Self { log10_vl_mean: 4.71, log10_vl_sd: 0.70, cd4_mean: 250.0, cd4_sd: 100.0 }
    }
}

/// Viral loads below `threshold` copies/ml are replaced by `replacement`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Censoring {
    pub threshold: f64,
    pub replacement: f64,
}

impl Default for Censoring {
    fn default() -> Self {
        Self { threshold: 50.0, replacement: 25.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialDesign {
    pub n_subjects: usize,
    pub visit_weeks: Vec<i64>,
    pub true_mu: [f64; 8],
    /// Between-subject covariance `Σ`, row-major.
    pub true_sigma: [[f64; 6]; 6],
    pub true_sigma_sq: f64,
    pub adherence: AdherenceSource,
    pub ic50: Ic50Source,
    pub covariates: CovariateSource,
    /// Metric that turns the generated MEMS logs into adherence profiles.
    pub metric: MetricSpec,
    pub censoring: Option<Censoring>,
    pub integrator: IntegratorConfig,
    pub seed: u64,
}

impl Default for TrialDesign {
    fn default() -> Self {
        // Σ = (νΩ)⁻¹ for the default hyperpriors
        let mut sigma = [[0.0; 6]; 6];
        for (k, row) in sigma.iter_mut().enumerate() {
            row[k] = 0.04;
        }
        Self {
            n_subjects: 10,
            visit_weeks: PROTOCOL_WEEKS.to_vec(),
            true_mu: REFERENCE_TRUE_MU,
            true_sigma: sigma,
            true_sigma_sq: 0.25,
            adherence: AdherenceSource::default(),
            ic50: Ic50Source::default(),
            covariates: CovariateSource::default(),
            metric: MetricSpec::Window { frame_weeks: 2, length_weeks: 2 },
            censoring: None,
            integrator: IntegratorConfig::default(),
            seed: 1,
        }
    }
}

impl TrialDesign {
    fn sigma_matrix(&self) -> Mat6 {
        Mat6::from_fn(|r, c| self.true_sigma[r][c])
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Design(m.into()));
        if self.n_subjects < 2 {
            return bad("n_subjects must be at least 2 (covariates are standardized over the cohort)");
        }
        if !(self.true_sigma_sq >= 0.0) {
            return bad("true_sigma_sq must be >= 0");
        }
        let s = self.sigma_matrix();
        if (s - s.transpose()).abs().max() > 1e-12 || SymmetricEigen::new(s).eigenvalues.min() < -1e-12 {
            return bad("true_sigma must be symmetric positive semidefinite");
        }
        let a = &self.adherence;
        if !(0.0..=1.0).contains(&a.mean) || !(a.concentration > 0.0) || a.doses_per_day == 0 {
            return bad("adherence mean must be in [0, 1], concentration > 0, doses_per_day >= 1");
        }
        let i = &self.ic50;
        if !(i.log_s0_sd >= 0.0 && i.log_fold_sd >= 0.0 && i.fold_change_median > 0.0)
            || !(0.0..=1.0).contains(&i.failure_prob)
            || !(0.0 < i.tf_range.0 && i.tf_range.0 <= i.tf_range.1)
        {
            return bad("IC50 source parameters out of range");
        }
        if !(self.covariates.log10_vl_sd > 0.0 && self.covariates.cd4_sd > 0.0) {
            return bad("covariate SDs must be positive");
        }
        VisitSchedule::from_weeks(&self.visit_weeks)?;
        Ok(())
    }
}

/// A generated cohort together with the values that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedTrial {
    pub obs: ObservationSet,
    pub thetas: Vec<[f64; 6]>,
    pub mems: Vec<MemsLog>,
    pub raw_covariates: Vec<(f64, f64)>,
    /// Noise-free `f_ij`.
    pub noiseless: Vec<Vec<f64>>,
    /// Random-effect redraws forced by `R ≤ 1` or a failed solve.
    pub redraws: usize,
}

fn weekly_propensity(src: &AdherenceSource, rng: &mut ChaCha8Rng) -> f64 {
    if src.mean <= 0.0 || src.mean >= 1.0 {
        return src.mean;
    }
    Beta::new(src.mean * src.concentration, (1.0 - src.mean) * src.concentration)
        .expect("validated parameters")
        .sample(rng)
}

/// Openings spread over the day at the nominal dosing times, jittered by up
/// to a tenth of the dosing interval.
pub fn generate_mems(src: &AdherenceSource, days: i64, rng: &mut ChaCha8Rng) -> MemsLog {
    let per_day = f64::from(src.doses_per_day);
    let mut events = Vec::new();
    let mut p = 0.0;
    for day in 0..days {
        if day % 7 == 0 {
            p = weekly_propensity(src, rng);
        }
        for d in 0..src.doses_per_day {
            if rng.random::<f64>() < p {
                let jitter = (rng.random::<f64>() - 0.5) * 0.2;
                events.push(day as f64 + (f64::from(d) + 0.5 + jitter) / per_day);
            }
        }
    }
    MemsLog::new(events, src.doses_per_day).expect("generated log is valid")
}

fn generate_ic50(src: &Ic50Source, fails: Option<f64>, rng: &mut ChaCha8Rng) -> Ic50Trajectory {
    let z: f64 = rng.sample(StandardNormal);
    let s0 = (src.log_s0_median + src.log_s0_sd * z).exp();
    match fails {
        None => Ic50Trajectory::constant(s0),
        Some(tf) => {
            let z: f64 = rng.sample(StandardNormal);
            let fold = (src.fold_change_median.ln() + src.log_fold_sd * z).exp();
            Ic50Trajectory { s0, sf: s0 * fold, tf: Some(tf) }
        }
    }
}

/// `L` with `LLᵀ = Σ` for a positive semidefinite `Σ`.
fn psd_sqrt(s: &Mat6) -> Mat6 {
    let eig = SymmetricEigen::new(*s);
    let d = Mat6::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    eig.eigenvectors * d
}

pub fn generate_trial(design: &TrialDesign) -> Result<GeneratedTrial, SimError> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(design.seed, TAG_TRIAL));
    let schedule = VisitSchedule::from_weeks(&design.visit_weeks)?;
    let last_day = *schedule.visit_days.last().expect("validated schedule");
    let times: Vec<f64> = schedule.visit_days.iter().map(|&d| d as f64).collect();
    let cov = &design.covariates;
    let vl_dist = Normal::new(cov.log10_vl_mean, cov.log10_vl_sd).expect("validated");
    let cd4_dist = Normal::new(cov.cd4_mean, cov.cd4_sd).expect("validated");
    let raw: Vec<(f64, f64)> =
        (0..design.n_subjects).map(|_| (vl_dist.sample(&mut rng), cd4_dist.sample(&mut rng))).collect();
    let (covariates, _) = standardize_covariates(&raw)?;

    let mu = Vec8::from(design.true_mu);
    let root = psd_sqrt(&design.sigma_matrix());
    let noise = design.true_sigma_sq.sqrt();
    let mut out = GeneratedTrial {
        obs: ObservationSet::default(),
        thetas: Vec::new(),
        mems: Vec::new(),
        raw_covariates: raw.clone(),
        noiseless: Vec::new(),
        redraws: 0,
    };
    for (i, &w) in covariates.iter().enumerate() {
        let log = generate_mems(&design.adherence, last_day, &mut rng);
        let profile = build_profile(&log, &schedule, design.metric)?;
        let fails = (rng.random::<f64>() < design.ic50.failure_prob)
            .then(|| rng.random_range(design.ic50.tf_range.0..=design.ic50.tf_range.1));
        let ic1 = generate_ic50(&design.ic50, fails, &mut rng);
        let ic2 = generate_ic50(&design.ic50, fails, &mut rng);
        let inputs = EfficacyInputs::new(profile.clone(), profile, ic1, ic2, w)?;
        let mut subject = Subject {
            id: format!("sim{:03}", i + 1),
            times: times.clone(),
            log10_vl: Vec::new(),
            efficacy: EfficacyModel::Full(inputs),
        };

        let mean = individual_mean(&mu, w);
        let mut attempts = 0;
        let (theta, fitted) = loop {
            if attempts > MAX_REDRAWS {
                return Err(SimError::Degenerate { subject: i, redraws: attempts - 1 });
            }
            attempts += 1;
            let z = crate::sampler::Vec6::from_fn(|_, _| rng.sample(StandardNormal));
            let b = root * z;
            let theta: [f64; 6] = std::array::from_fn(|k| mean[k] + b[k]);
            let p = SubjectParams::from_array(theta);
            if p.r0() <= 1.0 {
                continue;
            }
            if let Ok(f) = predict_subject(&p, &subject, &design.integrator) {
                break (theta, f);
            }
        };
        out.redraws += attempts - 1;
        subject.log10_vl = fitted
            .iter()
            .map(|f| {
                let z: f64 = rng.sample(StandardNormal);
                let y = f + noise * z;
                match design.censoring {
                    Some(c) if y < c.threshold.log10() => c.replacement.log10(),
                    _ => y,
                }
            })
            .collect();
        out.obs.subjects.push(subject);
        out.thetas.push(theta);
        out.mems.push(log);
        out.noiseless.push(fitted);
    }
    Ok(out)
}

/// The same cohort fitted with the constant-efficacy control model.
pub fn as_control(obs: &ObservationSet) -> ObservationSet {
    ObservationSet {
        subjects: obs.subjects.iter().map(|s| Subject { efficacy: EfficacyModel::Control, ..s.clone() }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRecovery {
    pub name: String,
    pub tv: f64,
    pub me: f64,
    /// Percent.
    pub rb: f64,
    /// Percent.
    pub se: f64,
}

/// `RB = 100(ME − TV)/|TV|`, `SE = 100√MSE/|TV|`.
pub fn recovery_metrics(name: &str, tv: f64, estimates: &[f64]) -> ParamRecovery {
    let n = estimates.len() as f64;
    let me = estimates.iter().sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - tv).powi(2)).sum::<f64>() / n;
    ParamRecovery { name: name.into(), tv, me, rb: 100.0 * (me - tv) / tv.abs(), se: 100.0 * mse.sqrt() / tv.abs() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub params: Vec<ParamRecovery>,
    pub n_reps: usize,
    /// Posterior means of `μ`, one row per successful replication.
    pub estimates: Vec<[f64; 8]>,
    /// Replication index and reason for each failure.
    pub failures: Vec<(usize, String)>,
    /// Acceptance averaged over subjects, per successful replication.
    pub mean_acceptance: Vec<f64>,
}

impl RecoveryReport {
    pub fn from_estimates(true_mu: &[f64; 8], estimates: Vec<[f64; 8]>, n_reps: usize) -> Self {
        let params = (0..8)
            .map(|k| recovery_metrics(MU_NAMES[k], true_mu[k], &estimates.iter().map(|e| e[k]).collect::<Vec<_>>()))
            .collect();
        Self { params, n_reps, estimates, failures: Vec::new(), mean_acceptance: Vec::new() }
    }

    /// Per-replication relative bias (percent) for each parameter.
    pub fn replication_rb(&self) -> Vec<[f64; 8]> {
        self.estimates
            .iter()
            .map(|e| std::array::from_fn(|k| 100.0 * (e[k] - self.params[k].tv) / self.params[k].tv.abs()))
            .collect()
    }
}

/// Design and chain seeds for replication `rep`.
pub fn replication_seeds(design_seed: u64, chain_seed: u64, rep: usize) -> (u64, u64) {
    (derive_seed(design_seed, rep as u64 + 1), derive_seed(chain_seed, rep as u64 + 1))
}

/// Generates and fits `n_reps` independent trials, recording the posterior
/// mean of `μ` from each.
pub fn run_replications(
    design: &TrialDesign,
    n_reps: usize,
    hyper: &Hyperpriors,
    cfg: &McmcConfig,
) -> Result<RecoveryReport, SimError> {
    if n_reps == 0 {
        return Err(SimError::Design("n_reps must be at least 1".into()));
    }
    design.validate()?;
    let results: Vec<Result<([f64; 8], f64), String>> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let (ds, cs) = replication_seeds(design.seed, cfg.seed, rep);
            let trial = generate_trial(&TrialDesign { seed: ds, ..design.clone() }).map_err(|e| e.to_string())?;
            let chain = run_chain(&trial.obs, hyper, &McmcConfig { seed: cs, ..cfg.clone() }).map_err(|e| e.to_string())?;
            let acc = chain.acceptance.iter().sum::<f64>() / chain.acceptance.len() as f64;
            Ok((chain.mean_mu(), acc))
        })
        .collect();

    let mut estimates = Vec::new();
    let mut acceptance = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok((e, a)) => {
                estimates.push(e);
                acceptance.push(a);
            }
            Err(msg) => failures.push((rep, msg)),
        }
    }
    if failures.len() as f64 > MAX_FAILED_FRACTION * n_reps as f64 || estimates.is_empty() {
        return Err(SimError::TooManyFailures {
            failed: failures.len(),
            total: n_reps,
            reasons: failures.into_iter().map(|(r, m)| format!("replication {r}: {m}")).collect(),
        });
    }
    let mut report = RecoveryReport::from_estimates(&design.true_mu, estimates, n_reps);
    report.failures = failures;
    report.mean_acceptance = acceptance;
    Ok(report)
}
