//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are rejected. [`RunConfig::to_text`]
//! renders the effective configuration in a canonical order, and parsing
//! that text gives back an identical configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::ModelLabel;
use crate::ode::IntegratorConfig;
use crate::sampler::{Hyperpriors, Mat6, Mat8, McmcConfig, Vec8};
use crate::simstudy::{AdherenceSource, Censoring, Ic50Source, TrialDesign};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub a: f64,
    pub b: f64,
    pub eta: [f64; 8],
    pub lambda_diag: [f64; 8],
    pub omega_diag: [f64; 6],
    pub nu: f64,

    pub burn_in: usize,
    pub keep_every: usize,
    pub n_kept: usize,
    pub proposal_scale: f64,
    pub adapt_window: usize,
    pub recentre: bool,
    pub warm_start: bool,
    pub seed: u64,

    pub metric: ModelLabel,
    pub compare_metrics: Vec<ModelLabel>,
    pub doses_per_day: u32,
    pub censoring: bool,
    pub censor_threshold: f64,
    pub censor_replacement: f64,

    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,

    pub out_dir: PathBuf,
    /// Spacing (days) of the dense grid for fitted curves.
    pub grid_step: f64,

    pub sim_reps: usize,
    pub sim_subjects: usize,
    pub sim_sigma_sq: f64,
    /// Diagonal of the generating between-subject covariance.
    pub sim_sigma_diag: f64,
    pub sim_adherence_mean: f64,
    pub sim_adherence_concentration: f64,
    pub sim_ic50_log_median: f64,
    pub sim_failure_prob: f64,
    pub sim_censoring: bool,
    /// Absolute integrator tolerance for generating and fitting synthetic trials.
    pub sim_abs_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = Hyperpriors::default();
        let m = McmcConfig::default();
        let i = IntegratorConfig::default();
        let t = TrialDesign::default();
        let c = Censoring::default();
        Self {
            a: h.a,
            b: h.b,
            eta: h.eta.into(),
            lambda_diag: h.lambda.diagonal().into(),
            omega_diag: h.omega.diagonal().into(),
            nu: h.nu,
            burn_in: m.burn_in,
            keep_every: m.keep_every,
            n_kept: m.n_kept,
            proposal_scale: m.proposal_scale,
            adapt_window: m.adapt_window,
            recentre: m.recentre,
            warm_start: m.warm_start,
            seed: m.seed,
            metric: ModelLabel::Metric(t.metric),
            compare_metrics: ModelLabel::all(),
            doses_per_day: t.adherence.doses_per_day,
            censoring: true,
            censor_threshold: c.threshold,
            censor_replacement: c.replacement,
            rel_tol: i.rel_tol,
            abs_tol: i.abs_tol,
            max_step: i.max_step,
            out_dir: PathBuf::from("out"),
            grid_step: 1.0,
            sim_reps: 10,
            sim_subjects: t.n_subjects,
            sim_sigma_sq: t.true_sigma_sq,
            sim_sigma_diag: t.true_sigma[0][0],
            sim_adherence_mean: t.adherence.mean,
            sim_adherence_concentration: t.adherence.concentration,
            sim_ic50_log_median: t.ic50.log_s0_median,
            sim_failure_prob: t.ic50.failure_prob,
            sim_censoring: false,
            sim_abs_tol: 1e-14,
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {key} = {value:?}"))
}

fn parse_array<T: FromStr + Copy + Default, const N: usize>(key: &str, value: &str) -> std::result::Result<[T; N], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("{key} needs {N} comma-separated values, got {}", parts.len()));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_scalar(key, p)?;
    }
    Ok(out)
}

impl RunConfig {
    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("a", self.a.to_string()),
            ("b", self.b.to_string()),
            ("eta", list(&self.eta)),
            ("lambda_diag", list(&self.lambda_diag)),
            ("omega_diag", list(&self.omega_diag)),
            ("nu", self.nu.to_string()),
            ("burn_in", self.burn_in.to_string()),
            ("keep_every", self.keep_every.to_string()),
            ("n_kept", self.n_kept.to_string()),
            ("proposal_scale", self.proposal_scale.to_string()),
            ("adapt_window", self.adapt_window.to_string()),
            ("recentre", self.recentre.to_string()),
            ("warm_start", self.warm_start.to_string()),
            ("seed", self.seed.to_string()),
            ("metric", self.metric.to_string()),
            ("compare_metrics", list(&self.compare_metrics)),
            ("doses_per_day", self.doses_per_day.to_string()),
            ("censoring", self.censoring.to_string()),
            ("censor_threshold", self.censor_threshold.to_string()),
            ("censor_replacement", self.censor_replacement.to_string()),
            ("rel_tol", self.rel_tol.to_string()),
            ("abs_tol", self.abs_tol.to_string()),
            ("max_step", self.max_step.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("grid_step", self.grid_step.to_string()),
            ("sim_reps", self.sim_reps.to_string()),
            ("sim_subjects", self.sim_subjects.to_string()),
            ("sim_sigma_sq", self.sim_sigma_sq.to_string()),
            ("sim_sigma_diag", self.sim_sigma_diag.to_string()),
            ("sim_adherence_mean", self.sim_adherence_mean.to_string()),
            ("sim_adherence_concentration", self.sim_adherence_concentration.to_string()),
            ("sim_ic50_log_median", self.sim_ic50_log_median.to_string()),
            ("sim_failure_prob", self.sim_failure_prob.to_string()),
            ("sim_censoring", self.sim_censoring.to_string()),
            ("sim_abs_tol", self.sim_abs_tol.to_string()),
        ]
    }

    /// The entries embedded in output files: everything except `out_dir`,
    /// so that where a run writes does not change what it writes.
    pub fn echo_entries(&self) -> Vec<(&'static str, String)> {
        self.entries().into_iter().filter(|(k, _)| *k != "out_dir").collect()
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "a" => self.a = parse_scalar(key, v)?,
            "b" => self.b = parse_scalar(key, v)?,
            "eta" => self.eta = parse_array(key, v)?,
            "lambda_diag" => self.lambda_diag = parse_array(key, v)?,
            "omega_diag" => self.omega_diag = parse_array(key, v)?,
            "nu" => self.nu = parse_scalar(key, v)?,
            "burn_in" => self.burn_in = parse_scalar(key, v)?,
            "keep_every" => self.keep_every = parse_scalar(key, v)?,
            "n_kept" => self.n_kept = parse_scalar(key, v)?,
            "proposal_scale" => self.proposal_scale = parse_scalar(key, v)?,
            "adapt_window" => self.adapt_window = parse_scalar(key, v)?,
            "recentre" => self.recentre = parse_scalar(key, v)?,
            "warm_start" => self.warm_start = parse_scalar(key, v)?,
            "seed" => self.seed = parse_scalar(key, v)?,
            "metric" => self.metric = v.parse()?,
            "compare_metrics" => {
                self.compare_metrics = v.split(',').map(|s| s.trim().parse()).collect::<std::result::Result<_, _>>()?
            }
            "doses_per_day" => self.doses_per_day = parse_scalar(key, v)?,
            "censoring" => self.censoring = parse_scalar(key, v)?,
            "censor_threshold" => self.censor_threshold = parse_scalar(key, v)?,
            "censor_replacement" => self.censor_replacement = parse_scalar(key, v)?,
            "rel_tol" => self.rel_tol = parse_scalar(key, v)?,
            "abs_tol" => self.abs_tol = parse_scalar(key, v)?,
            "max_step" => self.max_step = parse_scalar(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "grid_step" => self.grid_step = parse_scalar(key, v)?,
            "sim_reps" => self.sim_reps = parse_scalar(key, v)?,
            "sim_subjects" => self.sim_subjects = parse_scalar(key, v)?,
            "sim_sigma_sq" => self.sim_sigma_sq = parse_scalar(key, v)?,
            "sim_sigma_diag" => self.sim_sigma_diag = parse_scalar(key, v)?,
            "sim_adherence_mean" => self.sim_adherence_mean = parse_scalar(key, v)?,
            "sim_adherence_concentration" => self.sim_adherence_concentration = parse_scalar(key, v)?,
            "sim_ic50_log_median" => self.sim_ic50_log_median = parse_scalar(key, v)?,
            "sim_failure_prob" => self.sim_failure_prob = parse_scalar(key, v)?,
            "sim_censoring" => self.sim_censoring = parse_scalar(key, v)?,
            "sim_abs_tol" => self.sim_abs_tol = parse_scalar(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults. `origin` names the
    /// source in error messages.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Validation(format!("{origin}:{}: {m}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(err)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one key, given as `key=value`, then revalidates.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let err = |m: String| Error::Validation(format!("override {assignment:?}: {m}"));
        let (key, value) = assignment.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
        self.set(key.trim(), value.trim()).map_err(err)?;
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperpriors().validate()?;
        self.mcmc().validate()?;
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if self.doses_per_day == 0 {
            return bad("doses_per_day must be at least 1");
        }
        if self.censoring && !(self.censor_replacement > 0.0 && self.censor_threshold > 0.0) {
            return bad("censor_threshold and censor_replacement must be positive");
        }
        if !(self.grid_step > 0.0) || !self.grid_step.is_finite() {
            return bad("grid_step must be positive");
        }
        if self.compare_metrics.len() < 2 {
            return bad("compare_metrics needs at least 2 labels");
        }
        if self.sim_reps == 0 {
            return bad("sim_reps must be at least 1");
        }
        if !(self.sim_abs_tol > 0.0) {
            return bad("sim_abs_tol must be positive");
        }
        self.trial_design().validate()?;
        Ok(())
    }

    pub fn hyperpriors(&self) -> Hyperpriors {
        Hyperpriors {
            a: self.a,
            b: self.b,
            eta: Vec8::from(self.eta),
            lambda: Mat8::from_diagonal(&Vec8::from(self.lambda_diag)),
            omega: Mat6::from_diagonal(&self.omega_diag.into()),
            nu: self.nu,
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig { rel_tol: self.rel_tol, abs_tol: self.abs_tol, max_step: self.max_step, breakpoints: Vec::new() }
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            burn_in: self.burn_in,
            keep_every: self.keep_every,
            n_kept: self.n_kept,
            seed: self.seed,
            proposal_scale: self.proposal_scale,
            adapt_window: self.adapt_window,
            recentre: self.recentre,
            warm_start: self.warm_start,
            integrator: self.integrator(),
        }
    }

    pub fn censoring(&self) -> Option<Censoring> {
        self.censoring.then_some(Censoring { threshold: self.censor_threshold, replacement: self.censor_replacement })
    }

    /// Synthetic-trial design; the adherence metric must be a MEMS window.
    pub fn trial_design(&self) -> TrialDesign {
        let d = TrialDesign::default();
        let mut sigma = [[0.0; 6]; 6];
        for (k, row) in sigma.iter_mut().enumerate() {
            row[k] = self.sim_sigma_diag;
        }
        TrialDesign {
            n_subjects: self.sim_subjects,
            true_sigma: sigma,
            true_sigma_sq: self.sim_sigma_sq,
            adherence: AdherenceSource {
                mean: self.sim_adherence_mean,
                concentration: self.sim_adherence_concentration,
                doses_per_day: self.doses_per_day,
            },
            ic50: Ic50Source { log_s0_median: self.sim_ic50_log_median, failure_prob: self.sim_failure_prob, ..d.ic50 },
            metric: match self.metric {
                ModelLabel::Metric(m) => m,
                ModelLabel::Control => d.metric,
            },
            censoring: self.sim_censoring.then_some(Censoring {
                threshold: self.censor_threshold,
                replacement: self.censor_replacement,
            }),
            integrator: IntegratorConfig { abs_tol: self.sim_abs_tol, ..self.integrator() },
            seed: self.seed,
            ..d
        }
    }
}
