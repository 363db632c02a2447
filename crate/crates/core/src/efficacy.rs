//! Time-varying drug efficacy built from adherence, IC50 and covariates.
//!
//! For two drugs within a class,
//!
//! ```text
//! γ(t) = (A₁/IC50¹ + A₂/IC50²) / (φ + A₁/IC50¹ + A₂/IC50²),  φ = exp(β₀ + β₁w₁ + β₂w₂)
//! ```
//!
//! where `A_k(t)` is a right-closed step function over visit intervals and
//! `IC50_k(t)` is the natural log of a concentration that moves linearly
//! from `S₀` to `S_f` until the failure time and stays at `S_f` afterwards.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The interpolated concentration must stay above this so that its log is
/// strictly positive.
pub const IC50_GUARD: f64 = 1.0001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EfficacyError {
    #[error("IC50 concentration {value} at t = {t} is at or below the guard {IC50_GUARD}")]
    DegenerateIc50 { t: f64, value: f64 },
    #[error("t = {t} lies outside the adherence profile span [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("invalid adherence profile: {0}")]
    InvalidProfile(String),
    #[error("invalid IC50 trajectory: {0}")]
    InvalidIc50(String),
    #[error("degenerate covariate: {0}")]
    DegenerateCovariate(String),
}

/// A scalar function of time with known discontinuities.
///
/// `eval(t, probe)` returns the value at `t` on the smooth branch that is
/// active around `probe`. Callers integrating between breakpoints pass a
/// probe strictly inside the current segment; point evaluations pass
/// `probe = t`.
pub trait EfficacyFn: Sync {
    fn eval(&self, t: f64, probe: f64) -> f64;
    fn breakpoints(&self) -> &[f64];

    fn at(&self, t: f64) -> f64 {
        self.eval(t, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl EfficacyFn for Constant {
    fn eval(&self, _t: f64, _probe: f64) -> f64 {
        self.0
    }
    fn breakpoints(&self) -> &[f64] {
        &[]
    }
}

/// Step function: `values[k]` holds on `(breaks[k-1], breaks[k]]`, with the
/// first value extending to −∞ and the last to +∞.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn new(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self, EfficacyError> {
        if values.len() != breaks.len() + 1 {
            return Err(EfficacyError::InvalidProfile("need one more value than breaks".into()));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(EfficacyError::InvalidProfile("breaks must be strictly increasing".into()));
        }
        Ok(Self { breaks, values })
    }
}

impl EfficacyFn for PiecewiseConstant {
    fn eval(&self, _t: f64, probe: f64) -> f64 {
        self.values[self.breaks.partition_point(|&b| b < probe)]
    }
    fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ic50Trajectory {
    pub s0: f64,
    pub sf: f64,
    /// Failure time in days; `None` when no failure assay exists.
    pub tf: Option<f64>,
}

impl Ic50Trajectory {
    pub fn constant(s0: f64) -> Self {
        Self { s0, sf: s0, tf: None }
    }

    pub fn validate(&self) -> Result<(), EfficacyError> {
        if !(self.s0 > 0.0) || !self.s0.is_finite() {
            return Err(EfficacyError::InvalidIc50(format!("s0 must be positive, got {}", self.s0)));
        }
        if let Some(tf) = self.tf {
            if !(tf > 0.0) || !tf.is_finite() || !(self.sf > 0.0) || !self.sf.is_finite() {
                return Err(EfficacyError::InvalidIc50(format!("need tf > 0 and sf > 0, got {self:?}")));
            }
        }
        // the interpolant is linear, so checking both ends covers [0, tf]
        for (t, v) in [(0.0, self.s0), (self.tf.unwrap_or(0.0), self.effective_sf())] {
            if !(v > IC50_GUARD) {
                return Err(EfficacyError::DegenerateIc50 { t, value: v });
            }
        }
        Ok(())
    }

    fn effective_sf(&self) -> f64 {
        if self.tf.is_some() {
            self.sf
        } else {
            self.s0
        }
    }

    #[inline]
    fn value_on_branch(&self, t: f64, probe: f64) -> f64 {
        match self.tf {
            Some(tf) if probe < tf => (self.s0 + (self.sf - self.s0) / tf * t).ln(),
            Some(_) => self.sf.ln(),
            None => self.s0.ln(),
        }
    }
}

/// Natural-log IC50 at day `t`.
pub fn eval_ic50(traj: &Ic50Trajectory, t: f64) -> Result<f64, EfficacyError> {
    if !(t >= 0.0) {
        return Err(EfficacyError::InvalidIc50(format!("negative time {t}")));
    }
    let conc = match traj.tf {
        Some(tf) if t < tf => traj.s0 + (traj.sf - traj.s0) / tf * t,
        Some(_) => traj.sf,
        None => traj.s0,
    };
    if !(conc > IC50_GUARD) {
        return Err(EfficacyError::DegenerateIc50 { t, value: conc });
    }
    Ok(conc.ln())
}

/// Adherence rates on right-closed intervals `(T_k, T_{k+1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceProfile {
    pub knots: Vec<f64>,
    pub rates: Vec<f64>,
}

impl AdherenceProfile {
    pub fn new(knots: Vec<f64>, rates: Vec<f64>) -> Result<Self, EfficacyError> {
        let p = Self { knots, rates };
        p.validate()?;
        Ok(p)
    }

    /// A profile equal to one over `[start, end]`.
    pub fn perfect(start: f64, end: f64) -> Self {
        Self { knots: vec![start, end], rates: vec![1.0] }
    }

    pub fn validate(&self) -> Result<(), EfficacyError> {
        if self.knots.len() < 2 || self.rates.len() + 1 != self.knots.len() {
            return Err(EfficacyError::InvalidProfile(format!(
                "{} knots need {} rates, got {}",
                self.knots.len(),
                self.knots.len().saturating_sub(1),
                self.rates.len()
            )));
        }
        if self.knots.iter().any(|k| !k.is_finite()) || self.knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(EfficacyError::InvalidProfile("knots must be finite and strictly increasing".into()));
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(EfficacyError::InvalidProfile(format!("rate {r} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn span(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().expect("validated profile has knots"))
    }

    /// Interval index for `t`, clamped to the first/last interval.
    #[inline]
    fn interval(&self, t: f64) -> usize {
        let k = self.knots.partition_point(|&x| x < t);
        k.clamp(1, self.rates.len()) - 1
    }
}

/// Adherence rate at day `t`.
pub fn eval_adherence(profile: &AdherenceProfile, t: f64) -> Result<f64, EfficacyError> {
    let (lo, hi) = profile.span();
    if !(t >= lo && t <= hi) {
        return Err(EfficacyError::OutOfRange { t, lo, hi });
    }
    Ok(profile.rates[profile.interval(t)])
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariatePair {
    pub w1: f64,
    pub w2: f64,
}

/// Cohort statistics used to standardize the raw covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransform {
    pub mean_log10_vl: f64,
    pub sd_log10_vl: f64,
    pub mean_cd4: f64,
    pub sd_cd4: f64,
}

impl CovariateTransform {
    pub fn apply(&self, log10_vl: f64, cd4: f64) -> CovariatePair {
        CovariatePair {
            w1: (log10_vl - self.mean_log10_vl) / self.sd_log10_vl,
            w2: (cd4 - self.mean_cd4) / self.sd_cd4,
        }
    }
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let ss: f64 = xs.map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Centers and scales `(baseline log₁₀ VL, baseline CD4)` by the cohort mean
/// and sample (n − 1) standard deviation.
pub fn standardize_covariates(raw: &[(f64, f64)]) -> Result<(Vec<CovariatePair>, CovariateTransform), EfficacyError> {
    if raw.len() < 2 {
        return Err(EfficacyError::DegenerateCovariate(format!("need at least 2 subjects, got {}", raw.len())));
    }
    if raw.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(EfficacyError::DegenerateCovariate("non-finite covariate value".into()));
    }
    let (m1, s1) = mean_sd(raw.iter().map(|r| r.0));
    let (m2, s2) = mean_sd(raw.iter().map(|r| r.1));
    for (name, sd) in [("baseline log10 viral load", s1), ("baseline CD4", s2)] {
        if !(sd > 0.0) {
            return Err(EfficacyError::DegenerateCovariate(format!("{name} has zero spread")));
        }
    }
    let tr = CovariateTransform { mean_log10_vl: m1, sd_log10_vl: s1, mean_cd4: m2, sd_cd4: s2 };
    Ok((raw.iter().map(|&(a, b)| tr.apply(a, b)).collect(), tr))
}

/// Per-subject inputs to the two-drug efficacy term.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficacyInputs {
    pub adherence1: AdherenceProfile,
    pub adherence2: AdherenceProfile,
    pub ic50_1: Ic50Trajectory,
    pub ic50_2: Ic50Trajectory,
    pub covariates: CovariatePair,
    breaks: Vec<f64>,
}

impl EfficacyInputs {
    pub fn new(
        adherence1: AdherenceProfile,
        adherence2: AdherenceProfile,
        ic50_1: Ic50Trajectory,
        ic50_2: Ic50Trajectory,
        covariates: CovariatePair,
    ) -> Result<Self, EfficacyError> {
        adherence1.validate()?;
        adherence2.validate()?;
        ic50_1.validate()?;
        ic50_2.validate()?;
        let mut breaks: Vec<f64> = adherence1
            .knots
            .iter()
            .chain(&adherence2.knots)
            .copied()
            .chain(ic50_1.tf)
            .chain(ic50_2.tf)
            .collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        Ok(Self { adherence1, adherence2, ic50_1, ic50_2, covariates, breaks })
    }

    /// Common span of both adherence profiles.
    pub fn span(&self) -> (f64, f64) {
        let (a, b) = self.adherence1.span();
        let (c, d) = self.adherence2.span();
        (a.max(c), b.min(d))
    }

    /// Drug exposure `A₁/IC50¹ + A₂/IC50²` on the branch active around `probe`.
    #[inline]
    pub fn exposure(&self, t: f64, probe: f64) -> f64 {
        let a1 = self.adherence1.rates[self.adherence1.interval(probe)];
        let a2 = self.adherence2.rates[self.adherence2.interval(probe)];
        a1 / self.ic50_1.value_on_branch(t, probe) + a2 / self.ic50_2.value_on_branch(t, probe)
    }

    /// `φ = exp(β₀ + β₁w₁ + β₂w₂)`.
    pub fn phi(&self, beta: [f64; 3]) -> f64 {
        (beta[0] + beta[1] * self.covariates.w1 + beta[2] * self.covariates.w2).exp()
    }

    pub fn curve(&self, phi: f64) -> SubjectCurve<'_> {
        SubjectCurve { inputs: self, phi }
    }
}

#[inline]
fn emax(exposure: f64, phi: f64) -> f64 {
    exposure / (phi + exposure)
}

/// Efficacy at day `t` for covariate effects `beta = (β₀, β₁, β₂)`.
pub fn gamma(inputs: &EfficacyInputs, beta: [f64; 3], t: f64) -> Result<f64, EfficacyError> {
    let a1 = eval_adherence(&inputs.adherence1, t)?;
    let a2 = eval_adherence(&inputs.adherence2, t)?;
    let x = a1 / eval_ic50(&inputs.ic50_1, t)? + a2 / eval_ic50(&inputs.ic50_2, t)?;
    Ok(emax(x, inputs.phi(beta)))
}

/// Constant efficacy of the control model: adherence and IC50 fixed at one,
/// covariates at zero.
pub fn gamma_control(beta0: f64, _t: f64) -> f64 {
    2.0 / (beta0.exp() + 2.0)
}

/// Efficacy curve of one subject at a fixed conversion factor `φ`.
#[derive(Debug, Clone, Copy)]
pub struct SubjectCurve<'a> {
    inputs: &'a EfficacyInputs,
    phi: f64,
}

impl EfficacyFn for SubjectCurve<'_> {
    #[inline]
    fn eval(&self, t: f64, probe: f64) -> f64 {
        emax(self.inputs.exposure(t, probe), self.phi)
    }
    fn breakpoints(&self) -> &[f64] {
        &self.inputs.breaks
    }
}

/// Which efficacy term a subject is fitted with.
#[derive(Debug, Clone, PartialEq)]
pub enum EfficacyModel {
    /// Adherence, IC50 and covariates.
    Full(EfficacyInputs),
    /// `γ = 2 / (φ + 2)`, constant in time.
    Control,
}

impl EfficacyModel {
    /// Evaluates the model at subject-level `φ`, handing the resulting curve to `f`.
    pub fn with_curve<R>(&self, phi: f64, f: impl FnOnce(&dyn EfficacyFn) -> R) -> R {
        match self {
            Self::Full(inputs) => f(&inputs.curve(phi)),
            Self::Control => f(&Constant(2.0 / (phi + 2.0))),
        }
    }
}
