//! Rescaled target-cell / infected-cell / virus model and its integrator.
//!
//! The state is dimensionless: `T̃ = (d_T/λ)T`, `T̃* = (δ/λ)T*`,
//! `Ṽ = (k/d_T)V`, and the dynamics under drug efficacy `γ(t)` are
//!
//! ```text
//! dT̃/dt  = d_T (1 − T̃ − (1 − γ) T̃ Ṽ)
//! dT̃*/dt = δ ((1 − γ) T̃ Ṽ − T̃*)
//! dṼ/dt  = c (R T̃* − Ṽ)
//! ```
//!
//! Observed viral load is `V = ρ · 10⁴ · Ṽ` copies/ml.

mod dopri;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::efficacy::EfficacyFn;

/// Copies/ml represented by one unit of `ρ`.
pub const RHO_UNIT: f64 = 10_000.0;

/// Lower clamp applied to `Ṽ` before taking log₁₀.
pub const V_TILDE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid output times: {0}")]
    BadTimes(String),
    #[error("invalid integrator configuration: {0}")]
    BadConfig(String),
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("step budget exhausted at t = {t}")]
    TooManySteps { t: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("state component {component} fell to {value:e} at t = {t}")]
    NegativeState { t: f64, component: usize, value: f64 },
}

impl OdeError {
    /// Time of failure, when the error arose during integration.
    pub fn failure_time(&self) -> Option<f64> {
        match self {
            Self::StepUnderflow { t } | Self::TooManySteps { t } | Self::NonFinite { t } => Some(*t),
            Self::NegativeState { t, .. } => Some(*t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledState {
    pub t_tilde: f64,
    pub ts_tilde: f64,
    pub v_tilde: f64,
}

impl ScaledState {
    fn from_array(a: [f64; 3]) -> Self {
        Self { t_tilde: a[0], ts_tilde: a[1], v_tilde: a[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.t_tilde, self.ts_tilde, self.v_tilde]
    }
}

/// Natural-log subject-level dynamic parameters, in the fixed order
/// `(log c, log δ, log d_T, log ρ, log R, log φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub log_c: f64,
    pub log_delta: f64,
    pub log_dt: f64,
    pub log_rho: f64,
    pub log_r: f64,
    pub log_phi: f64,
}

impl SubjectParams {
    pub const DIM: usize = 6;
    pub const NAMES: [&'static str; 6] = ["log_c", "log_delta", "log_dT", "log_rho", "log_R", "log_phi"];

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { log_c: a[0], log_delta: a[1], log_dt: a[2], log_rho: a[3], log_r: a[4], log_phi: a[5] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.log_c, self.log_delta, self.log_dt, self.log_rho, self.log_r, self.log_phi]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn c(&self) -> f64 {
        self.log_c.exp()
    }
    pub fn delta(&self) -> f64 {
        self.log_delta.exp()
    }
    pub fn d_t(&self) -> f64 {
        self.log_dt.exp()
    }
    pub fn rho(&self) -> f64 {
        self.log_rho.exp()
    }
    pub fn r0(&self) -> f64 {
        self.log_r.exp()
    }
    pub fn phi(&self) -> f64 {
        self.log_phi.exp()
    }

    /// Pre-treatment steady-state viral level `Ṽ₀ = R − 1`.
    pub fn steady_state_v0(&self) -> Result<f64, OdeError> {
        let r = self.r0();
        if !(r > 1.0) || !r.is_finite() {
            return Err(OdeError::Domain(format!("R = {r} admits no infected steady state")));
        }
        Ok(r - 1.0)
    }
}

/// Parameters of the original (unscaled) model in natural units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnscaledParams {
    pub lambda: f64,
    pub d_t: f64,
    pub k: f64,
    pub delta: f64,
    pub n_burst: f64,
    pub c: f64,
}

impl UnscaledParams {
    /// Basic reproductive ratio `kNλ / (c d_T)`.
    pub fn reproductive_ratio(&self) -> f64 {
        self.k * self.n_burst * self.lambda / (self.c * self.d_t)
    }

    /// Maps a natural-units state onto the rescaled coordinates.
    pub fn rescale(&self, natural: [f64; 3]) -> ScaledState {
        ScaledState {
            t_tilde: self.d_t / self.lambda * natural[0],
            ts_tilde: self.delta / self.lambda * natural[1],
            v_tilde: self.k / self.d_t * natural[2],
        }
    }

    /// Inverse of [`UnscaledParams::rescale`].
    pub fn unscale(&self, s: ScaledState) -> [f64; 3] {
        [
            s.t_tilde * self.lambda / self.d_t,
            s.ts_tilde * self.lambda / self.delta,
            s.v_tilde * self.d_t / self.k,
        ]
    }

    fn validate(&self) -> Result<(), OdeError> {
        let all = [self.lambda, self.d_t, self.k, self.delta, self.n_burst, self.c];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(OdeError::Domain(format!("unscaled parameters must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Days.
    pub max_step: f64,
    /// Extra discontinuity times (days), merged with those of the efficacy input.
    pub breakpoints: Vec<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-8, abs_tol: 1e-10, max_step: 50.0, breakpoints: Vec::new() }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        Self { rel_tol, abs_tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.max_step > 0.0) {
            return Err(OdeError::BadConfig("tolerances and max_step must be positive".into()));
        }
        if self.breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(OdeError::BadConfig("breakpoints must be strictly increasing".into()));
        }
        Ok(())
    }

    fn merged_breakpoints(&self, extra: &[f64]) -> Vec<f64> {
        let mut all: Vec<f64> = self.breakpoints.iter().chain(extra).copied().filter(|b| b.is_finite()).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }
}

/// Steady state before therapy for a given initial viral level.
pub fn steady_state_init(v0_tilde: f64) -> Result<ScaledState, OdeError> {
    if !(v0_tilde > 0.0) || !v0_tilde.is_finite() {
        return Err(OdeError::Domain(format!("initial viral level must be positive, got {v0_tilde}")));
    }
    let t0 = 1.0 / (1.0 + v0_tilde);
    Ok(ScaledState { t_tilde: t0, ts_tilde: 1.0 - t0, v_tilde: v0_tilde })
}

/// Right-hand side of the rescaled system at efficacy `gamma`.
#[inline]
pub fn scaled_rhs(c: f64, delta: f64, d_t: f64, r0: f64, gamma: f64, y: &[f64; 3]) -> [f64; 3] {
    let infection = (1.0 - gamma) * y[0] * y[2];
    [d_t * (1.0 - y[0] - infection), delta * (infection - y[1]), c * (r0 * y[1] - y[2])]
}

/// Solves the rescaled system from its pre-treatment steady state at `v0_tilde`.
pub fn integrate_scaled<E: EfficacyFn + ?Sized>(
    params: &SubjectParams,
    efficacy: &E,
    v0_tilde: f64,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<ScaledState>, OdeError> {
    if !params.is_finite() {
        return Err(OdeError::Domain("non-finite subject parameters".into()));
    }
    let y0 = steady_state_init(v0_tilde)?.to_array();
    let (c, delta, d_t, r0) = (params.c(), params.delta(), params.d_t(), params.r0());
    let rhs = |t: f64, y: &[f64; 3], probe: f64| scaled_rhs(c, delta, d_t, r0, efficacy.eval(t, probe), y);
    let breaks = cfg.merged_breakpoints(efficacy.breakpoints());
    let states = dopri::solve(&rhs, y0, times, &breaks, cfg)?;
    Ok(states.into_iter().map(ScaledState::from_array).collect())
}

/// Solves the original model in natural units.
pub fn integrate_unscaled<E: EfficacyFn + ?Sized>(
    params: &UnscaledParams,
    efficacy: &E,
    initial: [f64; 3],
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<[f64; 3]>, OdeError> {
    params.validate()?;
    if initial.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(OdeError::Domain(format!("initial state must be nonnegative: {initial:?}")));
    }
    let p = *params;
    let rhs = move |t: f64, y: &[f64; 3], probe: f64| {
        let infection = (1.0 - efficacy.eval(t, probe)) * p.k * y[0] * y[2];
        [p.lambda - p.d_t * y[0] - infection, infection - p.delta * y[1], p.n_burst * p.delta * y[1] - p.c * y[2]]
    };
    let breaks = cfg.merged_breakpoints(efficacy.breakpoints());
    dopri::solve(&rhs, initial, times, &breaks, cfg)
}

/// `log₁₀(ρ · 10⁴ · Ṽ)` in copies/ml.
pub fn observed_log10_vl(params: &SubjectParams, v_tilde: f64) -> Result<f64, OdeError> {
    if !(v_tilde > 0.0) || !v_tilde.is_finite() {
        return Err(OdeError::Domain(format!("viral level must be positive, got {v_tilde}")));
    }
    Ok((params.log_rho + v_tilde.ln()) / std::f64::consts::LN_10 + RHO_UNIT.log10())
}

/// Observation map with the `Ṽ` floor applied first.
pub fn observed_log10_vl_floored(params: &SubjectParams, v_tilde: f64) -> f64 {
    let v = if v_tilde.is_nan() { V_TILDE_FLOOR } else { v_tilde.max(V_TILDE_FLOOR) };
    observed_log10_vl(params, v).expect("floored value is positive")
}

/// Predicted log₁₀ viral loads at `times`, starting from the steady state `Ṽ₀ = R − 1`.
pub fn predict_log10_vl<E: EfficacyFn + ?Sized>(
    params: &SubjectParams,
    efficacy: &E,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, OdeError> {
    let v0 = params.steady_state_v0()?;
    let states = integrate_scaled(params, efficacy, v0, times, cfg)?;
    Ok(states.iter().map(|s| observed_log10_vl_floored(params, s.v_tilde)).collect())
}
