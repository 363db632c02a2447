//! Dormand-Prince 5(4) with step-size control and restart at breakpoints.

use super::{IntegratorConfig, OdeError};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const MAX_STEPS: usize = 200_000;
const MIN_RETRY_STEP: f64 = 1e-8;

/// Right-hand side `f(t, y, probe)`. `probe` is a time strictly inside the
/// current smooth segment; piecewise inputs pick their branch from it.
pub(crate) trait Rhs<const N: usize> {
    fn eval(&self, t: f64, y: &[f64; N], probe: f64) -> [f64; N];
}

impl<const N: usize, F> Rhs<N> for F
where
    F: Fn(f64, &[f64; N], f64) -> [f64; N],
{
    fn eval(&self, t: f64, y: &[f64; N], probe: f64) -> [f64; N] {
        self(t, y, probe)
    }
}

#[inline]
fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (coef, k) in terms {
        let s = h * coef;
        for i in 0..N {
            out[i] += s * k[i];
        }
    }
    out
}

fn error_norm<const N: usize>(v: &[f64; N], y: &[f64; N], y_new: &[f64; N], cfg: &IntegratorConfig) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
        let r = v[i] / sc;
        acc += r * r;
    }
    (acc / N as f64).sqrt()
}

fn initial_step<const N: usize, R: Rhs<N>>(
    rhs: &R,
    t: f64,
    y: &[f64; N],
    f0: &[f64; N],
    probe: f64,
    cfg: &IntegratorConfig,
) -> f64 {
    let scale = |v: &[f64; N], i: usize| cfg.abs_tol + cfg.rel_tol * v[i].abs();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..N {
        let sc = scale(y, i);
        d0 += (y[i] / sc).powi(2);
        d1 += (f0[i] / sc).powi(2);
    }
    d0 = (d0 / N as f64).sqrt();
    d1 = (d1 / N as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = axpy(y, h0, &[(1.0, f0)]);
    let f1 = rhs.eval(t + h0, &y1, probe);
    let mut d2 = 0.0;
    for i in 0..N {
        d2 += ((f1[i] - f0[i]) / scale(y, i)).powi(2);
    }
    d2 = (d2 / N as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

/// Applies the nonnegativity floor: tiny negative round-off is clamped to
/// zero, anything below `-abs_tol` is an instability.
fn floor_state<const N: usize>(y: &mut [f64; N], t: f64, abs_tol: f64) -> Result<(), OdeError> {
    for (i, v) in y.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(OdeError::NonFinite { t });
        }
        if *v < 0.0 {
            if *v > -abs_tol {
                *v = 0.0;
            } else {
                return Err(OdeError::NegativeState { t, component: i, value: *v });
            }
        }
    }
    Ok(())
}

/// Integrator position carried across segments.
struct Cursor<const N: usize> {
    t: f64,
    y: [f64; N],
    k1: [f64; N],
    h: f64,
    steps: usize,
}

/// Integrates from `t = 0` and reports the state at every time in `times`.
///
/// Segments are delimited by `breakpoints` (plus 0 and the last output
/// time). No step crosses a segment boundary.
pub(crate) fn solve<const N: usize, R: Rhs<N>>(
    rhs: &R,
    y0: [f64; N],
    times: &[f64],
    breakpoints: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<[f64; N]>, OdeError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(times.len());
    let Some(&t_end) = times.last() else {
        return Ok(out);
    };
    if !(times[0] >= 0.0) || !t_end.is_finite() {
        return Err(OdeError::BadTimes("output times must be finite and >= 0".into()));
    }
    if times.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(OdeError::BadTimes("output times must be nondecreasing".into()));
    }

    let mut edges = Vec::with_capacity(breakpoints.len() + 2);
    edges.push(0.0);
    edges.extend(breakpoints.iter().copied().filter(|&b| b > 0.0 && b < t_end));
    edges.push(t_end);
    edges.dedup();

    let mut next_out = 0;
    while next_out < times.len() && times[next_out] <= 0.0 {
        out.push(y0);
        next_out += 1;
    }

    let mut cur = Cursor { t: 0.0, y: y0, k1: [0.0; N], h: 0.0, steps: 0 };
    for (s, seg) in edges.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        let probe = 0.5 * (a + b);
        cur.k1 = rhs.eval(cur.t, &cur.y, probe);
        if s == 0 {
            cur.h = initial_step(rhs, cur.t, &cur.y, &cur.k1, probe, cfg);
        }
        while next_out < times.len() && times[next_out] <= b {
            advance(rhs, &mut cur, times[next_out], probe, cfg)?;
            out.push(cur.y);
            next_out += 1;
        }
        advance(rhs, &mut cur, b, probe, cfg)?;
    }
    Ok(out)
}

fn advance<const N: usize, R: Rhs<N>>(
    rhs: &R,
    cur: &mut Cursor<N>,
    target: f64,
    probe: f64,
    cfg: &IntegratorConfig,
) -> Result<(), OdeError> {
    while cur.t < target {
        cur.steps += 1;
        if cur.steps > MAX_STEPS {
            return Err(OdeError::TooManySteps { t: cur.t });
        }
        let h = cur.h.min(cfg.max_step);
        let remaining = target - cur.t;
        let last = h >= remaining;
        let h_try = if last { remaining } else { h };
        if !last && h_try < 1e-12 * cur.t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t: cur.t });
        }
        let t_new = if last { target } else { cur.t + h_try };
        let (y_new, k7, err) = step(rhs, cur.t, &cur.y, &cur.k1, h_try, t_new, probe, cfg);
        if !err.is_finite() {
            cur.h = h_try * FAC_MIN;
            continue;
        }
        if err <= 1.0 {
            let mut y_acc = y_new;
            match floor_state(&mut y_acc, t_new, cfg.abs_tol) {
                Ok(()) => {}
                // an overshoot below zero is treated as a rejected step until h bottoms out
                Err(OdeError::NegativeState { .. }) if h_try > MIN_RETRY_STEP * cur.t.abs().max(1.0) => {
                    cur.h = h_try * 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            }
            cur.t = t_new;
            cur.k1 = if y_acc == y_new { k7 } else { rhs.eval(t_new, &y_acc, probe) };
            cur.y = y_acc;
            let fac = if err == 0.0 { FAC_MAX } else { (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX) };
            // a step shortened to land on a target says little about the next h
            if !last || h_try >= h {
                cur.h = h_try * fac;
            }
        } else {
            cur.h = h_try * (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, 1.0);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn step<const N: usize, R: Rhs<N>>(
    rhs: &R,
    t: f64,
    y: &[f64; N],
    k1: &[f64; N],
    h: f64,
    t_new: f64,
    probe: f64,
    cfg: &IntegratorConfig,
) -> ([f64; N], [f64; N], f64) {
    let y2 = axpy(y, h, &[(A21, k1)]);
    let k2 = rhs.eval(t + C2 * h, &y2, probe);
    let y3 = axpy(y, h, &[(A31, k1), (A32, &k2)]);
    let k3 = rhs.eval(t + C3 * h, &y3, probe);
    let y4 = axpy(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]);
    let k4 = rhs.eval(t + C4 * h, &y4, probe);
    let y5 = axpy(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
    let k5 = rhs.eval(t + C5 * h, &y5, probe);
    let y6 = axpy(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]);
    let k6 = rhs.eval(t_new, &y6, probe);
    let y_new = axpy(y, h, &[(A71, k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
    let k7 = rhs.eval(t_new, &y_new, probe);
    let mut e = [0.0; N];
    for i in 0..N {
        e[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
    }
    let err = error_norm(&e, y, &y_new, cfg);
    (y_new, k7, err)
}
