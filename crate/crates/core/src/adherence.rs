//! MEMS bottle-opening logs summarized into per-visit adherence rates.
//!
//! A metric `Mf.l` averages dosing events over an `l`-week window ending
//! `f` weeks before each viral-load visit; `M` averages everything since the
//! previous visit. For the day-56 visit:
//!
//! | metric | days  | metric | days  | metric | days  |
//! |--------|-------|--------|-------|--------|-------|
//! | M      | 28–55 | M1.1   | 43–49 | M2.3   | 22–42 |
//! | M0.1   | 49–55 | M1.2   | 36–49 | M3.1   | 29–35 |
//! | M0.2   | 42–55 | M1.3   | 29–49 | M3.2   | 22–35 |
//! | M0.3   | 35–55 | M2.1   | 36–42 | M3.3   | 15–35 |
//! |        |       | M2.2   | 29–42 |        |       |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::efficacy::{AdherenceProfile, EfficacyError};

/// Rate used when the first interval's window is empty after clipping at day 0.
pub const FIRST_INTERVAL_DEFAULT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdherenceError {
    #[error("MEMS events must be finite and sorted")]
    UnsortedEvents,
    #[error("doses per day must be at least 1")]
    NoDoses,
    #[error("visit schedule must start at day 0 and be strictly increasing, got {0:?}")]
    BadSchedule(Vec<i64>),
    #[error("visit index {index} out of range for {len} visits")]
    BadVisit { index: usize, len: usize },
    #[error("unknown adherence metric {0:?}")]
    UnknownMetric(String),
    #[error("window start {0} after end {1}")]
    InvertedWindow(i64, i64),
    #[error(transparent)]
    Profile(#[from] EfficacyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemsLog {
    /// Opening times in (fractional) study days.
    pub events: Vec<f64>,
    pub doses_per_day: u32,
}

impl MemsLog {
    pub fn new(mut events: Vec<f64>, doses_per_day: u32) -> Result<Self, AdherenceError> {
        if events.iter().any(|e| !e.is_finite()) {
            return Err(AdherenceError::UnsortedEvents);
        }
        events.sort_by(f64::total_cmp);
        let log = Self { events, doses_per_day };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<(), AdherenceError> {
        if self.doses_per_day == 0 {
            return Err(AdherenceError::NoDoses);
        }
        if self.events.iter().any(|e| !e.is_finite()) || self.events.windows(2).any(|w| w[1] < w[0]) {
            return Err(AdherenceError::UnsortedEvents);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitSchedule {
    pub visit_days: Vec<i64>,
}

impl VisitSchedule {
    pub fn new(visit_days: Vec<i64>) -> Result<Self, AdherenceError> {
        if visit_days.first() != Some(&0) || visit_days.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AdherenceError::BadSchedule(visit_days));
        }
        Ok(Self { visit_days })
    }

    /// Protocol schedule in weeks, converted to days.
    pub fn from_weeks(weeks: &[i64]) -> Result<Self, AdherenceError> {
        Self::new(weeks.iter().map(|w| 7 * w).collect())
    }
}

/// One of the 13 MEMS summary metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricSpec {
    /// Full interval since the previous visit.
    M,
    /// Window of `length_weeks` ending `frame_weeks` before the visit.
    Window { frame_weeks: u8, length_weeks: u8 },
}

impl MetricSpec {
    /// All metrics in table order.
    pub fn all() -> [MetricSpec; 13] {
        let mut out = [MetricSpec::M; 13];
        let mut i = 1;
        for frame_weeks in 0..=3 {
            for length_weeks in 1..=3 {
                out[i] = MetricSpec::Window { frame_weeks, length_weeks };
                i += 1;
            }
        }
        out
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::M => write!(f, "M"),
            Self::Window { frame_weeks, length_weeks } => write!(f, "M{frame_weeks}.{length_weeks}"),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = AdherenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::all().into_iter().find(|m| m.to_string() == s).ok_or_else(|| AdherenceError::UnknownMetric(s.to_string()))
    }
}

/// Inclusive day range for the visit at `visit_index`, clipped at day 0.
/// Returns `None` when nothing remains after clipping.
pub fn window_for_visit(
    spec: MetricSpec,
    schedule: &VisitSchedule,
    visit_index: usize,
) -> Result<Option<(i64, i64)>, AdherenceError> {
    let len = schedule.visit_days.len();
    if visit_index == 0 || visit_index >= len {
        return Err(AdherenceError::BadVisit { index: visit_index, len });
    }
    let visit = schedule.visit_days[visit_index];
    let (start, end) = match spec {
        MetricSpec::M => (schedule.visit_days[visit_index - 1], visit - 1),
        MetricSpec::Window { frame_weeks, length_weeks } => {
            // a zero-week frame ends the day before the visit,
            // otherwise the window ends exactly f weeks before it
            let end = visit - (7 * i64::from(frame_weeks)).max(1);
            (end - 7 * i64::from(length_weeks) + 1, end)
        }
    };
    let start = start.max(0);
    Ok((end >= start).then_some((start, end)))
}

/// Fraction of prescribed doses taken on days `start..=end`, counting at
/// most `doses_per_day` openings per calendar day.
pub fn adherence_rate(log: &MemsLog, window: (i64, i64)) -> Result<f64, AdherenceError> {
    let (start, end) = window;
    if start > end {
        return Err(AdherenceError::InvertedWindow(start, end));
    }
    let cap = u64::from(log.doses_per_day);
    let lo = log.events.partition_point(|&e| e < start as f64);
    let hi = log.events.partition_point(|&e| e < (end + 1) as f64);
    let mut taken = 0u64;
    let mut day = i64::MIN;
    let mut today = 0u64;
    for &e in &log.events[lo..hi] {
        let d = e.floor() as i64;
        if d != day {
            taken += today.min(cap);
            day = d;
            today = 0;
        }
        today += 1;
    }
    taken += today.min(cap);
    let days = (end - start + 1) as u64;
    Ok(taken as f64 / (cap * days) as f64)
}

/// Per-visit rates and whether each came from the carry-forward rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBuild {
    pub profile: AdherenceProfile,
    pub windows: Vec<Option<(i64, i64)>>,
    pub carried: Vec<bool>,
}

/// Adherence profile with one rate per between-visit interval, also
/// reporting the window behind each rate.
pub fn build_profile_detailed(
    log: &MemsLog,
    schedule: &VisitSchedule,
    spec: MetricSpec,
) -> Result<ProfileBuild, AdherenceError> {
    log.validate()?;
    let n = schedule.visit_days.len();
    if n < 2 {
        return Err(AdherenceError::BadSchedule(schedule.visit_days.clone()));
    }
    let mut rates = Vec::with_capacity(n - 1);
    let mut windows = Vec::with_capacity(n - 1);
    let mut carried = Vec::with_capacity(n - 1);
    for k in 1..n {
        let w = window_for_visit(spec, schedule, k)?;
        let rate = match w {
            Some(w) => adherence_rate(log, w)?,
            None => rates.last().copied().unwrap_or(FIRST_INTERVAL_DEFAULT),
        };
        rates.push(rate);
        windows.push(w);
        carried.push(w.is_none());
    }
    let knots = schedule.visit_days.iter().map(|&d| d as f64).collect();
    Ok(ProfileBuild { profile: AdherenceProfile::new(knots, rates)?, windows, carried })
}

pub fn build_profile(log: &MemsLog, schedule: &VisitSchedule, spec: MetricSpec) -> Result<AdherenceProfile, AdherenceError> {
    Ok(build_profile_detailed(log, schedule, spec)?.profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn daily(days: std::ops::Range<i64>, per_day: usize) -> Vec<f64> {
        days.flat_map(|d| (0..per_day).map(move |j| d as f64 + 0.3 + 0.4 * j as f64)).collect()
    }

    fn protocol() -> VisitSchedule {
        VisitSchedule::from_weeks(&[0, 2, 4, 8, 12, 16, 24, 32, 40, 48, 56, 64, 72]).unwrap()
    }

    #[test]
    fn week_eight_windows() {
        let expected = [
            ("M", 28, 55),
            ("M0.1", 49, 55),
            ("M0.2", 42, 55),
            ("M0.3", 35, 55),
            ("M1.1", 43, 49),
            ("M1.2", 36, 49),
            ("M1.3", 29, 49),
            ("M2.1", 36, 42),
            ("M2.2", 29, 42),
            ("M2.3", 22, 42),
            ("M3.1", 29, 35),
            ("M3.2", 22, 35),
            ("M3.3", 15, 35),
        ];
        let s = protocol();
        let idx = s.visit_days.iter().position(|&d| d == 56).unwrap();
        for (name, a, b) in expected {
            let m: MetricSpec = name.parse().unwrap();
            assert_eq!(window_for_visit(m, &s, idx).unwrap(), Some((a, b)), "{name}");
        }
    }

    #[test]
    fn metric_names_round_trip() {
        let names: Vec<String> = MetricSpec::all().iter().map(|m| m.name()).collect();
        assert_eq!(names[0], "M");
        assert_eq!(names[12], "M3.3");
        assert!("M4.1".parse::<MetricSpec>().is_err());
        assert!("control".parse::<MetricSpec>().is_err());
    }

    #[test]
    fn clipping_at_day_zero() {
        let s = protocol();
        // week-2 visit: M3.3 would end on day -8
        assert_eq!(window_for_visit("M3.3".parse().unwrap(), &s, 1).unwrap(), None);
        assert_eq!(window_for_visit("M0.3".parse().unwrap(), &s, 1).unwrap(), Some((0, 13)));
        assert_eq!(window_for_visit(MetricSpec::M, &s, 1).unwrap(), Some((0, 13)));
        assert!(window_for_visit(MetricSpec::M, &s, 0).is_err());
    }

    #[test]
    fn rate_examples() {
        let full = MemsLog::new(daily(0..14, 2), 2).unwrap();
        assert_eq!(adherence_rate(&full, (0, 13)).unwrap(), 1.0);
        let none = MemsLog::new(vec![], 2).unwrap();
        assert_eq!(adherence_rate(&none, (0, 13)).unwrap(), 0.0);
        let mut ev = daily(0..7, 2);
        ev.extend(daily(7..14, 1));
        let mixed = MemsLog::new(ev, 2).unwrap();
        assert_eq!(adherence_rate(&mixed, (0, 13)).unwrap(), 0.75);
    }

    #[test]
    fn curiosity_openings_are_capped() {
        let log = MemsLog::new(daily(0..10, 5), 2).unwrap();
        assert_eq!(adherence_rate(&log, (0, 9)).unwrap(), 1.0);
    }

    #[test]
    fn fractional_events_bin_by_floor() {
        let log = MemsLog::new(vec![4.999, 5.0, 5.999], 2).unwrap();
        assert_eq!(adherence_rate(&log, (4, 4)).unwrap(), 0.5);
        assert_eq!(adherence_rate(&log, (5, 5)).unwrap(), 1.0);
    }

    #[test]
    fn perfect_log_is_metric_invariant() {
        let s = protocol();
        let log = MemsLog::new(daily(0..504, 2), 2).unwrap();
        for m in MetricSpec::all() {
            let p = build_profile(&log, &s, m).unwrap();
            assert!(p.rates.iter().all(|&r| r == 1.0), "{m}");
        }
    }

    #[test]
    fn m_profile_is_between_visit_fraction() {
        let s = protocol();
        let ev: Vec<f64> = (0..504).filter(|d| d % 3 != 0).map(|d| d as f64 + 0.5).collect();
        let log = MemsLog::new(ev.clone(), 2).unwrap();
        let p = build_profile(&log, &s, MetricSpec::M).unwrap();
        for (k, w) in s.visit_days.windows(2).enumerate() {
            let count = ev.iter().filter(|&&e| e >= w[0] as f64 && e < w[1] as f64).count();
            let expect = count as f64 / (2 * (w[1] - w[0])) as f64;
            assert!((p.rates[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn late_openings_move_m_but_not_m22() {
        let s = protocol();
        let base = daily(0..504, 1);
        let mut extra = base.clone();
        extra.extend((50..56).map(|d| d as f64 + 0.9));
        let a = MemsLog::new(base, 2).unwrap();
        let b = MemsLog::new(extra, 2).unwrap();
        let k = s.visit_days.iter().position(|&d| d == 56).unwrap() - 1;
        let m22: MetricSpec = "M2.2".parse().unwrap();
        assert_eq!(build_profile(&a, &s, m22).unwrap().rates[k], build_profile(&b, &s, m22).unwrap().rates[k]);
        assert!(build_profile(&b, &s, MetricSpec::M).unwrap().rates[k] > build_profile(&a, &s, MetricSpec::M).unwrap().rates[k]);
    }

    #[test]
    fn carry_forward_and_first_default() {
        let s = VisitSchedule::new(vec![0, 7, 14, 70]).unwrap();
        let log = MemsLog::new(daily(0..70, 1), 2).unwrap();
        let b = build_profile_detailed(&log, &s, "M3.3".parse().unwrap()).unwrap();
        assert_eq!(b.carried, vec![true, true, false]);
        assert_eq!(b.profile.rates[0], FIRST_INTERVAL_DEFAULT);
        assert_eq!(b.profile.rates[1], FIRST_INTERVAL_DEFAULT);
        assert_eq!(b.profile.rates[2], 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(VisitSchedule::new(vec![1, 14]).is_err());
        assert!(VisitSchedule::new(vec![0, 14, 14]).is_err());
        assert!(MemsLog::new(vec![1.0], 0).is_err());
        assert!(MemsLog { events: vec![3.0, 1.0], doses_per_day: 2 }.validate().is_err());
        let log = MemsLog::new(vec![], 2).unwrap();
        assert!(adherence_rate(&log, (5, 4)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rates_bounded_and_monotone(
                events in proptest::collection::vec(0.0f64..200.0, 0..400),
                extra in proptest::collection::vec(0.0f64..200.0, 0..50),
                start in 0i64..150, len in 1i64..50,
            ) {
                let a = MemsLog::new(events.clone(), 2).unwrap();
                let mut more = events;
                more.extend(extra);
                let b = MemsLog::new(more, 2).unwrap();
                let w = (start, start + len - 1);
                let ra = adherence_rate(&a, w).unwrap();
                let rb = adherence_rate(&b, w).unwrap();
                prop_assert!((0.0..=1.0).contains(&ra));
                prop_assert!(rb >= ra);
            }
        }
    }
}
