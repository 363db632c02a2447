//! The four commands: fit, compare, simstudy and summarize-adherence.
//!
//! Outputs depend only on the data, the configuration and the seed; thread
//! count and output location do not change a single byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::bundle::StudyBundle;
use super::summary::{interval95, Interval};
use super::{csv_text, write_with_header, ModelLabel, RunConfig};
use crate::adherence::{build_profile_detailed, MemsLog, MetricSpec, FIRST_INTERVAL_DEFAULT};
use crate::dic::{dic_from_chain, rank_models, DicSummary};
use crate::error::{Error, Result};
use crate::ode::SubjectParams;
use crate::sampler::{predict_subject, run_chain, ChainOutput, ObservationSet, SamplerError, Subject, MU_NAMES};
use crate::simstudy::run_replications;

pub const SAMPLES_FILE: &str = "samples.csv";
pub const POSTERIOR_FILE: &str = "posterior_summary.csv";
pub const CURVES_FILE: &str = "fitted_curves.csv";
pub const OBSERVED_FILE: &str = "observed_vs_fitted.csv";
pub const FIT_SUMMARY_FILE: &str = "fit_summary.json";
pub const FAILURE_FILE: &str = "failure.json";
pub const DIC_FILE: &str = "dic.csv";
pub const DIC_FAILURES_FILE: &str = "dic_failures.csv";
pub const RECOVERY_FILE: &str = "recovery.csv";
pub const REPLICATES_FILE: &str = "replicates.csv";
pub const ADHERENCE_FILE: &str = "adherence.csv";
pub const WINDOWS_FILE: &str = "adherence_windows.csv";

const SUBJECT_PARAMS: [&str; 6] = SubjectParams::NAMES;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn config_object(cfg: &RunConfig) -> Value {
    Value::Object(cfg.echo_entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect::<Map<_, _>>())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Modelling conventions not fixed by the model itself, echoed in summaries.
fn conventions() -> Value {
    json!({
        "gamma_prior": "shape-rate: Ga(a, b) has mean a/b",
        "wishart_prior": "E[Sigma^-1] = nu * Omega",
        "covariate_sd": "sample (n - 1) standard deviation over the cohort",
        "first_interval_default": FIRST_INTERVAL_DEFAULT,
        "empty_window": "carry the previous interval's rate forward",
        "missing_drug_2": "drug 1 inputs used for both efficacy terms",
    })
}

fn f(v: f64) -> String {
    v.to_string()
}

pub struct FitResult {
    pub obs: ObservationSet,
    pub chain: ChainOutput,
    pub dic: DicSummary,
}

fn fit_model(bundle: &StudyBundle, cfg: &RunConfig, label: ModelLabel) -> Result<FitResult> {
    let obs = bundle.observations(label, cfg.doses_per_day)?;
    let chain = run_chain(&obs, &cfg.hyperpriors(), &cfg.mcmc())?;
    let dic = dic_from_chain(&label.to_string(), &chain, &obs)?;
    Ok(FitResult { obs, chain, dic })
}

/// Population draws: `μ`, `σ²`, the upper triangle of `Σ`, and the deviance.
fn samples_csv(chain: &ChainOutput) -> Result<String> {
    let mut header: Vec<String> = vec!["draw".into()];
    header.extend(MU_NAMES.iter().map(|s| s.to_string()));
    header.push("sigma_sq".into());
    for r in 0..6 {
        for c in r..6 {
            header.push(format!("Sigma_{}_{}", SUBJECT_PARAMS[r], SUBJECT_PARAMS[c]));
        }
    }
    header.push("deviance".into());
    let rows = chain.samples.iter().zip(&chain.deviance_trace).enumerate().map(|(g, (s, d))| {
        let mut row = vec![(g + 1).to_string()];
        row.extend(s.mu.iter().map(|v| f(*v)));
        row.push(f(1.0 / s.sigma_inv_sq));
        for r in 0..6 {
            for c in r..6 {
                row.push(f(s.big_sigma[r][c]));
            }
        }
        row.push(f(*d));
        row
    });
    csv_text(&header.iter().map(String::as_str).collect::<Vec<_>>(), rows)
}

/// `(subject, parameter, interval)` rows: population first, then subjects.
fn posterior_rows(chain: &ChainOutput, obs: &ObservationSet) -> Vec<(String, String, Interval)> {
    let mut out = Vec::new();
    let col = |get: &dyn Fn(&crate::sampler::Sample) -> f64| interval95(&chain.samples.iter().map(get).collect::<Vec<_>>());
    for (k, name) in MU_NAMES.iter().enumerate() {
        out.push((String::new(), name.to_string(), col(&|s| s.mu[k])));
    }
    out.push((String::new(), "sigma_sq".into(), col(&|s| 1.0 / s.sigma_inv_sq)));
    for (k, name) in SUBJECT_PARAMS.iter().enumerate() {
        out.push((String::new(), format!("Sigma_{name}_{name}"), col(&|s| s.big_sigma[k][k])));
    }
    for (i, subject) in obs.subjects.iter().enumerate() {
        for (k, name) in SUBJECT_PARAMS.iter().enumerate() {
            out.push((subject.id.clone(), name.to_string(), col(&|s| s.thetas[i][k])));
        }
    }
    out
}

fn dense_grid(last: f64, step: f64) -> Vec<f64> {
    let n = (last / step).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
    if grid.last().is_some_and(|&g| g < last) {
        grid.push(last);
    }
    grid
}

/// Writes the fit outputs for a finished chain; returns the written paths.
fn write_fit(res: &FitResult, bundle: &StudyBundle, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = out.join(name);
        write_with_header(&p, cfg, &body)?;
        written.push(p);
        Ok(())
    };
    put(SAMPLES_FILE, samples_csv(&res.chain)?)?;

    let rows = posterior_rows(&res.chain, &res.obs);
    put(
        POSTERIOR_FILE,
        csv_text(
            &["subject_id", "parameter", "mean", "low95", "high95"],
            rows.iter().map(|(s, p, i)| [s.clone(), p.clone(), f(i.mean), f(i.low), f(i.high)]),
        )?,
    )?;

    let integ = cfg.integrator();
    let means = res.chain.mean_thetas();
    let mut curves = Vec::new();
    let mut points = Vec::new();
    let mut curve_failures = Vec::new();
    for ((subject, theta), rec) in res.obs.subjects.iter().zip(&means).zip(&bundle.subjects) {
        let last = subject.times.last().copied().unwrap_or(0.0);
        let grid = Subject { times: dense_grid(last, cfg.grid_step), log10_vl: Vec::new(), ..subject.clone() };
        let (Ok(dense), Ok(at_obs)) = (predict_subject(theta, &grid, &integ), predict_subject(theta, subject, &integ)) else {
            curve_failures.push(subject.id.clone());
            continue;
        };
        for (t, y) in grid.times.iter().zip(dense) {
            curves.push([subject.id.clone(), f(*t), f(y)]);
        }
        let censored = rec.censored(bundle.censoring);
        for (((t, y), fit), c) in subject.times.iter().zip(&subject.log10_vl).zip(at_obs).zip(censored) {
            points.push([subject.id.clone(), f(*t), f(*y), f(fit), c.to_string()]);
        }
    }
    put(CURVES_FILE, csv_text(&["subject_id", "day", "fitted_log10_vl"], curves)?)?;
    put(OBSERVED_FILE, csv_text(&["subject_id", "day", "observed_log10_vl", "fitted_log10_vl", "censored"], points)?)?;

    let p = out.join(FIT_SUMMARY_FILE);
    write_json(
        &p,
        &json!({
            "config": config_object(cfg),
            "model": cfg.metric,
            "data": bundle.provenance,
            "n_subjects": res.obs.subjects.len(),
            "n_obs": res.obs.n_obs(),
            "n_kept": res.chain.samples.len(),
            "dic": res.dic,
            "acceptance": res.chain.acceptance,
            "recentre_acceptance": res.chain.recentre_acceptance,
            "curve_failures": curve_failures,
            "conventions": conventions(),
        }),
    )?;
    written.push(p);
    Ok(written)
}

fn write_failure(err: &SamplerError, cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let p = out.join(FAILURE_FILE);
    let mut v = json!({ "config": config_object(cfg), "model": cfg.metric, "error": err.to_string() });
    if let SamplerError::Aborted { sweep, message, snapshot } = err {
        v["sweep"] = json!(sweep);
        v["message"] = json!(message);
        v["snapshot"] = json!(snapshot);
    }
    write_json(&p, &v)?;
    Ok(p)
}

/// Fits `cfg.metric`; writes samples, posterior summaries, fitted curves and
/// a JSON summary. A chain that aborts leaves a failure report instead.
pub fn cmd_fit(bundle: &StudyBundle, cfg: &RunConfig, out: &Path) -> Result<(FitResult, Vec<PathBuf>)> {
    ensure_dir(out)?;
    let obs = bundle.observations(cfg.metric, cfg.doses_per_day)?;
    let chain = match run_chain(&obs, &cfg.hyperpriors(), &cfg.mcmc()) {
        Ok(c) => c,
        Err(e @ (SamplerError::Aborted { .. } | SamplerError::NotPositiveDefinite { .. })) => {
            write_failure(&e, cfg, out)?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let dic = dic_from_chain(&cfg.metric.to_string(), &chain, &obs)?;
    let res = FitResult { obs, chain, dic };
    let files = write_fit(&res, bundle, cfg, out)?;
    Ok((res, files))
}

/// Fits every label in `cfg.compare_metrics` and ranks them by DIC.
/// Failed fits are listed separately; the table covers the successes.
pub fn cmd_compare(bundle: &StudyBundle, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for &label in &cfg.compare_metrics {
        match fit_model(bundle, cfg, label) {
            Ok(r) => summaries.push(r.dic),
            Err(e) => failures.push([label.to_string(), e.to_string()]),
        }
    }
    let ranked = rank_models(&summaries);
    let rows = ranked.iter().map(|r| {
        let s = &r.summary;
        [r.rank.to_string(), s.model_label.clone(), f(s.d_bar), f(s.d_at_mean), f(s.p_d), f(s.dic), f(r.delta_dic)]
    });
    let mut written = Vec::new();
    let p = out.join(DIC_FILE);
    write_with_header(&p, cfg, &csv_text(&["rank", "model", "d_bar", "d_at_mean", "p_d", "dic", "delta_dic"], rows)?)?;
    written.push(p);
    let p = out.join(DIC_FAILURES_FILE);
    write_with_header(&p, cfg, &csv_text(&["model", "error"], &failures)?)?;
    written.push(p);
    if summaries.is_empty() {
        return Err(Error::Numeric(format!("every model failed: {failures:?}")));
    }
    Ok(written)
}

/// Runs the synthetic-trial study and writes the recovery report.
pub fn cmd_simstudy(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let design = cfg.trial_design();
    let mcmc = crate::sampler::McmcConfig { integrator: design.integrator.clone(), ..cfg.mcmc() };
    let report = run_replications(&design, cfg.sim_reps, &cfg.hyperpriors(), &mcmc)?;

    let mut written = Vec::new();
    let p = out.join(RECOVERY_FILE);
    let rows = report.params.iter().map(|r| [r.name.clone(), f(r.tv), f(r.me), f(r.rb), f(r.se)]);
    write_with_header(&p, cfg, &csv_text(&["parameter", "tv", "me", "rb_percent", "se_percent"], rows)?)?;
    written.push(p);

    let mut header = vec!["replication", "status"];
    header.extend(MU_NAMES);
    header.push("mean_acceptance");
    let mut ok = report.estimates.iter().zip(&report.mean_acceptance);
    let mut rows = Vec::new();
    for rep in 0..report.n_reps {
        let mut row = vec![(rep + 1).to_string()];
        if let Some((_, msg)) = report.failures.iter().find(|(r, _)| *r == rep) {
            row.push(format!("failed: {msg}"));
            row.extend(std::iter::repeat_n(String::new(), 9));
        } else {
            let (est, acc) = ok.next().expect("one estimate per successful replication");
            row.push("ok".into());
            row.extend(est.iter().map(|v| f(*v)));
            row.push(f(*acc));
        }
        rows.push(row);
    }
    let p = out.join(REPLICATES_FILE);
    write_with_header(&p, cfg, &csv_text(&header, rows)?)?;
    written.push(p);
    Ok(written)
}

/// Per-visit adherence under each metric (control labels are skipped; an
/// empty list means all 13), plus the window behind every value.
pub fn cmd_summarize_adherence(bundle: &StudyBundle, cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    if !bundle.has_adherence() {
        return Err(Error::Validation("summarize-adherence needs the MEMS and IC50 tables".into()));
    }
    let mut metrics: Vec<MetricSpec> = cfg
        .compare_metrics
        .iter()
        .filter_map(|l| match l {
            ModelLabel::Metric(m) => Some(*m),
            ModelLabel::Control => None,
        })
        .collect();
    if metrics.is_empty() {
        metrics = MetricSpec::all().to_vec();
    }

    let mut header: Vec<String> = vec!["subject_id".into(), "drug".into(), "visit_day".into()];
    for m in &metrics {
        header.push(m.to_string());
        header.push(format!("{m}_carried"));
    }
    let mut rows = Vec::new();
    let mut windows = Vec::new();
    for rec in &bundle.subjects {
        let schedule = rec.schedule()?;
        let drugs = if rec.ic50[1].is_some() { 2 } else { 1 };
        for d in 0..drugs {
            let log = MemsLog::new(rec.mems[d].clone(), cfg.doses_per_day)?;
            let builds =
                metrics.iter().map(|&m| build_profile_detailed(&log, &schedule, m)).collect::<std::result::Result<Vec<_>, _>>()?;
            for (k, day) in schedule.visit_days.iter().enumerate().skip(1) {
                let mut row = vec![rec.id.clone(), (d + 1).to_string(), day.to_string()];
                for b in &builds {
                    row.push(f(b.profile.rates[k - 1]));
                    row.push(b.carried[k - 1].to_string());
                }
                rows.push(row);
            }
            if d == 0 {
                for (m, b) in metrics.iter().zip(&builds) {
                    for (k, w) in b.windows.iter().enumerate() {
                        let (lo, hi) = w.map_or((String::new(), String::new()), |(a, z)| (a.to_string(), z.to_string()));
                        windows.push([rec.id.clone(), schedule.visit_days[k + 1].to_string(), m.to_string(), lo, hi]);
                    }
                }
            }
        }
    }
    let mut written = Vec::new();
    let p = out.join(ADHERENCE_FILE);
    write_with_header(&p, cfg, &csv_text(&header.iter().map(String::as_str).collect::<Vec<_>>(), rows)?)?;
    written.push(p);
    let p = out.join(WINDOWS_FILE);
    write_with_header(&p, cfg, &csv_text(&["subject_id", "visit_day", "metric", "start_day", "end_day"], windows)?)?;
    written.push(p);
    Ok(written)
}
