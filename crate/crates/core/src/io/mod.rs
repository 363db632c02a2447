//! Data bundles, run configuration, and the command implementations that
//! write results to disk.
//!
//! Every output file starts with the effective configuration as `# key = value`
//! comment lines (or a `config` object for JSON), so a run can be reproduced
//! from any one of its outputs. The output directory is not part of the echo.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod summary;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::adherence::MetricSpec;
use crate::error::{Error, Result};

pub use bundle::{load_bundle, write_bundle, StudyBundle, SubjectRecord};
pub use config::RunConfig;

/// A candidate efficacy model: one of the 13 MEMS metrics, or the
/// constant-efficacy control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelLabel {
    Control,
    Metric(MetricSpec),
}

impl ModelLabel {
    /// The control model followed by the 13 metrics.
    pub fn all() -> Vec<Self> {
        std::iter::once(Self::Control).chain(MetricSpec::all().into_iter().map(Self::Metric)).collect()
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Control => f.write_str("control"),
            Self::Metric(m) => write!(f, "{m}"),
        }
    }
}

impl Serialize for ModelLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl FromStr for ModelLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("control") {
            return Ok(Self::Control);
        }
        s.parse::<MetricSpec>().map(Self::Metric).map_err(|e| e.to_string())
    }
}

/// Config echo as CSV comment lines.
pub(crate) fn config_header(cfg: &RunConfig) -> String {
    cfg.echo_entries().into_iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

/// Writes `body` prefixed by the config echo.
pub(crate) fn write_with_header(path: &Path, cfg: &RunConfig, body: &str) -> Result<()> {
    let mut text = config_header(cfg);
    text.push_str(body);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders rows as CSV text.
pub(crate) fn csv_text<I, R>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Validation(format!("csv encoding: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Reads a CSV written by this crate, skipping the config echo.
pub fn read_output_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let fail = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
    let header = r.headers().map_err(fail)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(fail)?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Parses the config echo at the top of an output file.
pub fn embedded_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let cfg = v.get("config").and_then(|c| c.as_object()).ok_or_else(|| {
            Error::Validation(format!("{}: no config object", path.display()))
        })?;
        let body: String = cfg.iter().map(|(k, v)| format!("{k} = {}\n", v.as_str().unwrap_or_default())).collect();
        return RunConfig::from_text(&body, &path.display().to_string());
    }
    let body: String = text
        .lines()
        .map_while(|l| l.strip_prefix("# "))
        .map(|l| format!("{l}\n"))
        .collect();
    RunConfig::from_text(&body, &path.display().to_string())
}
