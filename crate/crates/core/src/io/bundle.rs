//! Study data: four CSV tables keyed by subject identifier.
//!
//! | file               | columns                                           |
//! |--------------------|---------------------------------------------------|
//! | `viral_load.csv`   | `subject_id, day, copies_per_ml`                  |
//! | `mems_events.csv`  | `subject_id, drug, day_fractional`                |
//! | `ic50.csv`         | `subject_id, drug, s0, sf, tf_day`                |
//! | `covariates.csv`   | `subject_id, baseline_log10_vl, baseline_cd4`     |
//!
//! Visit days are whole days starting at 0. `drug` is 1 or 2; a drug is part
//! of a subject's regimen when it has an IC50 row, and a regimen without
//! drug 2 uses drug 1's inputs for both terms. `tf_day` (and `sf`) are empty
//! for a subject whose IC50 never changes. The MEMS and IC50 tables are
//! optional; without them only the control model can be fitted.
//!
//! Loading is all-or-nothing: any schema or integrity violation aborts with
//! an error naming the file and line (and column or subject).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::ModelLabel;
use crate::adherence::{build_profile, MemsLog, VisitSchedule};
use crate::efficacy::{standardize_covariates, EfficacyInputs, EfficacyModel, Ic50Trajectory};
use crate::error::{Error, Result};
use crate::sampler::{ObservationSet, Subject};
use crate::simstudy::Censoring;

pub const VIRAL_LOAD_FILE: &str = "viral_load.csv";
pub const MEMS_FILE: &str = "mems_events.csv";
pub const IC50_FILE: &str = "ic50.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileProvenance {
    pub file: String,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub visit_days: Vec<i64>,
    /// Raw assay values, before any detection-limit replacement.
    pub copies_per_ml: Vec<f64>,
    /// Sorted opening times per drug.
    pub mems: [Vec<f64>; 2],
    pub ic50: [Option<Ic50Trajectory>; 2],
    pub baseline_log10_vl: f64,
    pub baseline_cd4: f64,
}

impl SubjectRecord {
    /// `log₁₀` viral loads, with values below the threshold replaced first.
    pub fn log10_vl(&self, censoring: Option<Censoring>) -> Vec<f64> {
        self.copies_per_ml
            .iter()
            .map(|&v| match censoring {
                Some(c) if v < c.threshold => c.replacement.log10(),
                _ => v.log10(),
            })
            .collect()
    }

    /// Whether each observation falls below the detection threshold.
    pub fn censored(&self, censoring: Option<Censoring>) -> Vec<bool> {
        self.copies_per_ml.iter().map(|&v| censoring.is_some_and(|c| v < c.threshold)).collect()
    }

    pub fn schedule(&self) -> Result<VisitSchedule> {
        Ok(VisitSchedule::new(self.visit_days.clone())?)
    }

    /// MEMS logs and IC50 trajectories for the two efficacy terms.
    fn regimen(&self, doses_per_day: u32) -> Result<[(MemsLog, Ic50Trajectory); 2]> {
        let Some(ic1) = self.ic50[0] else {
            return Err(Error::Validation(format!("subject {}: no IC50 for drug 1", self.id)));
        };
        let log1 = MemsLog::new(self.mems[0].clone(), doses_per_day)?;
        let second = match self.ic50[1] {
            Some(ic2) => (MemsLog::new(self.mems[1].clone(), doses_per_day)?, ic2),
            None => (log1.clone(), ic1),
        };
        Ok([(log1, ic1), second])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyBundle {
    pub subjects: Vec<SubjectRecord>,
    pub censoring: Option<Censoring>,
    pub provenance: Vec<FileProvenance>,
}

impl StudyBundle {
    pub fn has_adherence(&self) -> bool {
        self.subjects.iter().all(|s| s.ic50[0].is_some())
    }

    /// Observations for fitting `label`. Covariates are standardized over the
    /// subjects in the bundle.
    pub fn observations(&self, label: ModelLabel, doses_per_day: u32) -> Result<ObservationSet> {
        let raw: Vec<(f64, f64)> = self.subjects.iter().map(|s| (s.baseline_log10_vl, s.baseline_cd4)).collect();
        let covariates = match label {
            ModelLabel::Control => Vec::new(),
            ModelLabel::Metric(_) => standardize_covariates(&raw)?.0,
        };
        let mut subjects = Vec::with_capacity(self.subjects.len());
        for (i, rec) in self.subjects.iter().enumerate() {
            let efficacy = match label {
                ModelLabel::Control => EfficacyModel::Control,
                ModelLabel::Metric(spec) => {
                    let schedule = rec.schedule()?;
                    let [(log1, ic1), (log2, ic2)] = rec.regimen(doses_per_day)?;
                    let p1 = build_profile(&log1, &schedule, spec)?;
                    let p2 = build_profile(&log2, &schedule, spec)?;
                    let inputs = EfficacyInputs::new(p1, p2, ic1, ic2, covariates[i])
                        .map_err(|e| Error::Validation(format!("subject {}: {e}", rec.id)))?;
                    EfficacyModel::Full(inputs)
                }
            };
            subjects.push(Subject {
                id: rec.id.clone(),
                times: rec.visit_days.iter().map(|&d| d as f64).collect(),
                log10_vl: rec.log10_vl(self.censoring),
                efficacy,
            });
        }
        Ok(ObservationSet { subjects })
    }
}

/// A parsed CSV table: header plus `(line, fields)` rows.
struct Table {
    name: String,
    columns: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
    sha256: String,
}

impl Table {
    fn read(path: &Path, expected: &[&str]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let sha256 = hex::encode(Sha256::digest(&bytes));
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
        let schema = |m: String| Error::Validation(format!("{name}: {m}"));
        let columns: Vec<String> =
            r.headers().map_err(|e| schema(e.to_string()))?.iter().map(str::to_string).collect();
        for col in expected {
            if !columns.iter().any(|c| c == col) {
                return Err(schema(format!("line 1: missing column {col:?}")));
            }
        }
        if let Some(extra) = columns.iter().find(|c| !expected.contains(&c.as_str())) {
            return Err(schema(format!("line 1: unexpected column {extra:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| schema(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Self { name, columns, rows, sha256 })
    }

    fn provenance(&self) -> FileProvenance {
        FileProvenance { file: self.name.clone(), sha256: self.sha256.clone(), rows: self.rows.len() }
    }

    fn cell<'a>(&self, row: &'a [String], column: &str) -> &'a str {
        let k = self.columns.iter().position(|c| c == column).expect("validated header");
        &row[k]
    }

    fn err(&self, line: u64, column: &str, msg: impl std::fmt::Display) -> Error {
        Error::Validation(format!("{}: line {line}, column {column:?}: {msg}", self.name))
    }

    fn subject_err(&self, line: u64, id: &str, msg: impl std::fmt::Display) -> Error {
        Error::Validation(format!("{}: line {line}: subject {id:?}: {msg}", self.name))
    }

    fn number(&self, line: u64, row: &[String], column: &str) -> Result<f64> {
        let v = self.cell(row, column);
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.err(line, column, format!("expected a finite number, got {v:?}"))),
        }
    }

    fn optional_number(&self, line: u64, row: &[String], column: &str) -> Result<Option<f64>> {
        if self.cell(row, column).is_empty() {
            Ok(None)
        } else {
            self.number(line, row, column).map(Some)
        }
    }

    fn subject(&self, line: u64, row: &[String]) -> Result<String> {
        let id = self.cell(row, "subject_id");
        if id.is_empty() {
            return Err(self.err(line, "subject_id", "empty subject identifier"));
        }
        Ok(id.to_string())
    }

    fn drug(&self, line: u64, row: &[String]) -> Result<usize> {
        match self.cell(row, "drug") {
            "1" => Ok(0),
            "2" => Ok(1),
            other => Err(self.err(line, "drug", format!("expected 1 or 2, got {other:?}"))),
        }
    }
}

/// Loads and validates the bundle in `dir`.
pub fn load_bundle(dir: &Path, censoring: Option<Censoring>) -> Result<StudyBundle> {
    let vl = Table::read(&dir.join(VIRAL_LOAD_FILE), &["subject_id", "day", "copies_per_ml"])?;
    let cov = Table::read(&dir.join(COVARIATES_FILE), &["subject_id", "baseline_log10_vl", "baseline_cd4"])?;
    let optional = |file: &str, cols: &[&str]| -> Result<Option<Table>> {
        let p = dir.join(file);
        if p.exists() {
            Table::read(&p, cols).map(Some)
        } else {
            Ok(None)
        }
    };
    let mems = optional(MEMS_FILE, &["subject_id", "drug", "day_fractional"])?;
    let ic50 = optional(IC50_FILE, &["subject_id", "drug", "s0", "sf", "tf_day"])?;
    if mems.is_some() && ic50.is_none() {
        return Err(Error::Validation(format!("{MEMS_FILE} present without {IC50_FILE}")));
    }

    let mut order: Vec<String> = Vec::new();
    let mut records: BTreeMap<String, SubjectRecord> = BTreeMap::new();
    for (line, row) in &vl.rows {
        let id = vl.subject(*line, row)?;
        let day = vl.number(*line, row, "day")?;
        if day < 0.0 || day.fract() != 0.0 {
            return Err(vl.err(*line, "day", format!("visit day must be a whole number >= 0, got {day}")));
        }
        let copies = vl.number(*line, row, "copies_per_ml")?;
        if !(copies > 0.0) {
            return Err(vl.err(*line, "copies_per_ml", format!("viral load must be positive, got {copies}")));
        }
        let rec = records.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            SubjectRecord {
                id: id.clone(),
                visit_days: Vec::new(),
                copies_per_ml: Vec::new(),
                mems: [Vec::new(), Vec::new()],
                ic50: [None, None],
                baseline_log10_vl: f64::NAN,
                baseline_cd4: f64::NAN,
            }
        });
        if rec.visit_days.last().is_some_and(|&last| day as i64 <= last) {
            return Err(vl.subject_err(*line, &id, "visit days must be strictly increasing"));
        }
        rec.visit_days.push(day as i64);
        rec.copies_per_ml.push(copies);
    }
    if records.is_empty() {
        return Err(Error::Validation(format!("{VIRAL_LOAD_FILE}: no observations")));
    }
    for rec in records.values() {
        if rec.visit_days[0] != 0 {
            return Err(Error::Validation(format!(
                "{VIRAL_LOAD_FILE}: subject {:?}: first visit must be day 0 (therapy start)",
                rec.id
            )));
        }
    }

    for (line, row) in &cov.rows {
        let id = cov.subject(*line, row)?;
        let v = cov.number(*line, row, "baseline_log10_vl")?;
        let c = cov.number(*line, row, "baseline_cd4")?;
        let rec = records.get_mut(&id).ok_or_else(|| cov.subject_err(*line, &id, "not in the viral-load table"))?;
        if !rec.baseline_cd4.is_nan() {
            return Err(cov.subject_err(*line, &id, "duplicate covariate row"));
        }
        rec.baseline_log10_vl = v;
        rec.baseline_cd4 = c;
    }
    if let Some(rec) = records.values().find(|r| r.baseline_cd4.is_nan()) {
        return Err(Error::Validation(format!("{COVARIATES_FILE}: subject {:?} has no covariates", rec.id)));
    }

    if let Some(t) = &ic50 {
        for (line, row) in &t.rows {
            let id = t.subject(*line, row)?;
            let drug = t.drug(*line, row)?;
            let s0 = t.number(*line, row, "s0")?;
            let tf = t.optional_number(*line, row, "tf_day")?;
            let sf = match tf {
                Some(_) => t.number(*line, row, "sf")?,
                None => t.optional_number(*line, row, "sf")?.unwrap_or(s0),
            };
            let traj = Ic50Trajectory { s0, sf, tf };
            traj.validate().map_err(|e| t.subject_err(*line, &id, e))?;
            let rec = records.get_mut(&id).ok_or_else(|| t.subject_err(*line, &id, "not in the viral-load table"))?;
            if rec.ic50[drug].replace(traj).is_some() {
                return Err(t.subject_err(*line, &id, format!("duplicate IC50 row for drug {}", drug + 1)));
            }
        }
    }
    if let Some(t) = &mems {
        for (line, row) in &t.rows {
            let id = t.subject(*line, row)?;
            let drug = t.drug(*line, row)?;
            let day = t.number(*line, row, "day_fractional")?;
            let rec = records.get_mut(&id).ok_or_else(|| t.subject_err(*line, &id, "not in the viral-load table"))?;
            if rec.ic50[drug].is_none() {
                return Err(t.subject_err(*line, &id, format!("MEMS events for drug {} without an IC50 row", drug + 1)));
            }
            rec.mems[drug].push(day);
        }
    }
    for rec in records.values_mut() {
        for log in &mut rec.mems {
            log.sort_by(f64::total_cmp);
        }
        if ic50.is_some() && rec.ic50[0].is_none() {
            return Err(Error::Validation(format!("{IC50_FILE}: subject {:?} has no drug 1 row", rec.id)));
        }
    }

    let provenance = [Some(&vl), Some(&cov), ic50.as_ref(), mems.as_ref()].into_iter().flatten().map(Table::provenance).collect();
    let subjects = order.into_iter().map(|id| records.remove(&id).expect("recorded")).collect();
    Ok(StudyBundle { subjects, censoring, provenance })
}

/// Writes the bundle tables into `dir`; numbers use the shortest
/// representation that parses back to the same value.
pub fn write_bundle(bundle: &StudyBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut vl = Vec::new();
    let mut cov = Vec::new();
    let mut ic = Vec::new();
    let mut mems = Vec::new();
    for s in &bundle.subjects {
        for (d, c) in s.visit_days.iter().zip(&s.copies_per_ml) {
            vl.push(vec![s.id.clone(), d.to_string(), c.to_string()]);
        }
        cov.push(vec![s.id.clone(), s.baseline_log10_vl.to_string(), s.baseline_cd4.to_string()]);
        for (k, traj) in s.ic50.iter().enumerate() {
            if let Some(t) = traj {
                let (sf, tf) = match t.tf {
                    Some(tf) => (t.sf.to_string(), tf.to_string()),
                    None => (String::new(), String::new()),
                };
                ic.push(vec![s.id.clone(), (k + 1).to_string(), t.s0.to_string(), sf, tf]);
            }
            for e in &s.mems[k] {
                mems.push(vec![s.id.clone(), (k + 1).to_string(), e.to_string()]);
            }
        }
    }
    let mut written = Vec::new();
    let mut put = |file: &str, header: &[&str], rows: &[Vec<String>]| -> Result<()> {
        let path = dir.join(file);
        fs::write(&path, super::csv_text(header, rows)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put(VIRAL_LOAD_FILE, &["subject_id", "day", "copies_per_ml"], &vl)?;
    put(COVARIATES_FILE, &["subject_id", "baseline_log10_vl", "baseline_cd4"], &cov)?;
    if bundle.subjects.iter().any(|s| s.ic50[0].is_some()) {
        put(IC50_FILE, &["subject_id", "drug", "s0", "sf", "tf_day"], &ic)?;
        put(MEMS_FILE, &["subject_id", "drug", "day_fractional"], &mems)?;
    }
    Ok(written)
}
