#![allow(dead_code)]

use std::fs;
use std::path::Path;

use hivdyn::io::config::RunConfig;

pub const WEEKS: [i64; 7] = [0, 2, 4, 8, 12, 16, 24];

/// Log10 viral loads with a biphasic decline, shifted per subject.
fn log10_vl(subject: usize, week: i64) -> f64 {
    let t = 7.0 * week as f64;
    let base = 4.6 + 0.2 * subject as f64;
    let y = base + (0.9 * (-0.35 * t).exp() + 0.1 * (-0.03 * t).exp()).log10();
    y.max(1.2) + 0.05 * ((subject as f64 + 1.0) * (week as f64 + 1.0)).sin()
}

/// Writes a four-subject study. `skip_every` thins the MEMS log: a dose is
/// missed whenever `(day + dose + subject) % skip_every == 0`; zero means
/// perfect adherence.
pub fn write_study(dir: &Path, skip_every: i64) {
    fs::create_dir_all(dir).unwrap();
    let mut vl = String::from("subject_id,day,copies_per_ml\n");
    let mut mems = String::from("subject_id,drug,day_fractional\n");
    let mut cov = String::from("subject_id,baseline_log10_vl,baseline_cd4\n");
    let mut ic = String::from("subject_id,drug,s0,sf,tf_day\n");
    let last = 7 * WEEKS[WEEKS.len() - 1];
    for i in 0..4usize {
        let id = format!("P{:02}", i + 1);
        for w in WEEKS {
            vl.push_str(&format!("{id},{},{}\n", 7 * w, 10f64.powf(log10_vl(i, w))));
        }
        for d in 1..=2 {
            for day in 0..last {
                for dose in 0..2 {
                    if skip_every > 0 && (day + dose + i as i64 + d) % skip_every == 0 {
                        continue;
                    }
                    mems.push_str(&format!("{id},{d},{}\n", day as f64 + 0.3 + 0.45 * dose as f64));
                }
            }
            ic.push_str(&format!("{id},{d},{},,\n", 20.0 + i as f64 + d as f64));
        }
        cov.push_str(&format!("{id},{},{}\n", 4.6 + 0.2 * i as f64, 180.0 + 40.0 * (i % 3) as f64));
    }
    fs::write(dir.join("viral_load.csv"), vl).unwrap();
    fs::write(dir.join("mems_events.csv"), mems).unwrap();
    fs::write(dir.join("covariates.csv"), cov).unwrap();
    fs::write(dir.join("ic50.csv"), ic).unwrap();
}

/// Defaults with a short chain.
pub fn quick_config(burn_in: usize, n_kept: usize) -> RunConfig {
    RunConfig { burn_in, n_kept, keep_every: 1, ..RunConfig::default() }
}

pub fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}
