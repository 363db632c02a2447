use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hivdyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hivdyn")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_study(dir: &Path) {
    let mut vl = String::from("subject_id,day,copies_per_ml\n");
    let mut mems = String::from("subject_id,drug,day_fractional\n");
    let mut cov = String::from("subject_id,baseline_log10_vl,baseline_cd4\n");
    let mut ic = String::from("subject_id,drug,s0,sf,tf_day\n");
    for i in 0..3 {
        let id = format!("S{i}");
        for (k, day) in [0, 14, 28, 56, 84].iter().enumerate() {
            vl.push_str(&format!("{id},{day},{}\n", 60000.0 / (1.0 + 8.0 * k as f64) / (1.0 + i as f64)));
        }
        for day in 0..84 {
            if (day + i) % 6 != 0 {
                mems.push_str(&format!("{id},1,{}.25\n{id},1,{}.75\n", day, day));
            }
        }
        ic.push_str(&format!("{id},1,{},,\n", 18 + i));
        cov.push_str(&format!("{id},{},{}\n", 4.5 + 0.3 * i as f64, 150 + 60 * i));
    }
    fs::write(dir.join("viral_load.csv"), vl).unwrap();
    fs::write(dir.join("mems_events.csv"), mems).unwrap();
    fs::write(dir.join("covariates.csv"), cov).unwrap();
    fs::write(dir.join("ic50.csv"), ic).unwrap();
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn help_lists_the_subcommands() {
    let o = hivdyn(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["fit", "compare", "simstudy", "summarize-adherence"] {
        assert!(text.contains(sub), "{text}");
    }
}

#[test]
fn summarize_adherence_writes_tables() {
    let data = tempfile::tempdir().unwrap();
    write_study(data.path());
    let out = tempfile::tempdir().unwrap();
    let o = hivdyn(&[
        "summarize-adherence",
        "--data-dir",
        data.path().to_str().unwrap(),
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let listed = String::from_utf8_lossy(&o.stdout);
    assert!(listed.contains("adherence.csv") && listed.contains("adherence_windows.csv"));
    let text = fs::read_to_string(out.path().join("adherence.csv")).unwrap();
    assert!(text.starts_with("# "));
    assert_eq!(text.lines().filter(|l| l.starts_with("S")).count(), 3 * 4);
}

#[test]
fn fit_is_identical_across_thread_counts() {
    let data = tempfile::tempdir().unwrap();
    write_study(data.path());
    let cfg = data.path().join("run.cfg");
    fs::write(&cfg, "# short chain\nburn_in = 40\nn_kept = 30\nkeep_every = 2\nmetric = M1.2\n").unwrap();
    let run = |threads: &str| {
        let out = tempfile::tempdir().unwrap();
        let o = hivdyn(&[
            "fit",
            "--config",
            cfg.to_str().unwrap(),
            "--data-dir",
            data.path().to_str().unwrap(),
            "--out-dir",
            out.path().to_str().unwrap(),
            "--seed",
            "11",
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir_bytes(out.path())
    };
    let one = run("1");
    assert_eq!(one, run("4"));
    let samples = &one.iter().find(|(n, _)| n == "samples.csv").unwrap().1;
    let text = String::from_utf8_lossy(samples);
    assert!(text.contains("# seed = 11") && text.contains("# metric = M1.2"));
}

#[test]
fn validation_problems_exit_with_1() {
    let data = tempfile::tempdir().unwrap();
    write_study(data.path());
    let out = tempfile::tempdir().unwrap();
    let (d, o) = (data.path().to_str().unwrap(), out.path().to_str().unwrap());

    let missing = hivdyn(&["fit", "--out-dir", o]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("--data-dir"));

    let cfg = data.path().join("bad.cfg");
    fs::write(&cfg, "burn_in = 10\nwarmup = 5\n").unwrap();
    let bad_key = hivdyn(&["fit", "--config", cfg.to_str().unwrap(), "--data-dir", d, "--out-dir", o]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(stderr(&bad_key).contains("bad.cfg:2") && stderr(&bad_key).contains("warmup"));

    let bad_override = hivdyn(&["fit", "--data-dir", d, "--out-dir", o, "--set", "n_kept=lots"]);
    assert_eq!(bad_override.status.code(), Some(1));

    let vl = data.path().join("viral_load.csv");
    fs::write(&vl, fs::read_to_string(&vl).unwrap().replacen("S1,14,", "S1,x,", 1)).unwrap();
    let bad_data = hivdyn(&["summarize-adherence", "--data-dir", d, "--out-dir", o]);
    assert_eq!(bad_data.status.code(), Some(1));
    assert!(stderr(&bad_data).contains("viral_load.csv: line 8"), "{}", stderr(&bad_data));
}

#[test]
fn numeric_failure_exits_with_2_and_leaves_a_report() {
    let data = tempfile::tempdir().unwrap();
    write_study(data.path());
    let out = tempfile::tempdir().unwrap();
    let o = hivdyn(&[
        "fit",
        "--data-dir",
        data.path().to_str().unwrap(),
        "--out-dir",
        out.path().to_str().unwrap(),
        "--set",
        "max_step=1e-4",
        "--set",
        "warm_start=false",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report = fs::read_to_string(out.path().join("failure.json")).unwrap();
    assert!(report.contains("\"sweep\": 0") && report.contains("max_step"), "{report}");
}
