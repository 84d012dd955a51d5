use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use giqs::config::parse_config;
use giqs::report::{read_container, ReportRecord, REPORT_SCHEMA};
use giqs::GiqsError;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_giqs"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_giqs(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let o = bin()
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn read_report(path: &Path) -> ReportRecord {
    ReportRecord::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

fn validate(path: &Path) {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let doc: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let errs: Vec<String> = v.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errs.is_empty(), "{}: {errs:?}", path.display());
}

const PARTITION: &str = r#"
[model]
kind = "torus"
dim = 2

[run]
seed = 3

[run.partition]
r_min = 8.0
r_max = 20.0
"#;

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let cfg = parse_config(&fs::read_to_string(&p).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            cfg.build_model().unwrap();
            assert_eq!(cfg.hash().len(), 64);
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn partition_report_is_deterministic_and_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "p.toml", PARTITION);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run_giqs("partition", &cfg, &a, &[]).0, 0);
    assert_eq!(run_giqs("partition", &cfg, &b, &["--jobs", "3"]).0, 0);
    let (ra, rb) = (read_report(&a.join("partition.json")), read_report(&b.join("partition.json")));
    assert_eq!(ra.deterministic_json().unwrap(), rb.deterministic_json().unwrap());
    assert_eq!(ra.seed, 3);
    assert_eq!(ra.violations, 0);
    validate(&a.join("partition.json"));
}

#[test]
fn seed_override_and_multi_seed_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = PARTITION.replace("seed = 3", "seeds = [1, 2, 5]\njobs = 2");
    let cfg = write_config(tmp.path(), "p.toml", &text);
    let out = tmp.path().join("o");
    assert_eq!(run_giqs("partition", &cfg, &out, &[]).0, 0);
    for s in [1, 2, 5] {
        let r = read_report(&out.join(format!("partition-seed{s}.json")));
        assert_eq!(r.seed, s);
    }
    let single = tmp.path().join("s");
    assert_eq!(run_giqs("partition", &cfg, &single, &["--seed", "9"]).0, 0);
    assert_eq!(read_report(&single.join("partition.json")).seed, 9);
}

#[test]
fn violations_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "m.toml",
        "[model]\nkind = \"torus\"\ndim = 1\n[run.melnikov]\nr = 3\ncutoff = 5.0\n",
    );
    let out = tmp.path().join("o");
    let (code, _) = run_giqs("melnikov", &cfg, &out, &[]);
    assert_eq!(code, 2);
    let r = read_report(&out.join("melnikov.json"));
    assert!(r.violations > 0);
    assert_eq!(r.payload["violation_count"].as_u64(), Some(r.violations));
    validate(&out.join("melnikov.json"));
}

#[test]
fn errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // unknown keys and a bad value are all reported
    let bad = write_config(
        tmp.path(),
        "bad.toml",
        "[model]\nkind = \"torus\"\ndim = 2\ncolour = 1\n[resonance]\ndelta = 3.0\n[run.partition]\nr_mn = 2.0\n",
    );
    let (code, err) = run_giqs("partition", &bad, &out, &[]);
    assert_eq!(code, 1);
    assert!(err.contains("colour"), "{err}");
    assert!(err.contains("r_mn"), "{err}");
    assert!(err.contains("delta"), "{err}");

    let syntax = write_config(tmp.path(), "syntax.toml", "[model\nkind = 1\n");
    let (code, err) = run_giqs("partition", &syntax, &out, &[]);
    assert_eq!(code, 1);
    assert!(err.contains("line 1"), "{err}");

    let (code, _) = run_giqs("partition", &tmp.path().join("missing.toml"), &out, &[]);
    assert_eq!(code, 1);

    let good = write_config(tmp.path(), "p.toml", PARTITION);
    let o = bin()
        .args(["partition", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(&out)
        .env("GIQS_BUDGET_MB", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));

    assert_eq!(giqs::cli::main_with_args(["giqs", "nonsense"]), 1);
}

#[test]
fn config_errors_are_collected() {
    let err = parse_config("[model]\nkind = \"sphere\"\nn = 1\ndim = 3\n[extra]\n").unwrap_err();
    let GiqsError::Config(list) = err else {
        panic!("expected config errors");
    };
    assert!(list.0.len() >= 2, "{:?}", list.0);
    assert!(list.0.iter().any(|e| e.contains("extra")));
}

#[test]
fn free_evolution_keeps_every_norm() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "e.toml",
        r#"
[model]
kind = "torus"
dim = 2

[run.evolve]
cutoff = 10.0
t1 = 20.0
dt = 0.1
record_every = 5
checkpoint_every = 50
fit_window = [1.0, 20.0]

[run.evolve.perturbation]
kind = "free"
"#,
    );
    let out = tmp.path().join("o");
    assert_eq!(run_giqs("evolve", &cfg, &out, &[]).0, 0);
    validate(&out.join("evolve.json"));
    let rep = read_report(&out.join("evolve.json"));
    assert_eq!(rep.payload["growth"]["epsilon"].as_f64().unwrap().abs() < 1e-10, true);

    let mut rdr = csv::Reader::from_path(out.join("evolve-trajectory.csv")).unwrap();
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 41);
    for r in &rows {
        for (c, first) in r[1..].iter().zip(&rows[0][1..]) {
            assert!((c - first).abs() <= 1e-12 * first.max(1.0));
        }
    }

    let (hdr, data) = read_container(fs::File::open(out.join("evolve-checkpoints.giqs")).unwrap()).unwrap();
    assert_eq!(hdr.dtype, "complex128");
    let n = rep.payload["n_states"].as_u64().unwrap() as usize;
    assert_eq!(hdr.shape[1], n);
    assert_eq!(data.len(), hdr.shape[0] * n);
    assert_eq!(hdr.meta["basis"].as_array().unwrap().len(), n);
}

#[test]
fn analysis_subcommands_produce_valid_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "all.toml",
        r#"
[model]
kind = "torus"
dim = 2

[resonance]
delta = 0.3
mu = 0.15
r = 8.0

[run.clusters]
e_max = 500.0

[run.spectrum]
r_min = 8.0
r_max = 16.0
fit_lo = 9.0
fit_hi = 15.0
omega_radii = [10.0, 14.0, 18.0]

[run.normalform]
r_min = 8.0
r_max = 16.0
fit_lo = 9.0
fit_hi = 15.0
export_matrices = true

[run.normalform.perturbation]
kind = "convolution"
modes = [{ k = [0, 0], re = 0.3 }, { k = [1, 0], re = 0.1 }, { k = [0, 1], re = 0.07 }]

[run.steepness]
n_points = 8
niederman_lines = 5
niederman_samples = 50
"#,
    );
    let out = tmp.path().join("o");
    for sub in ["clusters", "spectrum", "normalform", "steepness"] {
        let (code, err) = run_giqs(sub, &cfg, &out, &[]);
        assert!(code == 0 || code == 2, "{sub}: {err}");
        validate(&out.join(format!("{sub}.json")));
        let r = read_report(&out.join(format!("{sub}.json")));
        assert_eq!(code == 2, r.violations > 0, "{sub}");
        for f in &r.files {
            assert!(out.join(f).exists(), "{sub}: {f}");
        }
    }
    let nf = read_report(&out.join("normalform.json"));
    assert!(nf.payload["closure"].as_f64().unwrap() < 1e-10);
    let gen = nf.files.iter().find(|f| f.contains("generator")).unwrap();
    let (hdr, data) = read_container(fs::File::open(out.join(gen)).unwrap()).unwrap();
    assert_eq!(hdr.shape.len(), 2);
    assert_eq!(hdr.shape[0], hdr.shape[1]);
    assert_eq!(data.len(), hdr.shape[0] * hdr.shape[1]);
}
