use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const RIS: &str = r#"
[ris]
layout = { kind = "min-redundancy", gaps_h = [1, 3, 2], gaps_v = [1, 3, 2] }
[el]
reference_draws = 300
[grid]
nx = 12
nz = 12
[ris_opt]
max_sweeps = 2
"#;

fn emloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_in(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let out = dir.display().to_string();
    let mut args = vec!["run", "--config", config, "--out-dir", &out];
    args.extend_from_slice(extra);
    emloc(&args)
}

#[test]
fn zero_trials_write_header_only_rows() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = emloc(&["run", "--trials", "0", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1);
    assert!(rows.starts_with("power_dbm,model,trial,source"));
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"complete\""));
    assert!(!out.join("FAILED").exists());
}

#[test]
fn same_seed_gives_identical_rows_for_any_worker_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "g.toml",
        &format!("experiment = \"grouping\"\ntrials = 3\n{RIS}"),
    );
    let rows = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let o = run_in(&dir, &cfg, extra);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(dir.join("rows.csv")).unwrap()
    };
    let one = rows("w1", &["--workers", "1"]);
    let three = rows("w3", &["--workers", "3"]);
    assert!(String::from_utf8_lossy(&one).lines().count() > 1);
    assert_eq!(one, three);
    assert_ne!(one, rows("s2", &["--seed", "2"]));
}

#[test]
fn verify_recomputes_and_detects_tampering() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "r.toml",
        &format!("experiment = \"ris-opt\"\ntrials = 2\n{RIS}"),
    );
    let dir = tmp.path().join("run");
    let o = run_in(&dir, &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = dir.to_str().unwrap();
    assert!(emloc(&["verify", "--out-dir", d]).status.success());

    let agg = dir.join("aggregates.json");
    let text = fs::read_to_string(&agg).unwrap();
    fs::write(&agg, text.replacen("\"trials\": 2", "\"trials\": 3", 1)).unwrap();
    let o = emloc(&["verify", "--out-dir", d]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("verification failed"), "{}", stderr(&o));
}

#[test]
fn verify_rejects_edited_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "l.toml",
        "trials = 1\n[lr_dist]\nsnapshots = [5]\n[el]\nreference_draws = 100\n",
    );
    let dir = tmp.path().join("run");
    let o = emloc(&[
        "lr-dist",
        "--config",
        &cfg,
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = dir.join("config.toml");
    let text = fs::read_to_string(&c).unwrap();
    fs::write(
        &c,
        text.replace("histogram_bins = 50", "histogram_bins = 20"),
    )
    .unwrap();
    assert!(!emloc(&["verify", "--out-dir", dir.to_str().unwrap()])
        .status
        .success());
}

#[test]
fn lr_dist_seed_sets_reference_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "l.toml",
        "trials = 1\n[lr_dist]\nsnapshots = [5]\n[el]\nreference_draws = 100\n",
    );
    let dir = tmp.path().join("run");
    let o = emloc(&[
        "lr-dist",
        "--config",
        &cfg,
        "--seed",
        "77",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let effective = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(effective.contains("reference_seed = 77"));
    assert_eq!(
        fs::read_to_string(dir.join("rows.csv"))
            .unwrap()
            .lines()
            .count(),
        101
    );
}

#[test]
fn validate_reports_noise_defaults() {
    let tmp = TempDir::new().unwrap();
    let o = emloc(&["validate"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("signal.noise_dbm not set; using -87.0"));

    let cfg = write_config(
        tmp.path(),
        "q.toml",
        &format!("experiment = \"q-map\"\n{RIS}"),
    );
    let o = emloc(&["validate", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("signal.noise_dbm not set; using -120.0"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("noise_dbm = -120.0"));
}

#[test]
fn validate_rejects_inconsistent_configs() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        ("experiment = \"ris-opt\"\n", "needs a [ris] section"),
        (
            "experiment = \"grouping\"\n[ris]\nr0_ohm = 0.2\n",
            "ris.layout",
        ),
        (
            "[signal]\nsnapshots = 10\nsnapshots_stage1 = 5\nsnapshots_stage2 = 20\n",
            "conflicts",
        ),
        ("[grid]\nnxx = 3\n", "nxx"),
    ];
    for (i, (body, needle)) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("c{i}.toml"), body);
        let o = emloc(&["validate", "--config", &cfg]);
        assert!(!o.status.success(), "case {i} accepted");
        assert!(stderr(&o).contains(needle), "case {i}: {}", stderr(&o));
    }
}

#[test]
fn failing_trial_keeps_partial_rows_and_marker() {
    let tmp = TempDir::new().unwrap();
    // The centre grid point coincides with the middle receiver.
    let cfg = write_config(
        tmp.path(),
        "f.toml",
        r#"
experiment = "gamma-map"
trials = 2
[system]
bs_layout = { kind = "uniform", nh = 3, nv = 3 }
[signal]
snapshots = 5
[el]
reference_draws = 200
[grid]
x_range_m = [-1.0, 1.0]
z_range_m = [-1.0, 1.0]
y_m = 0.0
nx = 3
nz = 3
"#,
    );
    let dir = tmp.path().join("run");
    let o = run_in(&dir, &cfg, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(dir.join("FAILED").exists());
    let rows = fs::read_to_string(dir.join("rows.csv")).unwrap();
    // Four grid points before the failing one, four models each.
    assert_eq!(rows.lines().count(), 1 + 16);
    let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""));
    assert!(emloc(&["verify", "--out-dir", dir.to_str().unwrap()])
        .status
        .success());
}
