use std::fs;
use std::path::Path;
use std::process::Command;

use osmd_market::cli::{parse_config, run_experiment, TRACE_HEADER};

const BIN: &str = env!("CARGO_BIN_EXE_osmd-market");

const MINIMAL: &str = r#"{
  "scenario": {"kind": "mixture_regression", "n": 1, "d": 2, "samples_per_provider": 3,
               "holdout_size": 3, "groups": 1, "consumer_group": 0,
               "squash": {"kind": "exp", "tau": 1.0}, "init": 0.0},
  "market": {"batch_size": 1, "rounds": 2, "eta": 0.5, "alpha": 0.5, "gamma": 0.1},
  "seeds": [3]
}"#;

const TINY: &str = r#"{
  "scenario": {"kind": "mixture_regression", "n": 3, "d": 2, "samples_per_provider": 4,
               "holdout_size": 5, "groups": 2, "consumer_group": 0,
               "squash": {"kind": "exp", "tau": 2.0}, "init": -1.0},
  "market": {"batch_size": 2, "rounds": 4, "eta": 1.0, "alpha": 0.3, "gamma": 0.1,
             "switch_budget": 2},
  "samplers": ["osmd", "uniform"],
  "seeds": [5],
  "analysis": {"regret": true, "shapley": 0},
  "revenue_pool": 6.0
}"#;

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn minimal_config_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(MINIMAL).unwrap();
    let rep = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(rep.files.len(), 3);
    assert_eq!(
        listing(dir.path()),
        [
            "aggregate_osmd.csv",
            "summary_osmd_seed3.json",
            "trace_osmd_seed3.csv"
        ]
    );
    let trace = fs::read_to_string(dir.path().join("trace_osmd_seed3.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], TRACE_HEADER);
    assert_eq!(lines[1], "round,utility,test_metric,p_0,N_0");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("1,"));
    assert!(lines[3].ends_with(",1,2"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = parse_config(TINY).unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let names = listing(a.path());
    assert_eq!(names, listing(b.path()));
    for n in &names {
        assert_eq!(
            fs::read(a.path().join(n)).unwrap(),
            fs::read(b.path().join(n)).unwrap(),
            "{n}"
        );
    }
}

#[test]
fn golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&parse_config(TINY).unwrap(), dir.path()).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for name in [
        "trace_osmd_seed5.csv",
        "summary_osmd_seed5.json",
        "aggregate_uniform.csv",
        "regret_summary_osmd.json",
    ] {
        let got = fs::read_to_string(dir.path().join(name)).unwrap();
        if update {
            fs::write(golden.join(name), &got).unwrap();
        }
        let want = fs::read_to_string(golden.join(name)).unwrap();
        assert_eq!(got, want, "{name} drifted from the golden copy");
    }
}

#[test]
fn binary_runs_and_honours_env_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, MINIMAL).unwrap();
    let out_root = dir.path().join("from-env");
    let st = Command::new(BIN)
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--seeds",
            "1,2",
            "--sampler",
            "uniform",
        ])
        .env("OSMD_MARKET_OUT", &out_root)
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    assert_eq!(
        listing(&out_root),
        [
            "aggregate_uniform.csv",
            "summary_uniform_seed1.json",
            "summary_uniform_seed2.json",
            "trace_uniform_seed1.csv",
            "trace_uniform_seed2.csv"
        ]
    );

    let flag_out = dir.path().join("flag");
    let st = Command::new(BIN)
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--out",
            flag_out.to_str().unwrap(),
            "--regret",
        ])
        .env("OSMD_MARKET_OUT", &out_root)
        .output()
        .unwrap();
    assert!(st.status.success());
    assert!(flag_out.join("regret_summary_osmd.json").exists());
}

fn run_bin_expect_error(config: &str) -> serde_json::Value {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, config).unwrap();
    let st = Command::new(BIN)
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!st.status.success());
    serde_json::from_slice(&st.stderr).expect("stderr is one JSON object")
}

#[test]
fn rejections_are_machine_readable() {
    let v = run_bin_expect_error(&MINIMAL.replace("\"alpha\": 0.5", "\"alpha\": 1.5"));
    assert_eq!(v["error"], "config");
    assert_eq!(v["field"], "market.alpha");

    let v = run_bin_expect_error(&MINIMAL.replace("\"seeds\": [3]", "\"seedz\": [3]"));
    assert_eq!(v["error"], "config");

    let v = run_bin_expect_error("{\n  \"seeds\": [1,\n");
    assert_eq!(v["error"], "config_parse");
    assert!(v["line"].as_u64().unwrap() >= 2);

    let v = run_bin_expect_error(r#"{"preset": "paper-mixture-a2"}"#);
    assert_eq!(v["field"], "seeds");
}

#[test]
fn failed_run_leaves_existing_artifacts_alone() {
    let dir = tempfile::tempdir().unwrap();
    let old = dir.path().join("trace_osmd_seed3.csv");
    fs::write(&old, "completed earlier\n").unwrap();
    // A huge stepsize makes the model diverge partway through.
    let text = MINIMAL
        .replace("\"gamma\": 0.1", "\"gamma\": 1e150")
        .replace("\"rounds\": 2", "\"rounds\": 50");
    let err = run_experiment(&parse_config(&text).unwrap(), dir.path()).unwrap_err();
    assert_eq!(err.kind(), "non_finite");
    assert_eq!(fs::read_to_string(&old).unwrap(), "completed earlier\n");
    assert_eq!(listing(dir.path()), ["trace_osmd_seed3.csv"]);
}
