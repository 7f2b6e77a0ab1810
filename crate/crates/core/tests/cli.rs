use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_autodml-iv");
const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/fixture200.csv");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("valid json")
}

fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(text.trim()).expect("error object on stderr");
    v["error"].clone()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect()
}

#[test]
fn fit_late_on_the_fixture() {
    let out = run(&[
        "fit",
        "--data",
        FIXTURE,
        "--set",
        "covariates=x",
        "--seed",
        "4",
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["theta"].as_array().unwrap().len(), 1);
    assert!(report["se"][0].as_f64().unwrap() > 0.0);
    assert_eq!(report["diagnostics"]["folds"], 5);
    assert_eq!(
        report["diagnostics"]["per_fold"].as_array().unwrap().len(),
        5
    );
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(report["seed"], 4);
    assert_eq!(report["config"]["covariates"][0], "x");
    assert_eq!(report["config"]["seed"], 4);
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let out = run(&["fit", "--data", FIXTURE, "--set", "covariates=x"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let theta_line = text
        .lines()
        .skip_while(|l| !l.contains("\"theta\""))
        .nth(1)
        .unwrap()
        .trim();
    let mantissa = theta_line.trim_end_matches(',').split('e').next().unwrap();
    assert_eq!(
        mantissa.trim_start_matches('-').replace('.', "").len(),
        17,
        "{theta_line}"
    );
}

#[test]
fn fit_cdf_carries_a_band() {
    let out = run(&[
        "fit",
        "--data",
        FIXTURE,
        "--set",
        "covariates=x",
        "--target",
        "cdf",
        "--grid",
        "-1,0,1,2",
        "--bootstrap-draws",
        "2000",
        "--alpha",
        "0.1",
    ]);
    let report = stdout_json(&out);
    let band = &report["band"];
    assert_eq!(band["B"], 2000);
    assert_eq!(band["alpha"].as_f64(), Some(0.1));
    let coords = band["coordinates"].as_array().unwrap();
    assert_eq!(band["lower"].as_array().unwrap().len(), coords.len());
    assert!(band["c"].as_f64().unwrap() > 1.0);
}

#[test]
fn each_method_runs() {
    for method in ["auto", "plugin", "kappa"] {
        let out = run(&[
            "fit",
            "--data",
            FIXTURE,
            "--set",
            "covariates=x",
            "--method",
            method,
            "--trim",
            "censor",
        ]);
        assert_eq!(stdout_json(&out)["method"], method);
    }
}

#[test]
fn missing_data_file_exits_3() {
    let out = run(&["fit", "--data", "/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "data");
    assert_eq!(err["code"], 3);
}

#[test]
fn descending_grid_exits_2() {
    let out = run(&[
        "fit",
        "--data",
        FIXTURE,
        "--set",
        "covariates=x",
        "--target",
        "cdf",
        "--grid",
        "2,1,0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["kind"], "config");
}

#[test]
fn config_file_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("run.conf");
    std::fs::write(
        &good,
        format!("# fixture run\ndata = {FIXTURE}\ncovariates = x\nfolds = 3\n"),
    )
    .unwrap();
    let report = stdout_json(&run(&[
        "fit",
        "--config",
        good.to_str().unwrap(),
        "--folds",
        "4",
    ]));
    assert_eq!(report["diagnostics"]["folds"], 4);

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "data = x.csv\nlambda = 3\n").unwrap();
    let out = run(&["fit", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out)["message"]
        .as_str()
        .unwrap()
        .contains("lambda"));

    let out = run(&["fit", "--data", FIXTURE, "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["fit", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn weak_first_stage_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weak.csv");
    let mut text = String::from("y,d,z,x\n");
    for i in 0..100 {
        text.push_str(&format!("{},0,{},{}\n", i % 7, i % 2, f64::from(i) / 100.0));
    }
    std::fs::write(&path, text).unwrap();
    let out = run(&["fit", "--data", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_error(&out)["kind"], "estimation");
}

#[test]
fn truth_default_grid_has_sixteen_rows() {
    let out = run(&["truth", "--grid", "default"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 16);
    let beta0: Vec<&str> = rows
        .iter()
        .find(|r| r.starts_with("beta,0,"))
        .unwrap()
        .split(',')
        .collect();
    assert!((beta0[2].parse::<f64>().unwrap() - 0.617_805_790).abs() < 1e-8);
    let delta0: Vec<&str> = rows
        .iter()
        .find(|r| r.starts_with("delta,0,"))
        .unwrap()
        .split(',')
        .collect();
    assert!((delta0[2].parse::<f64>().unwrap() - 0.195_225_789).abs() < 1e-8);
}

#[test]
fn simulate_shape() {
    let out = run(&[
        "simulate",
        "--design",
        "appendix-f",
        "--reps",
        "10",
        "--seed",
        "1",
        "--methods",
        "auto,plugin-none",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\nmethod,parameter,y,median,q10,q90,failures\n"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 32);
    for method in ["auto", "plugin-none"] {
        for param in ["beta", "delta"] {
            let prefix = format!("{method},{param},");
            assert_eq!(rows.iter().filter(|r| r.starts_with(&prefix)).count(), 8);
        }
    }
    let out = run(&["simulate", "--design", "other", "--reps", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_instruments_give_zero_statistic() {
    let out = run(&[
        "test-instruments",
        "--data",
        FIXTURE,
        "--set",
        "covariates=x",
        "--instrument2",
        "z",
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["wald"]["W"].as_f64(), Some(0.0));
    assert_eq!(report["wald"]["p"].as_f64(), Some(1.0));
    assert_eq!(report["wald"]["reject"], false);

    let report = stdout_json(&run(&[
        "test-instruments",
        "--data",
        FIXTURE,
        "--set",
        "covariates=x",
        "--instrument2",
        "z2",
    ]));
    assert!(report["wald"]["W"].as_f64().unwrap() > 0.0);
    assert_eq!(report["wald"]["df"], 1);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn every_command_is_byte_identical_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec![
            "fit",
            "--data",
            FIXTURE,
            "--set",
            "covariates=x",
            "--target",
            "cdf",
            "--seed",
            "7",
        ],
        vec![
            "fit",
            "--data",
            FIXTURE,
            "--set",
            "covariates=x",
            "--method",
            "plugin",
            "--seed",
            "7",
        ],
        vec!["simulate", "--reps", "6", "--n", "300", "--seed", "7"],
        vec!["truth"],
        vec![
            "test-instruments",
            "--data",
            FIXTURE,
            "--set",
            "covariates=x",
            "--instrument2",
            "z2",
            "--seed",
            "7",
        ],
    ];
    for (k, cmd) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for (t, threads) in ["1", "3", "1"].iter().enumerate() {
            let path = dir.path().join(format!("out{k}_{t}"));
            let mut args = cmd.clone();
            args.extend(["--threads", threads, "--out", path.to_str().unwrap()]);
            let out = run(&args);
            assert!(
                out.status.success(),
                "{cmd:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            outputs.push(read(&path));
        }
        assert_eq!(
            outputs[0], outputs[1],
            "{cmd:?} differs across thread counts"
        );
        assert_eq!(outputs[0], outputs[2], "{cmd:?} differs across reruns");
    }
}
