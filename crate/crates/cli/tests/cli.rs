use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[region]
bbox = [0.0, 20.0, 0.0, 10.0]
rows = 1
cols = 2
resolution = 1.0

[fit]
train = [0, 900]

[evaluate]
train = [0, 900]
test = [900, 1000]
threshold_events = 100

[scenario]
bbox = [0.0, 20.0, 0.0, 10.0]
horizon = 1000
seed = 3
intensity = { kind = "constant", rate = 23.0 }

[[scenario.components]]
center = [5.0, 5.0]
covariance = [1.5, 0.2, 1.5]
daily_amplitude = 1.0
daily_peak = 3.0

[[scenario.components]]
center = [15.0, 5.0]
covariance = [1.5, -0.2, 1.5]
daily_amplitude = 1.0
daily_peak = 15.0
ar_coefficient = 0.9
ar_sigma = 0.2
"#;

fn stkde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stkde"))
        .args(args)
        .env_remove("STKDE_CONFIG")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(dir: &Path) -> String {
    let config = dir.join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    config.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn simulate_fit_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d);
    ok(stkde(&[
        "simulate",
        "--config",
        &config,
        "--out",
        &p(d, "sim"),
    ]));
    let events = p(d, "sim/events.csv");
    assert!(fs::read_to_string(&events)
        .unwrap()
        .starts_with("timestamp,x_km,y_km\n"));
    assert!(d.join("sim/truth_weights.csv").exists() && d.join("sim/truth.txt").exists());

    ok(stkde(&[
        "fit",
        "--config",
        &config,
        "--events",
        &events,
        "--out",
        &p(d, "fit"),
    ]));
    let fits = fs::read_to_string(d.join("fit/fits.csv")).unwrap();
    let rows: Vec<&str> = fits.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(
        rows.iter().all(|r| r.split(',').nth(2) == Some("false")),
        "{fits}"
    );
    assert!(d.join("fit/acf.csv").exists() && d.join("fit/summary.txt").exists());

    ok(stkde(&[
        "predict",
        "--config",
        &config,
        "--model",
        &p(d, "fit/model.txt"),
        "--events",
        &events,
        "--target",
        "950,960..962",
        "--out",
        &p(d, "pred"),
    ]));
    for t in [950, 960, 961] {
        let grid = fs::read_to_string(d.join(format!("pred/grid_{t}.csv"))).unwrap();
        assert_eq!(grid.lines().count(), 1 + 20 * 10);
        let meta = fs::read_to_string(d.join(format!("pred/grid_{t}.meta"))).unwrap();
        assert!(meta.contains(&format!("target_hour = {t}")) && meta.contains("retained = "));
    }

    ok(stkde(&[
        "evaluate",
        "--config",
        &config,
        "--out",
        &p(d, "eval"),
    ]));
    let table = fs::read_to_string(d.join("eval/table.txt")).unwrap();
    for row in [
        "stKDE",
        "+ interpolation",
        "+ threshold (less data)",
        "MEDIC",
        "naiveKDE most recent hour",
        "naiveKDE all equal weights",
    ] {
        assert!(table.contains(row), "{table}");
    }
    assert!(table.contains("events retained per prediction"));
    let report = fs::read_to_string(d.join("eval/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 7);
    assert!(d.join("eval/per_hour.csv").exists() && d.join("eval/timing.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d);
    ok(stkde(&[
        "simulate",
        "--config",
        &config,
        "--out",
        &p(d, "sim"),
    ]));
    let events = p(d, "sim/events.csv");
    for run in ["a", "b"] {
        ok(stkde(&[
            "fit",
            "--config",
            &config,
            "--events",
            &events,
            "--out",
            &p(d, run),
        ]));
        ok(stkde(&[
            "evaluate",
            "--config",
            &config,
            "--events",
            &events,
            "--out",
            &p(d, run),
        ]));
    }
    for file in [
        "model.txt",
        "fits.csv",
        "acf.csv",
        "report.csv",
        "per_hour.csv",
        "table.txt",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(file)).unwrap(),
            fs::read(d.join("b").join(file)).unwrap(),
            "{file}"
        );
    }
    let again = d.join("sim2");
    ok(stkde(&[
        "simulate",
        "--config",
        &config,
        "--out",
        again.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(d.join("sim/events.csv")).unwrap(),
        fs::read(again.join("events.csv")).unwrap()
    );
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d);
    ok(stkde(&[
        "simulate",
        "--config",
        &config,
        "--out",
        &p(d, "sim"),
    ]));
    let events = p(d, "sim/events.csv");

    // usage
    assert_eq!(stkde(&["fit"]).status.code(), Some(2));
    // configuration
    let bad = p(d, "bad.toml");
    fs::write(&bad, "[region]\nnonsense = 1\n").unwrap();
    assert_eq!(
        stkde(&["fit", "--config", &bad, "--events", &events])
            .status
            .code(),
        Some(2)
    );

    // too little training data is a data error naming the span
    let short = p(d, "short.toml");
    fs::write(
        &short,
        CONFIG.replace("train = [0, 900]", "train = [0, 500]"),
    )
    .unwrap();
    let out = stkde(&[
        "fit",
        "--config",
        &short,
        "--events",
        &events,
        "--out",
        &p(d, "x"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("840"));

    // empty prediction window
    ok(stkde(&[
        "fit",
        "--config",
        &config,
        "--events",
        &events,
        "--out",
        &p(d, "fit"),
    ]));
    let out = stkde(&[
        "predict",
        "--config",
        &config,
        "--model",
        &p(d, "fit/model.txt"),
        "--events",
        &events,
        "--target",
        "5000",
        "--out",
        &p(d, "pred"),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // corrupted model file
    let model = fs::read_to_string(d.join("fit/model.txt")).unwrap();
    fs::write(d.join("fit/model.txt"), &model[..model.len() / 2]).unwrap();
    let out = stkde(&[
        "predict",
        "--model",
        &p(d, "fit/model.txt"),
        "--events",
        &events,
        "--target",
        "950",
        "--out",
        &p(d, "pred"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d);
    let out = Command::new(env!("CARGO_BIN_EXE_stkde"))
        .args(["simulate", "--out", &p(d, "sim")])
        .env("STKDE_CONFIG", &config)
        .output()
        .unwrap();
    ok(out);
    let truth = fs::read_to_string(d.join("sim/truth.txt")).unwrap();
    assert!(truth.contains("horizon = 1000") && truth.contains("components = 2"));
}
