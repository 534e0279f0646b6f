use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sti_forecast::cli::{sha256_hex, sidecar_path, EvaluationFile, ForecastFile, RunManifest};
use sti_forecast::data::parse_csv;

const BIN: &str = env!("CARGO_BIN_EXE_sti-forecast");

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["generate", "--units", "3", "--steps", "40", "--seed", "1", "--out", s(&path)];
    args.extend_from_slice(extra);
    let out = cli(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn predict_small(dir: &Path, data: &Path, name: &str, horizon: usize) -> PathBuf {
    let path = dir.join(name);
    let h = horizon.to_string();
    let out = cli(&[
        "predict", "--data", s(data), "--target", "y2", "--train-len", "15", "--horizon", &h, "--out", s(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn read_forecast(path: &Path) -> ForecastFile {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_forecast(path: &Path, f: &ForecastFile) {
    std::fs::write(path, serde_json::to_string(f).unwrap()).unwrap()
}

#[test]
fn generate_lorenz_shape_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lorenz.csv");
    let out = cli(&["generate", "--system", "lorenz", "--units", "30", "--steps", "200", "--seed", "42", "--out", s(&path)]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    let ds = parse_csv(&text).unwrap();
    assert_eq!((ds.n_vars(), ds.len()), (90, 200));
    assert_eq!(ds.names()[45], "x16");

    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(manifest.dataset_digest, sha256_hex(text.as_bytes()));
    assert_eq!(manifest.seed, 42);
    assert!(manifest.duration_secs.is_some());
    assert_eq!(manifest.config["units"], 30);
    let again = serde_json::to_string(&manifest).unwrap();
    assert_eq!(serde_json::from_str::<RunManifest>(&again).unwrap(), manifest);
}

#[test]
fn generate_is_deterministic_and_noise_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_small(dir.path(), "a.csv", &["--system", "pendulum"]);
    let b = generate_small(dir.path(), "b.csv", &["--system", "pendulum"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let noisy = generate_small(dir.path(), "n.csv", &["--system", "pendulum", "--noise-std", "1.732"]);
    let (clean, noisy) = (
        parse_csv(&std::fs::read_to_string(&a).unwrap()).unwrap(),
        parse_csv(&std::fs::read_to_string(&noisy).unwrap()).unwrap(),
    );
    let diff = clean.values() - noisy.values();
    let rms = (diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64).sqrt();
    assert!((1.3..2.2).contains(&rms), "noise rms {rms}");
}

#[test]
fn usage_errors_exit_2_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cli(&["generate", "--system", "lorenz"])), 2);
    assert_eq!(code(&cli(&["frobnicate"])), 2);
    assert_eq!(code(&cli(&["--help"])), 0);

    let data = generate_small(dir.path(), "d.csv", &[]);
    let out = dir.path().join("f.json");
    let base = ["predict", "--data", s(&data), "--out", s(&out)];
    let cases: [&[&str]; 6] = [
        &["--target", "nope", "--train-len", "15", "--horizon", "4"],
        &["--target", "9", "--train-len", "15", "--horizon", "4"],
        &["--target", "x1", "--train-len", "41", "--horizon", "4"],
        &["--target", "x1", "--train-len", "15", "--horizon", "15"],
        &["--target", "x1", "--train-len", "15", "--horizon", "4", "--ntask", "0"],
        &["--target", "x1", "--train-len", "15", "--horizon", "4", "--smooth-window", "16"],
    ];
    for extra in cases {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let result = cli(&args);
        assert_eq!(code(&result), 2, "{extra:?}: {}", String::from_utf8_lossy(&result.stderr));
        assert!(!result.stderr.is_empty());
    }
    let missing = cli(&["predict", "--data", s(&dir.path().join("absent.csv")), "--target", "x1", "--train-len", "5", "--horizon", "2", "--out", s(&out)]);
    assert_eq!(code(&missing), 2);
    assert!(!out.exists());
    assert!(!sidecar_path(&out).exists());
}

#[test]
fn integration_blow_up_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("boom.csv");
    let result = cli(&["generate", "--units", "3", "--steps", "20", "--dt", "5", "--out", s(&out)]);
    assert_eq!(code(&result), 3, "{}", String::from_utf8_lossy(&result.stderr));
    assert!(!out.exists());
}

#[test]
fn predict_output_follows_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let path = predict_small(dir.path(), &data, "f.json", 6);
    let f = read_forecast(&path);
    assert_eq!(f.schema, 1);
    assert_eq!((f.target.as_str(), f.target_index), ("y2", 4));
    assert_eq!((f.train_len, f.horizon), (15, 6));
    assert_eq!(f.steps.iter().map(|s| s.t).collect::<Vec<_>>(), (16..=21).collect::<Vec<_>>());
    assert_eq!(f.steps.iter().map(|s| s.contributors).collect::<Vec<_>>(), vec![6, 5, 4, 3, 2, 1]);
    assert_eq!(f.raw.len(), 21);
    assert_eq!(f.blocks.iter().map(|b| b.rows.len()).collect::<Vec<_>>(), vec![5, 2]);
    assert_eq!(f.history.len(), 15);
    assert_eq!(f.manifest.blocks.len(), 2);
    assert!(f.manifest.duration_secs.is_none());
    assert_eq!(f.manifest.dataset_digest, sha256_hex(&std::fs::read(&data).unwrap()));

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["schema", "target", "train_len", "horizon", "steps", "raw", "blocks", "manifest"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert!(json["raw"][0].get("row_l").is_some());
    assert!(json["blocks"][0]["theta"]["length_scale"].is_number());

    let sidecar: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
    assert!(sidecar.duration_secs.is_some());
    assert_eq!(RunManifest { duration_secs: None, ..sidecar }, f.manifest);
}

#[test]
fn predict_variants_by_index_ard_and_smoothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let out = dir.path().join("v.json");
    let result = cli(&[
        "predict", "--data", s(&data), "--target", "4", "--train-len", "15", "--horizon", "3", "--ntask", "1",
        "--ard", "--smooth-window", "5", "--restarts", "2", "--seed", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&result), 0, "{}", String::from_utf8_lossy(&result.stderr));
    let f = read_forecast(&out);
    assert_eq!(f.target, "y2");
    assert_eq!(f.blocks.len(), 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["blocks"][0]["theta"]["length_scale"].as_array().unwrap().len(), 9);
}

#[test]
fn predict_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let path = predict_small(dir.path(), &data, "f.json", 6);
    let first = std::fs::read(&path).unwrap();
    predict_small(dir.path(), &data, "f.json", 6);
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn predict_ignores_everything_after_the_training_window() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let text = std::fs::read_to_string(&data).unwrap();
    // Blank out every cell after row 15 and corrupt the rest of y2.
    let edited: String = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            if i <= 15 {
                format!("{line}\n")
            } else {
                let t = line.split(',').next().unwrap();
                format!("{t},,,,,-1e9,,,,\n")
            }
        })
        .collect();
    let other = dir.path().join("e.csv");
    std::fs::write(&other, edited).unwrap();
    let a = read_forecast(&predict_small(dir.path(), &data, "a.json", 6));
    let b = read_forecast(&predict_small(dir.path(), &other, "b.json", 6));
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.raw, b.raw);
}

#[test]
fn evaluate_perfect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let path = predict_small(dir.path(), &data, "f.json", 6);
    let ds = parse_csv(&std::fs::read_to_string(&data).unwrap()).unwrap();
    let truth = &ds.series(4)[15..21];
    let mut f = read_forecast(&path);
    for (step, v) in f.steps.iter_mut().zip(truth) {
        step.mean = *v;
    }
    let perfect = dir.path().join("perfect.json");
    write_forecast(&perfect, &f);

    let metrics = dir.path().join("m.json");
    let out = cli(&["evaluate", "--forecast", s(&perfect), "--truth", s(&data), "--out", s(&metrics)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvaluationFile = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!((report.forecast.mae, report.forecast.rmse, report.forecast.pcc), (0.0, 0.0, Some(1.0)));
    assert_eq!(report.method, "mt-gpr(J=5)");
    assert_eq!(report.persistence.pcc, None);

    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, vec!["method", "mt-gpr(J=5)", "persistence", "drift"]);
    assert!(table.contains("n/a"));
}

#[test]
fn evaluate_accepts_a_future_only_truth_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let path = predict_small(dir.path(), &data, "f.json", 6);
    let text = std::fs::read_to_string(&data).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let future = std::iter::once(lines[0]).chain(lines[16..22].iter().copied()).collect::<Vec<_>>().join("\n");
    let truth = dir.path().join("future.csv");
    std::fs::write(&truth, future).unwrap();

    let full = cli(&["evaluate", "--forecast", s(&path), "--truth", s(&data)]);
    let only = cli(&["evaluate", "--forecast", s(&path), "--truth", s(&truth)]);
    assert_eq!(code(&only), 0);
    assert_eq!(full.stdout, only.stdout);
}

#[test]
fn evaluate_horizon_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let path = predict_small(dir.path(), &data, "f.json", 6);
    let mut f = read_forecast(&path);
    f.horizon = 5;
    f.steps.pop();
    write_forecast(&path, &f);
    // a 6-row future window against a 5-step forecast
    let text = std::fs::read_to_string(&data).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let six = std::iter::once(lines[0]).chain(lines[16..22].iter().copied()).collect::<Vec<_>>();
    let truth = dir.path().join("six.csv");
    std::fs::write(&truth, six.join("\n")).unwrap();
    let metrics = dir.path().join("m.json");
    let out = cli(&["evaluate", "--forecast", s(&path), "--truth", s(&truth), "--out", s(&metrics)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon mismatch"));
    assert!(!metrics.exists());
}

#[test]
fn report_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path(), "d.csv", &[]);
    let path = predict_small(dir.path(), &data, "f.json", 6);
    let f = read_forecast(&path);

    let bare = dir.path().join("bare.csv");
    assert_eq!(code(&cli(&["report", "--forecast", s(&path), "--out", s(&bare)])), 0);
    let text = std::fs::read_to_string(&bare).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], vec!["t", "truth", "predicted", "dispersion", "split"]);
    assert_eq!(rows.len(), 1 + 21);
    for (i, row) in rows[1..].iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        if i < 15 {
            assert_eq!(row[1].parse::<f64>().unwrap(), f.history[i]);
            assert_eq!((row[2], row[3], row[4]), ("", "", "train"));
        } else {
            assert_eq!(row[1], "");
            assert_eq!(row[2].parse::<f64>().unwrap(), f.steps[i - 15].mean);
            assert_eq!(row[4], "forecast");
        }
    }

    let with_truth = dir.path().join("full.csv");
    assert_eq!(code(&cli(&["report", "--forecast", s(&path), "--truth", s(&data), "--out", s(&with_truth)])), 0);
    let full = std::fs::read_to_string(&with_truth).unwrap();
    assert!(full.lines().skip(1).all(|l| !l.split(',').nth(1).unwrap().is_empty()));
    let again = dir.path().join("again.csv");
    assert_eq!(code(&cli(&["report", "--forecast", s(&path), "--truth", s(&data), "--out", s(&again)])), 0);
    assert_eq!(full, std::fs::read_to_string(&again).unwrap());

    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{not json").unwrap();
    assert_eq!(code(&cli(&["report", "--forecast", s(&garbage), "--out", s(&again)])), 2);
}

#[test]
fn lorenz_paper_configuration_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("lorenz.csv");
    assert_eq!(code(&cli(&["generate", "--units", "30", "--steps", "60", "--seed", "42", "--out", s(&data)])), 0);
    let forecast = dir.path().join("f.json");
    let out = cli(&[
        "predict", "--data", s(&data), "--target", "x16", "--train-len", "30", "--horizon", "25", "--ntask", "5",
        "--seed", "7", "--out", s(&forecast),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let f = read_forecast(&forecast);
    assert_eq!(f.steps.len(), 25);
    assert_eq!(f.raw.len(), 26 * 25 / 2);

    let plot = dir.path().join("plot.csv");
    assert_eq!(code(&cli(&["report", "--forecast", s(&forecast), "--out", s(&plot)])), 0);
    assert_eq!(std::fs::read_to_string(&plot).unwrap().lines().count(), 1 + 55);
}
