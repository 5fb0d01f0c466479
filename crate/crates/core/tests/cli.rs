use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use geotoken::config::DecodeMode;
use geotoken::geocell::{detokenize, tokenize};
use geotoken::pipeline::Prediction;
use geotoken::synthworld::load_jsonl;
use geotoken::TokenSequence;

const BIN: &str = env!("CARGO_BIN_EXE_geotoken");

/// Small enough that every stage finishes in a few seconds.
const TINY: &str = r#"version = 1

[world]
n_samples = 800
n_clusters = 3

[align]
epochs = 2
batch_size = 64

[model]
d_model = 16
n_heads = 2
n_layers_enc = 1
n_layers_dec = 1
d_ffn = 32
neighbors = 3

[train]
epochs = 4
batch_size = 16

[train.optimizer]
lr = 3e-3

[predict]
pool_size = 6

[reward]
queries = 60
pool_size = 4
epochs = 20

[sweep]
pool_sizes = [2, 4, 6]
temperatures = [0.5, 1.0]
max_queries = 30
"#;

fn geotoken(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn report_values(path: &Path) -> Vec<(String, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("metric"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn tokenize_round_trips_through_reverse() {
    let tokens = stdout(&geotoken(&["tokenize", "0,0"])).trim().to_string();
    assert_eq!(tokens.len(), 21);
    assert!(tokens.chars().all(|c| c.is_ascii_digit()));
    let center = stdout(&geotoken(&["tokenize", "--reverse", &tokens]))
        .trim()
        .to_string();
    let t: TokenSequence = tokens.parse().unwrap();
    let c = detokenize(&t);
    assert_eq!(center, format!("{},{}", c.lat(), c.lon()));
    let again = stdout(&geotoken(&["tokenize", &center])).trim().to_string();
    assert_eq!(again, tokens);

    let mut child = Command::new(BIN)
        .args(["tokenize", "--levels", "5"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"-33.86,151.2\n\n48.85, 2.35\n")
        .unwrap();
    let out = stdout(&child.wait_with_output().unwrap());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        tokenize(geotoken::LatLon::new(-33.86, 151.2).unwrap(), 5)
            .unwrap()
            .to_string()
    );
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "version = 1\n[model]\nd_modl = 3\n").unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        geotoken(&["gen", "--config", bad.to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(geotoken(&["tokenize", "91,0"]).status.code(), Some(2));
    assert_eq!(geotoken(&["no-such-command"]).status.code(), Some(2));
    // No data has been generated in this directory.
    assert_eq!(geotoken(&["train-align", "--out", out]).status.code(), Some(3));
}

#[test]
fn evaluate_scores_perfect_predictions_at_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().to_str().unwrap();
    stdout(&geotoken(&["gen", "--config", cfg.to_str().unwrap(), "--out", out]));
    let truths = load_jsonl(&dir.path().join("test.jsonl")).unwrap();
    let preds = dir.path().join("predictions_truth.jsonl");
    let mut w = std::fs::File::create(&preds).unwrap();
    for s in &truths {
        let p = Prediction {
            id: s.id,
            lat: s.lat,
            lon: s.lon,
            tokens: tokenize(s.location(), 21).unwrap().to_string(),
            logprob: None,
            mode: DecodeMode::Greedy,
            selector: None,
            fallback: false,
            config_hash: "0000000000000000".into(),
        };
        serde_json::to_writer(&mut w, &p).unwrap();
        writeln!(w).unwrap();
    }
    drop(w);
    stdout(&geotoken(&[
        "evaluate",
        "--out",
        out,
        "--predictions",
        preds.to_str().unwrap(),
    ]));
    let values = report_values(&dir.path().join("report_truth.csv"));
    assert_eq!(values.len(), 6);
    for (name, v) in values {
        let want = if name == "median_km" { 0.0 } else { 1.0 };
        assert_eq!(v, want, "{name}");
    }
}

#[test]
fn every_stage_runs_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let common = ["--config", cfg, "--out", out];
    for stage in ["gen", "train-align", "build-gallery", "train-model", "train-reward"] {
        let mut args = vec![stage];
        args.extend(common);
        stdout(&geotoken(&args));
    }
    let runs: [&[&str]; 7] = [
        &["--mode", "greedy"],
        &["--mode", "beam", "--beam", "3"],
        &["--mode", "knn"],
        &["--mode", "pool", "--selector", "logprob", "--dump-pools"],
        &[
            "--mode",
            "pool",
            "--selector",
            "similarity",
            "--k",
            "4",
            "--temperature",
            "0.5",
        ],
        &["--mode", "pool", "--selector", "reward"],
        &["--mode", "pool", "--selector", "ideal"],
    ];
    let root = Path::new(out);
    let n_test = load_jsonl(&root.join("test.jsonl")).unwrap().len();
    let mut medians = Vec::new();
    for extra in runs {
        let mut args = vec!["predict"];
        args.extend(common);
        args.extend(extra);
        let path = stdout(&geotoken(&args)).trim().to_string();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), n_test, "{path}");
        let evaluated = geotoken(&["evaluate", "--out", out, "--predictions", &path]);
        let report = stdout(&evaluated);
        let median: f64 = report
            .lines()
            .find(|l| l.starts_with("median_km"))
            .and_then(|l| l.split(',').nth(1))
            .unwrap()
            .parse()
            .unwrap();
        medians.push(median);
    }
    assert!(root.join("pools_pool6_t0.7_logprob.jsonl").exists());
    assert!(root.join("config_predict_beam3.toml").exists());
    // Closest-in-pool can only improve on log-probability selection.
    assert!(medians[6] <= medians[3]);

    let mut args = vec!["sweep"];
    args.extend(common);
    let csv = stdout(&geotoken(&args));
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for w in rows.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            assert!(b <= a);
        }
    }
    let sweep = std::fs::read_to_string(root.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("# config_hash = "));
}

#[test]
fn concurrent_runs_on_one_directory_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "").unwrap();
    let o = geotoken(&["gen", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}
