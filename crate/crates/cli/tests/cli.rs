//! End-to-end runs of the `s2v` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use chrono::NaiveDate;

const SMALL_RUN: &str = r#"seed = 3
[data]
path = "market.csv"
window = 16
[network]
dense = [{ units = 32, dropout = 0.1 }, { units = 16, dropout = 0.1 }]
head = [16]
[network.tcn]
blocks = 3
channels = 8
[training]
ts_epochs = 2
s2v_cycles = 1
head_cycles = 1
finetune_epochs = 2
"#;

fn s2v(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2v"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = s2v(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = s2v(dir, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// A temp directory holding a small market and the run configuration.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL_RUN).unwrap();
    ok(
        dir.path(),
        &["gen-synthetic", "--series", "6", "--groups", "2", "--days", "160", "--seed", "4", "-o", "market.csv"],
    );
    dir
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

#[test]
fn gen_synthetic_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["gen-synthetic", "--series", "20", "--groups", "4", "--days", "600", "--seed", "7", "-o", out];
    let stdout = ok(dir.path(), &args("a.csv"));
    ok(dir.path(), &args("b.csv"));
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert!(stdout.contains("20 series") && stdout.contains("4 groups"), "{stdout}");
    assert_eq!(
        header(&dir.path().join("a.csv")),
        ["date", "series_id", "symbol", "group", "day_of_week", "month", "lag1", "ma5", "ma20", "target"]
    );
    assert_eq!(read_csv(&dir.path().join("a.csv")).len(), 20 * (600 - 20));
}

#[test]
fn generator_flags_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        vec!["gen-synthetic", "--groups", "0", "-o", "x.csv"],
        vec!["gen-synthetic", "--series", "3", "--groups", "4", "-o", "x.csv"],
        vec!["gen-synthetic", "--days", "10", "-o", "x.csv"],
        vec!["gen-synthetic", "--ar", "1.5", "-o", "x.csv"],
        vec!["gen-synthetic", "--price-spread", "2", "-o", "x.csv"],
        vec!["gen-synthetic"],
    ] {
        assert_eq!(code(dir.path(), &bad).0, 2, "{bad:?}");
    }
    assert!(!dir.path().join("x.csv").exists());
    assert_eq!(code(dir.path(), &["--help"]).0, 0);
    assert_eq!(code(dir.path(), &["frobnicate"]).0, 2);
}

#[test]
fn configuration_problems_are_usage_errors() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("typo.toml"), "[training]\nepochs = 3\n").unwrap();
    let (c, err) = code(p, &["train", "--config", "typo.toml", "--data", "market.csv"]);
    assert_eq!(c, 2);
    assert!(err.contains("epochs"), "{err}");
    std::fs::write(p.join("dates.toml"), "[data]\nvalid_start = \"2017-06-01\"\n").unwrap();
    assert_eq!(code(p, &["train", "--config", "dates.toml", "--data", "market.csv"]).0, 2);
    assert_eq!(code(p, &["train", "--config", "absent.toml"]).0, 2);
    assert_eq!(code(p, &["train", "--config", "run.toml", "--model", "xgboost"]).0, 2);
    // A missing data file is a runtime failure, not a usage error.
    assert_eq!(code(p, &["train", "--config", "run.toml", "--data", "nowhere.csv"]).0, 1);
}

#[test]
fn training_is_reproducible() {
    let dir = workspace();
    let p = dir.path();
    let train = |out: &str, seed: &str| ok(p, &["train", "--config", "run.toml", "--model", "stock2vec", "--seed", seed, "--out-dir", out]);
    // Output differs only in the directory name it reports.
    let first = train("a", "3");
    assert_eq!(first.replace("a/", "b/"), train("b", "3"));
    train("c", "4");
    let read = |d: &str, f: &str| std::fs::read(p.join(d).join(f)).unwrap();
    for f in ["model.ckpt", "epochs.csv"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    let dump = |d: &str| String::from_utf8(read(d, "config.toml")).unwrap();
    assert_eq!(dump("a").replace("\"a\"", "\"b\""), dump("b"));
    assert_ne!(read("a", "model.ckpt"), read("c", "model.ckpt"));
    let epochs = read_csv(&p.join("a/epochs.csv"));
    assert!(!epochs.is_empty());
    assert!(epochs.iter().all(|r| &r[1] == "train" && &r[5] == "0"));
    let dump = String::from_utf8(read("a", "config.toml")).unwrap();
    assert!(dump.contains("model = \"stock2vec\""), "{dump}");
}

#[test]
fn hybrids_need_pretrained_modules() {
    let dir = workspace();
    let p = dir.path();
    let (c, err) = code(p, &["train", "--config", "run.toml", "--model", "tcn-stock2vec", "--out-dir", "hy"]);
    assert_eq!(c, 2, "{err}");
    assert!(!p.join("hy/model.ckpt").exists());
    let stdout = ok(p, &["train", "--config", "run.toml", "--model", "lstm-stock2vec", "--pretrain-auto", "--out-dir", "hy"]);
    for f in ["hy/model.ckpt", "hy/pretrain/stock2vec/model.ckpt", "hy/pretrain/ts-lstm/model.ckpt"] {
        assert!(p.join(f).exists(), "{f}");
    }
    assert!(stdout.contains("lstm-stock2vec"), "{stdout}");
    let stages: Vec<String> = read_csv(&p.join("hy/epochs.csv")).iter().map(|r| r[1].to_string()).collect();
    assert!(stages.contains(&"head".to_string()) && stages.contains(&"finetune".to_string()));

    // Explicit pretrained paths in the config work too.
    let cfg = format!(
        "{SMALL_RUN}[pretrained]\nstock2vec = \"hy/pretrain/stock2vec/model.ckpt\"\ntemporal = \"hy/pretrain/ts-lstm/model.ckpt\"\n"
    );
    std::fs::write(p.join("pre.toml"), cfg).unwrap();
    ok(p, &["train", "--config", "pre.toml", "--model", "lstm-stock2vec", "--out-dir", "hy2"]);
    assert_eq!(std::fs::read(p.join("hy/model.ckpt")).unwrap(), std::fs::read(p.join("hy2/model.ckpt")).unwrap());
    // The wrong temporal model kind is rejected.
    let (c, _) = code(p, &["train", "--config", "pre.toml", "--model", "tcn-stock2vec", "--out-dir", "hy3"]);
    assert_ne!(c, 0);
}

#[test]
fn evaluation_reports_agree_with_predictions() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "run.toml", "--model", "ts-tcn", "--out-dir", "tcn"]);
    let stdout = ok(p, &["evaluate", "--config", "run.toml", "--checkpoint", "tcn/model.ckpt", "--out-dir", "tcn"]);
    assert!(stdout.contains("RMSE") || stdout.contains("rmse"), "{stdout}");
    let preds = read_csv(&p.join("tcn/predictions.csv"));
    assert_eq!(header(&p.join("tcn/predictions.csv")), ["date", "series_id", "group", "actual", "predicted"]);
    let n = preds.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for r in &preds {
        let (y, yhat): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        se += (y - yhat).powi(2);
        ae += (y - yhat).abs();
    }
    let global = read_csv(&p.join("tcn/metrics_global.csv"));
    assert_eq!(global.len(), 1);
    let rmse: f64 = global[0][1].parse().unwrap();
    let mae: f64 = global[0][2].parse().unwrap();
    assert!(((se / n).sqrt() - rmse).abs() < 1e-9 * rmse.max(1.0));
    assert!((ae / n - mae).abs() < 1e-9 * mae.max(1.0));
    let count: usize = global[0][5].parse().unwrap();
    assert_eq!(count, preds.len());
    for by in ["group", "series"] {
        let rows = read_csv(&p.join(format!("tcn/metrics_{by}.csv")));
        let total: usize = rows.iter().map(|r| r[5].parse::<usize>().unwrap()).sum();
        assert_eq!(total, count, "{by}");
    }
    assert_eq!(read_csv(&p.join("tcn/metrics_group.csv")).len(), 2);
    assert_eq!(read_csv(&p.join("tcn/metrics_series.csv")).len(), 6);

    let (c, _) = code(p, &["evaluate", "--config", "run.toml", "--checkpoint", "missing.ckpt"]);
    assert_eq!(c, 1);
}

#[test]
fn predictions_start_at_the_requested_date() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "run.toml", "--model", "stock2vec", "--out-dir", "s"]);
    ok(p, &["predict", "--config", "run.toml", "--checkpoint", "s/model.ckpt", "-o", "all.csv"]);
    ok(p, &["predict", "--config", "run.toml", "--checkpoint", "s/model.ckpt", "--from", "2017-06-01", "-o", "late.csv"]);
    let (all, late) = (read_csv(&p.join("all.csv")), read_csv(&p.join("late.csv")));
    let from = NaiveDate::from_ymd_opt(2017, 6, 1).unwrap();
    let date = |r: &csv::StringRecord| NaiveDate::parse_from_str(&r[0], "%Y-%m-%d").unwrap();
    assert!(!late.is_empty() && late.len() < all.len());
    assert!(late.iter().all(|r| date(r) >= from));
    assert_eq!(all.iter().filter(|r| date(r) >= from).count(), late.len());
}

#[test]
fn embedding_analysis() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "run.toml", "--model", "stock2vec", "--out-dir", "s"]);
    ok(p, &["train", "--config", "run.toml", "--model", "ts-tcn", "--out-dir", "t"]);

    let (c, err) = code(p, &["analyze-embeddings", "--config", "run.toml", "--checkpoint", "t/model.ckpt"]);
    assert_eq!(c, 1, "{err}");

    let stdout = ok(
        p,
        &["analyze-embeddings", "--config", "run.toml", "--checkpoint", "s/model.ckpt", "--out-dir", "s", "--neighbors", "S000", "-k", "3"],
    );
    let ranked: Vec<f64> = stdout
        .lines()
        .filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit()) && l.contains(". S"))
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ranked.len(), 3, "{stdout}");
    assert!(ranked.windows(2).all(|w| w[0] <= w[1]));
    assert!(stdout.contains("purity"), "{stdout}");
    for f in ["projections.csv", "variance.csv", "neighbors.csv"] {
        assert!(p.join("s").join(f).exists(), "{f}");
    }

    ok(p, &["analyze-embeddings", "--config", "run.toml", "--checkpoint", "s/model.ckpt", "--out-dir", "g", "--feature", "group"]);
    let variance = read_csv(&p.join("g/variance.csv"));
    let last: f64 = variance.last().unwrap()[2].parse().unwrap();
    assert!((last - 1.0).abs() < 1e-9);

    let (c, err) = code(p, &["analyze-embeddings", "--config", "run.toml", "--checkpoint", "s/model.ckpt", "--feature", "colour"]);
    assert_eq!(c, 1, "{err}");
    assert!(err.contains("symbol"), "available features are listed: {err}");
}

#[test]
fn toy_stock2vec_trains_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let p: PathBuf = dir.path().into();
    ok(&p, &["gen-synthetic", "--seed", "1", "-o", "toy.csv"]);
    std::fs::write(
        p.join("toy.toml"),
        "model = \"stock2vec\"\n[data]\npath = \"toy.csv\"\n[training]\ns2v_cycle_epochs = 5\ns2v_cycles = 1\n",
    )
    .unwrap();
    let t = Instant::now();
    ok(&p, &["train", "--config", "toy.toml", "--out-dir", "toy"]);
    assert!(t.elapsed() < Duration::from_secs(120), "took {:?}", t.elapsed());
    assert_eq!(read_csv(&p.join("toy/epochs.csv")).len(), 5);
}
