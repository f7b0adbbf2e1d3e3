use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use samba_core::checkpoint::Checkpoint;
use samba_core::data::{write_feature_csv, MinMaxScaler, SplitSpec};
use samba_core::synthetic::desk_frame;
use samba_core::{Hyper, SambaModel, Tensor};
use tempfile::TempDir;

fn samba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samba")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// 140 days of the 10-feature desk data and a small fast config.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        write_feature_csv(&desk_frame(140, 21), dir.path().join("desk.csv")).unwrap();
        let fx = Self { dir };
        fx.config("run.json", r#""epochs": 3, "batch_size": 32"#);
        fx
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            r#"{{"dataset": "desk.csv", "out": "out", "e": 8, "h": 4, "u": 6, "r": 1, "k": 2, "d_e": 3, "seed": 7, {extra}}}"#
        );
        let path = self.path(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    fn train(&self, extra: &[&str]) -> Output {
        let cfg = self.path("run.json");
        let mut args = vec!["train", "--config", p(&cfg)];
        args.extend_from_slice(extra);
        samba(&args)
    }
}

#[test]
fn train_writes_three_artifacts() {
    let fx = Fixture::new();
    let o = fx.train(&[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["model.samba", "history.csv", "resolved-config.json"] {
        assert!(fx.path("out").join(name).exists(), "{name} missing");
    }
    assert!(!fx.path("out/.samba.lock").exists());
    let history = std::fs::read_to_string(fx.path("out/history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_rmse");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));
    let ck = Checkpoint::load(fx.path("out/model.samba")).unwrap();
    assert_eq!(ck.model.hyper.n, 10);
    assert_eq!(ck.feature_names[0], "x0");
}

#[test]
fn identical_runs_are_byte_identical_and_resolved_config_reproduces() {
    let fx = Fixture::new();
    assert_eq!(fx.train(&["--out", p(&fx.path("a"))]).status.code(), Some(0));
    assert_eq!(fx.train(&["--out", p(&fx.path("b"))]).status.code(), Some(0));
    for name in ["history.csv", "model.samba"] {
        let a = std::fs::read(fx.path("a").join(name)).unwrap();
        let b = std::fs::read(fx.path("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    let resolved = fx.path("a/resolved-config.json");
    let o = samba(&["train", "--config", p(&resolved), "--out", p(&fx.path("c"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(fx.path("a/history.csv")).unwrap(),
        std::fs::read(fx.path("c/history.csv")).unwrap()
    );
    let o = fx.train(&["--seed", "8", "--out", p(&fx.path("d"))]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(
        std::fs::read(fx.path("a/model.samba")).unwrap(),
        std::fs::read(fx.path("d/model.samba")).unwrap()
    );
}

#[test]
fn flag_overrides_are_recorded() {
    let fx = Fixture::new();
    let o = fx.train(&["--epochs", "2", "--lr", "0.002"]);
    assert_eq!(o.status.code(), Some(0));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("out/resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["epochs"], 2);
    assert_eq!(resolved["lr"], 0.002);
    assert_eq!(resolved["batch_size"], 32);
    assert_eq!(resolved["l"], 5);
    assert!(Path::new(resolved["dataset"].as_str().unwrap()).is_absolute());
}

#[test]
fn schema_and_config_errors_exit_2() {
    let fx = Fixture::new();
    let text = std::fs::read_to_string(fx.path("desk.csv")).unwrap();
    std::fs::write(fx.path("desk.csv"), text.replacen("Close", "Last", 1)).unwrap();
    let o = fx.train(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Close"), "{}", stderr(&o));

    let fx = Fixture::new();
    fx.config("run.json", r#""batch_size": "many""#);
    let o = fx.train(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    fx.config("run.json", r#""d_e": 10"#);
    let o = fx.train(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d_e"), "{}", stderr(&o));

    let o = samba(&["train", "--config", p(&fx.path("absent.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(samba(&["bogus"]).status.code(), Some(2));
    assert_eq!(samba(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergent_training_exits_3() {
    let fx = Fixture::new();
    fx.config("run.json", r#""epochs": 5, "lr": 1e200"#);
    let o = fx.train(&[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn held_lock_and_bad_thread_count_exit_2() {
    let fx = Fixture::new();
    std::fs::create_dir_all(fx.path("out")).unwrap();
    std::fs::write(fx.path("out/.samba.lock"), "1").unwrap();
    let o = fx.train(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("in use"));

    let cfg = fx.path("run.json");
    let o = Command::new(env!("CARGO_BIN_EXE_samba"))
        .args(["train", "--config", p(&cfg), "--out", p(&fx.path("t"))])
        .env("SAMBA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("SAMBA_THREADS"));
    let o = Command::new(env!("CARGO_BIN_EXE_samba"))
        .args(["train", "--config", p(&cfg), "--out", p(&fx.path("t"))])
        .env("SAMBA_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn eval_and_predict_agree() {
    let fx = Fixture::new();
    assert_eq!(fx.train(&[]).status.code(), Some(0));
    let ck = fx.path("out/model.samba");
    let data = fx.path("desk.csv");
    let o = samba(&["eval", "--checkpoint", p(&ck), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("rmse"));

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("out/metrics.json")).unwrap()).unwrap();
    let keys: Vec<&String> = metrics.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["ic", "ric", "rmse"]);

    // 140 days, L = 5: 135 samples, split 108 / 6 / 21.
    let predictions = std::fs::read_to_string(fx.path("out/predictions.csv")).unwrap();
    let rows: Vec<&str> = predictions.lines().skip(1).collect();
    assert_eq!(rows.len(), SplitSpec::default().sizes(135).2);
    assert_eq!(rows.len(), 21);

    for row in [rows[0], rows[rows.len() - 1]] {
        let fields: Vec<&str> = row.split(',').collect();
        let o = samba(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--date", fields[0]]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert_eq!(stdout(&o).trim(), fields[1]);
        assert_eq!(stdout(&o).lines().count(), 1);
    }

    let frame = desk_frame(140, 21);
    let fifth = frame.dates[4].format("%Y-%m-%d").to_string();
    let o = samba(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--date", &fifth]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("L=5"), "{}", stderr(&o));
    let sixth = frame.dates[5].format("%Y-%m-%d").to_string();
    let o = samba(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--date", &sixth]);
    assert_eq!(o.status.code(), Some(0));
    let o = samba(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--date", "June 5th"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_rejects_feature_count_mismatch() {
    let fx = Fixture::new();
    let hyper = Hyper {
        n: 12,
        l: 5,
        e: 4,
        h: 2,
        u: 2,
        r: 1,
        k: 1,
        d_e: 2,
    };
    let ck = Checkpoint {
        model: SambaModel::init(hyper, 1),
        feature_names: (0..12).map(|i| format!("c{i}")).collect(),
        scaler: MinMaxScaler::from_parts(vec![0.0; 12], vec![1.0; 12]).unwrap(),
        split: SplitSpec::default(),
    };
    ck.save(fx.path("wide.samba")).unwrap();
    let o = samba(&["eval", "--checkpoint", p(&fx.path("wide.samba")), "--data", p(&fx.path("desk.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("N=12") && err.contains("N=10"), "{err}");
}

#[test]
fn export_graph_of_identical_embeddings_is_uniform() {
    let fx = Fixture::new();
    let hyper = Hyper {
        n: 4,
        l: 3,
        e: 2,
        h: 2,
        u: 2,
        r: 1,
        k: 2,
        d_e: 2,
    };
    let mut model = SambaModel::init(hyper, 3);
    model.params.graph.psi = Tensor::full(vec![4, 2], 0.2);
    let names: Vec<String> = ["alpha", "beta", "gamma", "delta"].map(String::from).to_vec();
    let ck = Checkpoint {
        model,
        feature_names: names.clone(),
        scaler: MinMaxScaler::from_parts(vec![0.0; 4], vec![1.0; 4]).unwrap(),
        split: SplitSpec::default(),
    };
    let path = fx.path("uniform.samba");
    ck.save(&path).unwrap();
    let o = samba(&["export-graph", "--checkpoint", p(&path), "--out", p(&fx.path("graph"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("row sums"));
    let csv = std::fs::read_to_string(fx.path("graph/adjacency.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "alpha,beta,gamma,delta");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert_eq!(row, &[0.25; 4]);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let degree = std::fs::read_to_string(fx.path("graph/degree.csv")).unwrap();
    assert_eq!(degree.lines().count(), 5);
    assert!(degree.starts_with("rank,feature,degree\n1,"));
}

#[test]
fn trained_graph_rows_sum_to_one_and_corruption_exits_2() {
    let fx = Fixture::new();
    assert_eq!(fx.train(&[]).status.code(), Some(0));
    let ck = fx.path("out/model.samba");
    let o = samba(&["export-graph", "--checkpoint", p(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = stdout(&o).lines().next().unwrap().to_owned();
    let deviation: f64 = first.split('=').nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(deviation < 1e-9, "{first}");
    assert!(fx.path("out/adjacency.csv").exists());

    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&ck, bytes).unwrap();
    let o = samba(&["export-graph", "--checkpoint", p(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));
}
