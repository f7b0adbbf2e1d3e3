//! The four subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use samba_core::agc::build_adjacency;
use samba_core::checkpoint::Checkpoint;
use samba_core::data::{load_feature_csv, prepare, window_dataset, FeatureFrame, DATE_FORMAT};
use samba_core::metrics::evaluate;
use samba_core::train::{predict_samples, train_with, EpochRecord};
use samba_core::{SambaModel, Tensor};

use crate::config::RunConfig;
use crate::output::{fmt6, io_error, write_file, OutputLock};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.samba";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "resolved-config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const DEGREE_FILE: &str = "degree.csv";

fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_rmse\n");
    for r in history {
        let val = r.val_rmse.map(fmt6).unwrap_or_default();
        writeln!(out, "{},{},{}", r.epoch, fmt6(r.train_loss), val).unwrap();
    }
    out
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let cfg = cfg.resolved()?;
    let frame = load_feature_csv(&cfg.dataset, cfg.l)?;
    let hyper = cfg.hyper(frame.feature_count())?;
    let spec = cfg.split()?;
    let prepared = prepare(&frame, cfg.l, &spec)?;
    let split = &prepared.split;
    if split.train.is_empty() {
        return Err(CliError::Usage(format!(
            "the training split is empty ({} samples in total)",
            split.train.len() + split.val.len() + split.test.len()
        )));
    }
    let _lock = OutputLock::acquire(&cfg.out)?;
    let config_json = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    write_file(&cfg.out.join(CONFIG_FILE), config_json)?;

    eprintln!(
        "{} days ({} dropped), {} features; samples train/val/test {}/{}/{}; {} parameters",
        frame.days(),
        frame.dropped_rows,
        hyper.n,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        hyper.param_count()
    );
    let every = (cfg.epochs / 20).max(1);
    let train_cfg = cfg.train_config();
    let outcome = train_with(
        SambaModel::init(hyper, cfg.seed),
        &split.train,
        &split.val,
        &train_cfg,
        |r, _| {
            if r.epoch % every == 0 || r.epoch == cfg.epochs {
                let val = r.val_rmse.map(fmt6).unwrap_or_else(|| "-".to_owned());
                eprintln!("epoch {:>5}  train_loss {}  val_rmse {}", r.epoch, fmt6(r.train_loss), val);
            }
        },
    )?;

    write_file(&cfg.out.join(HISTORY_FILE), history_csv(&outcome.history))?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        feature_names: frame.feature_names.clone(),
        scaler: prepared.scaler,
        split: spec,
    };
    let ck_path = cfg.out.join(CHECKPOINT_FILE);
    checkpoint.save(&ck_path)?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "best epoch {} (val_rmse {}); wrote {}",
        outcome.best_epoch,
        best.val_rmse.map(fmt6).unwrap_or_else(|| "-".to_owned()),
        ck_path.display()
    );
    Ok(())
}

fn output_dir(explicit: Option<&Path>, checkpoint: &Path) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf()
    })
}

/// Loads `data` and checks it against the checkpoint's feature layout.
fn load_matching(ck: &Checkpoint, data: &Path) -> Result<FeatureFrame, CliError> {
    let frame = load_feature_csv(data, ck.model.hyper.l)?;
    let (expected, got) = (ck.model.hyper.n, frame.feature_count());
    if expected != got {
        return Err(CliError::Usage(format!(
            "feature count mismatch: the checkpoint expects N={expected}, {} has N={got}",
            data.display()
        )));
    }
    if let Some((a, b)) = ck.feature_names.iter().zip(&frame.feature_names).find(|(a, b)| a != b) {
        return Err(CliError::Usage(format!(
            "feature column mismatch: the checkpoint expects `{a}` where {} has `{b}`",
            data.display()
        )));
    }
    Ok(frame)
}

fn finite_predictions(model: &SambaModel, samples: &[samba_core::data::Sample]) -> Result<Vec<f64>, CliError> {
    let preds = predict_samples(model, samples)?;
    if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
        return Err(CliError::Numerical(format!(
            "prediction for {} is not finite",
            samples[i].target_date
        )));
    }
    Ok(preds)
}

pub fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let frame = load_matching(&ck, data)?;
    let raw = samba_core::data::split_chronological(window_dataset(&frame, ck.model.hyper.l)?, &ck.split)?;
    let test = ck.scaler.apply(&raw.test)?;
    if test.len() < 2 {
        return Err(CliError::Usage(format!("the test split has {} samples; at least 2 are needed", test.len())));
    }
    let preds = finite_predictions(&ck.model, &test)?;
    let targets: Vec<f64> = test.iter().map(|s| s.target).collect();
    let m = evaluate(&preds, &targets).map_err(|e| CliError::Usage(e.to_string()))?;

    let dir = output_dir(out, checkpoint);
    let _lock = OutputLock::acquire(&dir)?;
    let json = format!(
        "{{\n  \"rmse\": {},\n  \"ic\": {},\n  \"ric\": {}\n}}\n",
        fmt6(m.rmse),
        fmt6(m.ic),
        fmt6(m.ric)
    );
    write_file(&dir.join(METRICS_FILE), &json)?;
    let mut csv = String::from("date,predicted,actual\n");
    for ((s, p), t) in test.iter().zip(&preds).zip(&targets) {
        writeln!(csv, "{},{},{}", s.target_date.format(DATE_FORMAT), fmt6(*p), fmt6(*t)).unwrap();
    }
    write_file(&dir.join(PREDICTIONS_FILE), csv)?;
    if m.degenerate {
        eprintln!("warning: a series is constant; ic and ric are reported as 0");
    }
    println!(
        "test samples {}  rmse {}  ic {}  ric {}",
        test.len(),
        fmt6(m.rmse),
        fmt6(m.ic),
        fmt6(m.ric)
    );
    Ok(())
}

/// The scaled window of the `L` rows dated strictly before `date`.
pub fn window_before(ck: &Checkpoint, frame: &FeatureFrame, date: NaiveDate) -> Result<Tensor, CliError> {
    let l = ck.model.hyper.l;
    let end = frame.dates.partition_point(|d| *d < date);
    if end < l {
        return Err(CliError::Usage(format!(
            "incomplete window: {date} needs L={l} prior trading days, the dataset has {end}"
        )));
    }
    let n = frame.feature_count();
    let x = Tensor::new(vec![l, n], frame.features.data()[(end - l) * n..end * n].to_vec())?;
    Ok(ck.scaler.transform(&x)?)
}

pub fn predict(checkpoint: &Path, data: &Path, date: &str) -> Result<(), CliError> {
    let date = NaiveDate::parse_from_str(date.trim(), DATE_FORMAT)
        .map_err(|e| CliError::Usage(format!("--date `{date}` is not YYYY-MM-DD: {e}")))?;
    let ck = Checkpoint::load(checkpoint)?;
    let frame = load_matching(&ck, data)?;
    let x = window_before(&ck, &frame, date)?;
    let pred = ck.model.predictor()?.predict(&x)?;
    if !pred.is_finite() {
        return Err(CliError::Numerical(format!("prediction for {date} is not finite")));
    }
    println!("{}", fmt6(pred));
    Ok(())
}

/// Column sums of the row-stochastic adjacency, with names, highest first.
pub fn degree_ranking(adjacency: &Tensor, names: &[String]) -> Vec<(String, f64)> {
    let n = names.len();
    let mut ranked: Vec<(String, f64)> = (0..n)
        .map(|j| (names[j].clone(), (0..n).map(|i| adjacency.at2(i, j)).sum()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

pub fn export_graph(checkpoint: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let adjacency = build_adjacency(&ck.model.params.graph)?;
    let n = ck.model.hyper.n;
    let dir = output_dir(out, checkpoint);
    let _lock = OutputLock::acquire(&dir)?;

    let mut csv = ck.feature_names.join(",") + "\n";
    for i in 0..n {
        let row: Vec<String> = adjacency.row(i).iter().map(|&v| fmt6(v)).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_file(&dir.join(ADJACENCY_FILE), csv)?;

    let ranked = degree_ranking(&adjacency, &ck.feature_names);
    let mut csv = String::from("rank,feature,degree\n");
    for (i, (name, degree)) in ranked.iter().enumerate() {
        writeln!(csv, "{},{},{}", i + 1, name, fmt6(*degree)).unwrap();
    }
    let degree_path = dir.join(DEGREE_FILE);
    std::fs::write(&degree_path, csv).map_err(io_error(&degree_path))?;

    let deviation = (0..n)
        .map(|i| (adjacency.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("row sums: max |sum - 1| = {deviation:.3e} over {n} rows");
    for (i, (name, degree)) in ranked.iter().take(10).enumerate() {
        println!("{:>3}. {name} {}", i + 1, fmt6(*degree));
    }
    Ok(())
}
