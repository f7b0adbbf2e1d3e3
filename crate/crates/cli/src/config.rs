//! Run configuration: a flat JSON object with snake_case keys.
//!
//! Omitted keys take their defaults. Relative paths inside a config file are
//! resolved against the file's directory; the resolved form written next to
//! the outputs uses absolute paths so it can be re-run from anywhere.

use std::path::{Path, PathBuf};

use samba_core::data::SplitSpec;
use samba_core::train::TrainConfig;
use samba_core::Hyper;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Feature table (CSV).
    pub dataset: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Window length `L`.
    pub l: usize,
    pub e: usize,
    pub h: usize,
    pub u: usize,
    pub r: usize,
    pub k: usize,
    pub d_e: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        // N only matters for validation; the dataset decides it.
        let h = Hyper::default_for(82);
        let s = SplitSpec::default();
        Self {
            dataset: PathBuf::new(),
            out: PathBuf::from("samba-run"),
            seed: t.seed,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            l: h.l,
            e: h.e,
            h: h.h,
            u: h.u,
            r: h.r,
            k: h.k,
            d_e: h.d_e,
            train_frac: s.train,
            val_frac: s.val,
            test_frac: s.test,
        }
    }
}

fn field(name: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: name.to_owned(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses JSON text; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            // Unknown keys are reported at the root; pull the key out of the message.
            let name = if path == "." {
                message.split('`').nth(1).unwrap_or("config").to_owned()
            } else {
                path
            };
            field(&name, message)
        })
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.dataset.is_relative() && !cfg.dataset.as_os_str().is_empty() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dataset.as_os_str().is_empty() {
            return Err(field("dataset", "is required"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(field("lr", format!("must be positive, got {}", self.lr)));
        }
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("l", self.l),
            ("e", self.e),
            ("h", self.h),
            ("u", self.u),
            ("r", self.r),
            ("d_e", self.d_e),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(field(name, "must be at least 1"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(field(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(field("eps", format!("must be positive, got {}", self.eps)));
        }
        self.split().map(|_| ())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Hyperparameters for a dataset with `n` features.
    pub fn hyper(&self, n: usize) -> Result<Hyper, CliError> {
        let hyper = Hyper {
            n,
            l: self.l,
            e: self.e,
            h: self.h,
            u: self.u,
            r: self.r,
            k: self.k,
            d_e: self.d_e,
        };
        if self.d_e >= n {
            return Err(field("d_e", format!("must be smaller than the feature count {n}, got {}", self.d_e)));
        }
        hyper.validate().map_err(|m| field("hyper", m))?;
        Ok(hyper)
    }

    pub fn split(&self) -> Result<SplitSpec, CliError> {
        SplitSpec::new(self.train_frac, self.val_frac, self.test_frac)
            .map_err(|e| field("train_frac/val_frac/test_frac", e.to_string()))
    }

    /// Copy with absolute paths, suitable for writing next to the outputs.
    pub fn resolved(&self) -> Result<Self, CliError> {
        let dataset = self.dataset.canonicalize().map_err(|source| CliError::Io {
            path: self.dataset.clone(),
            source,
        })?;
        let out = std::path::absolute(&self.out).map_err(|source| CliError::Io {
            path: self.out.clone(),
            source,
        })?;
        Ok(Self {
            dataset,
            out,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omitted_keys_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"dataset": "a.csv", "epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!((cfg.lr, cfg.batch_size, cfg.l), (0.001, 128, 5));
        assert_eq!((cfg.e, cfg.h, cfg.u, cfg.r, cfg.k, cfg.d_e), (64, 64, 32, 3, 3, 10));
        assert_eq!((cfg.train_frac, cfg.val_frac, cfg.test_frac), (0.8, 0.05, 0.15));
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_json(r#"{"lr": "fast"}"#).unwrap_err();
        assert!(matches!(&err, CliError::Config { field, .. } if field == "lr"), "{err}");
        let err = RunConfig::from_json(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(matches!(&err, CliError::Config { field, .. } if field == "learning_rate"), "{err}");
        let err = RunConfig::from_json(r#"{"dataset": "x", "batch_size": 0}"#).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("batch_size"));
        let err = RunConfig::default().validate().unwrap_err();
        assert!(err.to_string().contains("dataset"));
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig {
            dataset: "data.csv".into(),
            seed: 9,
            ..RunConfig::default()
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
