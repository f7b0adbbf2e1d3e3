//! Binary model files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"SAMBA1"
//! u64 × 8          n, l, e, h, u, r, k, d_e
//! u32              feature-name count, then per name: u32 byte length, UTF-8 bytes
//! u32              array count, then per array:
//!                  u32 name length, name, u32 rank, u64 × rank dims, f64 × product(dims)
//! ```
//!
//! Arrays hold every model parameter under its path name, followed by
//! `buffer.scaler_min`, `buffer.scaler_max` and `meta.split`.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::data::{MinMaxScaler, SplitSpec};
use crate::model::{Hyper, SambaModel};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"SAMBA1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks array `{0}`")]
    Missing(String),
    #[error("array `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A trained model with everything needed to preprocess new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SambaModel,
    pub feature_names: Vec<String>,
    pub scaler: MinMaxScaler,
    pub split: SplitSpec,
}

const SCALER_MIN: &str = "buffer.scaler_min";
const SCALER_MAX: &str = "buffer.scaler_max";
const SPLIT: &str = "meta.split";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_str(out, name);
    put_u32(out, shape.len());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("dimension {v} too large")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or(CheckpointError::Truncated)?;
        let bytes = self.take(len * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
        Ok((name, tensor))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = self.model.hyper;
        let mut out = MAGIC.to_vec();
        for v in [h.n, h.l, h.e, h.h, h.u, h.r, h.k, h.d_e] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        put_u32(&mut out, self.feature_names.len());
        for name in &self.feature_names {
            put_str(&mut out, name);
        }
        let mut count = 0;
        self.model.params.visit("", &mut |_, _| count += 1);
        put_u32(&mut out, count + 3);
        self.model
            .params
            .visit("", &mut |name, t| put_array(&mut out, name, t.shape(), t.data()));
        let n = self.scaler.min().len();
        put_array(&mut out, SCALER_MIN, &[n], self.scaler.min());
        put_array(&mut out, SCALER_MAX, &[n], self.scaler.max());
        put_array(&mut out, SPLIT, &[3], &[self.split.train, self.split.val, self.split.test]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            buf: &bytes[MAGIC.len()..],
        };
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u64()?;
        }
        let [n, l, e, h, u, rr, k, d_e] = dims;
        let hyper = Hyper {
            n,
            l,
            e,
            h,
            u,
            r: rr,
            k,
            d_e,
        };
        hyper.validate().map_err(CheckpointError::Malformed)?;
        let names = (0..r.u32()?).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        if names.len() != n {
            return Err(CheckpointError::Malformed(format!(
                "{} feature names for {n} features",
                names.len()
            )));
        }
        let mut arrays = HashMap::new();
        for _ in 0..r.u32()? {
            let (name, t) = r.array()?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate array `{name}`")));
            }
        }
        if !r.buf.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.buf.len())));
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = arrays.remove(name).ok_or_else(|| CheckpointError::Missing(name.to_owned()))?;
            if t.shape() != shape {
                return Err(CheckpointError::Shape {
                    name: name.to_owned(),
                    expected: shape.to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let mut model = SambaModel::zeros(hyper);
        let mut failure = None;
        model.params.visit_mut("", &mut |name, slot| {
            if failure.is_none() {
                match take(name, slot.shape()) {
                    Ok(t) => *slot = t,
                    Err(e) => failure = Some(e),
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let scaler = MinMaxScaler::from_parts(
            take(SCALER_MIN, &[n])?.into_data(),
            take(SCALER_MAX, &[n])?.into_data(),
        )
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let split = take(SPLIT, &[3])?;
        let split = SplitSpec::new(split.data()[0], split.data()[1], split.data()[2])
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if let Some(extra) = arrays.keys().min() {
            return Err(CheckpointError::Malformed(format!("unexpected array `{extra}`")));
        }
        Ok(Self {
            model,
            feature_names: names,
            scaler,
            split,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let hyper = Hyper {
            n: 4,
            l: 3,
            e: 4,
            h: 2,
            u: 3,
            r: 2,
            k: 2,
            d_e: 2,
        };
        Checkpoint {
            model: SambaModel::init(hyper, 11),
            feature_names: ["a", "b", "c", "é"].map(String::from).to_vec(),
            scaler: MinMaxScaler::from_parts(vec![0.0, 1.0, -2.0, 0.1], vec![1.0, 3.0, 2.0, 0.1]).unwrap(),
            split: SplitSpec::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..6], b"SAMBA1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"SAM"), Err(CheckpointError::BadMagic)));
    }
}
