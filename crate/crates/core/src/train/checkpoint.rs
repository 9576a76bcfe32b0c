//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "JCAST001"  u32 version
//! u64 len     config JSON {model, vocabularies}
//! u32 count   named tensors
//! u8 flag     1 if optimizer state follows
//!   u64 step  u32 count + named first moments  u32 count + named second moments
//! ```
//!
//! A named tensor is `u32 len, name, u8 dtype (0 = f32, 1 = f64), u32 rank,
//! u64 dims..., row-major payload`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::{Adam, AdamConfig};
use crate::data::{DataError, Vocabulary};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 8] = b"JCAST001";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    model: ModelConfig,
    vocabularies: Vec<Vocabulary>,
}

/// Model parameters plus, optionally, optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(t.dtype().code());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

fn put_tensors<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>) {
    put_u32(out, items.len() as u32);
    for (name, t) in items {
        put_tensor(out, name, t);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let code = self.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: unknown dtype code {code}")))?;
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: element count overflows")))?;
        let data: Vec<f64> = match dtype {
            DType::F32 => self
                .take(n.checked_mul(4).ok_or(CheckpointError::Truncated("payload"))?, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => self
                .take(n.checked_mul(8).ok_or(CheckpointError::Truncated("payload"))?, "payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?
            .to_dtype(dtype);
        Ok((name, t))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
        let count = self.u32("tensor count")?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = self.tensor()?;
            if out.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn new(model: Model, optimizer: Option<Adam>) -> Self {
        Self { model, optimizer }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let record = ConfigRecord {
            model: self.model.config().clone(),
            vocabularies: self.model.vocabs().cloned().collect(),
        };
        let config = serde_json::to_vec(&record)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(&config);
        let params = self.model.params();
        put_tensors(&mut out, params.iter().map(|(n, t)| (n, t.as_ref())));
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                put_u64(&mut out, adam.step);
                put_tensors(&mut out, adam.m.iter());
                put_tensors(&mut out, adam.v.iter());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u64("config length")? as usize;
        let record: ConfigRecord = serde_json::from_slice(r.take(len, "config")?)?;
        let params = r.tensors()?;
        let model = Model::from_parts(record.model, record.vocabularies, params)?;
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let m = r.tensors()?;
                let v = r.tensors()?;
                let matches = |s: &BTreeMap<String, Tensor>| {
                    s.len() == model.params().len()
                        && s
                            .iter()
                            .zip(model.params())
                            .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
                };
                if !matches(&m) || !matches(&v) {
                    return Err(CheckpointError::Malformed(
                        "optimizer state does not match the parameter layout".into(),
                    ));
                }
                Some(Adam {
                    config: AdamConfig::default(),
                    step,
                    m,
                    v,
                })
            }
            f => return Err(CheckpointError::Malformed(format!("optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(CheckpointError::Trailing(buf.len() - r.pos));
        }
        Ok(Self { model, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| DataError::io(path, e).into())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::from(DataError::io(path, e)))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_vocab, Casing};

    fn small_model() -> Model {
        let mut cfg = ModelConfig::desk(5);
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        cfg.d_model = 8;
        cfg.d_ff = 8;
        cfg.heads = 2;
        cfg.conv_channels = 2;
        let vocabs = [
            synth_vocab("aa", 3, Casing::Lower).unwrap(),
            synth_vocab("bb", 4, Casing::Capitalized).unwrap(),
        ];
        Model::new(cfg, &vocabs, 17).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let model = small_model();
        let mut adam = Adam::new(&model, AdamConfig::default());
        adam.step = 12;
        adam.m.values_mut().next().unwrap().data_mut()[0] = 0.25;
        let ck = Checkpoint::new(model, Some(adam));
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert!(back.model.bit_eq(&ck.model));
        assert_eq!(back.optimizer.as_ref().unwrap().step, 12);
        assert_eq!(a, back.to_bytes().unwrap());
    }

    #[test]
    fn f32_tensors_round_trip() {
        let mut model = small_model();
        let t = model.param("enc.final_ln.gamma").unwrap().clone().to_dtype(DType::F32);
        model.set_param("enc.final_ln.gamma", t).unwrap();
        let a = Checkpoint::new(model, None).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.model.param("enc.final_ln.gamma").unwrap().dtype(), DType::F32);
        assert_eq!(a, back.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let a = Checkpoint::new(small_model(), None).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        let mut bad = a.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
        for cut in [20, a.len() / 2, a.len() - 1] {
            assert!(Checkpoint::from_bytes(&a[..cut]).is_err());
        }
        let mut long = a.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Trailing(1))));
    }
}
