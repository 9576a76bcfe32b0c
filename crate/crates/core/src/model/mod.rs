//! Transformer encoder-decoder with convolutional subsampling and
//! per-language heads.
//!
//! The encoder and decoder bodies are shared across languages. Each
//! registered language owns a CTC projection on the encoder output, a
//! decoder input embedding and a decoder output projection.

mod forward;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forward::Forward;

use crate::data::{Vocabulary, SOS};
use crate::tensor::{mix_seed, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("language {0:?} is not registered")]
    UnknownLanguage(String),
    #[error("language {0:?} is already registered")]
    DuplicateLanguage(String),
    #[error("input has {frames} frames; the subsampling stack needs at least {required}")]
    TooShort { frames: usize, required: usize },
    #[error("feature dim {got} does not match model input dim {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenRange { id: usize, vocab: usize },
    #[error("decoder prefix must start with <sos>")]
    MissingSos,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_blocks: usize,
    pub dropout_ff: f64,
    pub dropout_att: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// CPU-trainable default dimensions.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            enc_layers: 4,
            dec_layers: 2,
            conv_channels: 32,
            conv_kernel: 3,
            conv_stride: 2,
            conv_blocks: 1,
            dropout_ff: 0.1,
            dropout_att: 0.0,
            label_smoothing: 0.1,
        }
    }

    /// Full-size configuration: 12 encoder and 6 decoder layers at width 256.
    pub fn paper(input_dim: usize) -> Self {
        Self {
            input_dim,
            d_model: 256,
            d_ff: 2048,
            heads: 4,
            enc_layers: 12,
            dec_layers: 6,
            conv_channels: 256,
            conv_kernel: 3,
            conv_stride: 2,
            conv_blocks: 1,
            dropout_ff: 0.1,
            dropout_att: 0.0,
            label_smoothing: 0.1,
        }
    }

    pub fn preset(name: &str, input_dim: usize) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk(input_dim)),
            "paper" => Some(Self::paper(input_dim)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("conv_channels", self.conv_channels),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("conv_blocks", self.conv_blocks),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        for (name, p) in [("dropout_ff", self.dropout_ff), ("dropout_att", self.dropout_att)] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ModelError::Config("label_smoothing outside [0, 1)".into()));
        }
        Ok(())
    }

    /// Frames left after the time-axis convolutions (no time padding).
    pub fn subsampled_len(&self, frames: usize) -> Option<usize> {
        let mut t = frames;
        for _ in 0..self.conv_blocks {
            if t < self.conv_kernel {
                return None;
            }
            t = (t - self.conv_kernel) / self.conv_stride + 1;
        }
        Some(t)
    }

    /// Smallest input length that survives every conv block.
    pub fn min_frames(&self) -> usize {
        let mut req = self.conv_kernel;
        for _ in 1..self.conv_blocks {
            req = (req - 1) * self.conv_stride + self.conv_kernel;
        }
        req
    }

    /// Feature-axis width after one block; the feature axis is same-padded.
    fn conv_feat_out(&self, width: usize) -> usize {
        let pad = (self.conv_kernel - 1) / 2;
        (width + 2 * pad - self.conv_kernel) / self.conv_stride + 1
    }

    pub fn subsampled_feat(&self) -> usize {
        (0..self.conv_blocks).fold(self.input_dim, |w, _| self.conv_feat_out(w))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Encoder output `T' × d_model` for an input of `frames` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub states: Arc<Tensor>,
    pub frames: usize,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Ones,
    Zeros,
}

/// Parameters and vocabularies of a model.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Arc<Tensor>>,
    vocabs: BTreeMap<String, Vocabulary>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a: stable across runs and platforms.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seeded initial value of one parameter; depends only on `seed` and `name`.
fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, name_hash(name)));
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
        Init::Normal { std } => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Ones => vec![1.0; n],
        Init::Zeros => vec![0.0; n],
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Model {
    pub fn new(config: ModelConfig, vocabs: &[Vocabulary], seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self {
            config,
            params: BTreeMap::new(),
            vocabs: BTreeMap::new(),
        };
        for (name, shape, init) in model.body_layout() {
            let t = init_tensor(seed, &name, &shape, init);
            model.params.insert(name, Arc::new(t));
        }
        for v in vocabs {
            model.add_language(v.clone(), seed)?;
        }
        Ok(model)
    }

    /// Assembles a model from stored parts, checking that every expected
    /// tensor is present with the right shape.
    pub fn from_parts(
        config: ModelConfig,
        vocabs: Vec<Vocabulary>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self {
            config,
            params: BTreeMap::new(),
            vocabs: vocabs
                .into_iter()
                .map(|v| (v.language().to_string(), v))
                .collect(),
        };
        let mut layout = model.body_layout();
        for v in model.vocabs.values() {
            layout.extend(model.head_layout(v.language(), v.len()));
        }
        let mut params = params;
        for (name, shape, _) in layout {
            let t = params
                .remove(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "load parameter",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                }
                .into());
            }
            model.params.insert(name, Arc::new(t));
        }
        if let Some(extra) = params.keys().next() {
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    fn linear_layout(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize) {
        out.push((
            format!("{name}.weight"),
            vec![fan_in, fan_out],
            Init::Xavier { fan_in, fan_out },
        ));
        out.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
    }

    fn norm_layout(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
        out.push((format!("{name}.gamma"), vec![d], Init::Ones));
        out.push((format!("{name}.beta"), vec![d], Init::Zeros));
    }

    fn body_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = &self.config;
        let k2 = c.conv_kernel * c.conv_kernel;
        let d = c.d_model;
        let mut out = Vec::new();
        for b in 0..c.conv_blocks {
            let cin = if b == 0 { 1 } else { c.conv_channels };
            out.push((
                format!("enc.conv{b}.weight"),
                vec![cin * k2, c.conv_channels],
                Init::Xavier {
                    fan_in: cin * k2,
                    fan_out: c.conv_channels * k2,
                },
            ));
            out.push((format!("enc.conv{b}.bias"), vec![c.conv_channels], Init::Zeros));
        }
        Self::linear_layout(&mut out, "enc.input", c.conv_channels * c.subsampled_feat(), d);
        let attn = |out: &mut Vec<_>, p: &str| {
            for proj in ["q", "k", "v", "o"] {
                Self::linear_layout(out, &format!("{p}.{proj}"), d, d);
            }
        };
        let ff = |out: &mut Vec<_>, p: &str| {
            Self::linear_layout(out, &format!("{p}.w1"), d, c.d_ff);
            Self::linear_layout(out, &format!("{p}.w2"), c.d_ff, d);
        };
        for i in 0..c.enc_layers {
            let p = format!("enc.layer{i}");
            Self::norm_layout(&mut out, &format!("{p}.ln1"), d);
            attn(&mut out, &format!("{p}.self_attn"));
            Self::norm_layout(&mut out, &format!("{p}.ln2"), d);
            ff(&mut out, &format!("{p}.ff"));
        }
        Self::norm_layout(&mut out, "enc.final_ln", d);
        for i in 0..c.dec_layers {
            let p = format!("dec.layer{i}");
            Self::norm_layout(&mut out, &format!("{p}.ln1"), d);
            attn(&mut out, &format!("{p}.self_attn"));
            Self::norm_layout(&mut out, &format!("{p}.ln2"), d);
            attn(&mut out, &format!("{p}.cross_attn"));
            Self::norm_layout(&mut out, &format!("{p}.ln3"), d);
            ff(&mut out, &format!("{p}.ff"));
        }
        Self::norm_layout(&mut out, "dec.final_ln", d);
        out
    }

    fn head_layout(&self, lang: &str, vocab: usize) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.config.d_model;
        let mut out = Vec::new();
        Self::linear_layout(&mut out, &format!("heads.{lang}.ctc"), d, vocab);
        out.push((
            format!("heads.{lang}.embed"),
            vec![vocab, d],
            Init::Normal {
                std: (d as f64).powf(-0.5),
            },
        ));
        Self::linear_layout(&mut out, &format!("heads.{lang}.out"), d, vocab);
        out
    }

    /// Registers a language with freshly initialized heads.
    pub fn add_language(&mut self, vocab: Vocabulary, seed: u64) -> Result<(), ModelError> {
        let lang = vocab.language().to_string();
        if self.vocabs.contains_key(&lang) {
            return Err(ModelError::DuplicateLanguage(lang));
        }
        for (name, shape, init) in self.head_layout(&lang, vocab.len()) {
            let t = init_tensor(seed, &name, &shape, init);
            self.params.insert(name, Arc::new(t));
        }
        self.vocabs.insert(lang, vocab);
        Ok(())
    }

    /// Re-initializes the CTC projection of `lang` as a fresh model seeded
    /// with `seed` would have it.
    pub fn reset_ctc_head(&mut self, lang: &str, seed: u64) -> Result<(), ModelError> {
        let vocab = self.vocab(lang)?.len();
        for (name, shape, init) in self.head_layout(lang, vocab) {
            if name.starts_with(&format!("heads.{lang}.ctc.")) {
                let t = init_tensor(seed, &name, &shape, init);
                self.params.insert(name, Arc::new(t));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.vocabs.keys().map(String::as_str)
    }

    pub fn vocabs(&self) -> impl Iterator<Item = &Vocabulary> {
        self.vocabs.values()
    }

    pub fn vocab(&self, lang: &str) -> Result<&Vocabulary, ModelError> {
        self.vocabs
            .get(lang)
            .ok_or_else(|| ModelError::UnknownLanguage(lang.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Arc<Tensor>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(Arc::as_ref)
    }

    /// Mutable access for optimizers; clones the buffer if a tape still shares it.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            }
            .into());
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Names of all tensors belonging to `lang`'s heads.
    pub fn head_param_names(&self, lang: &str) -> Vec<String> {
        let prefix = format!("heads.{lang}.");
        self.params
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect()
    }

    /// Bitwise equality of configuration, vocabularies and every tensor.
    pub fn bit_eq(&self, other: &Model) -> bool {
        self.config == other.config
            && self.vocabs == other.vocabs
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2))
    }

    pub fn encode(&self, features: &Tensor) -> Result<EncoderStates, ModelError> {
        let mut f = Forward::inference(self);
        let enc = f.encode(features)?;
        Ok(EncoderStates {
            states: Arc::new(f.tape.value(enc).clone()),
            frames: features.rows(),
        })
    }

    /// `T' × |V_lang|` CTC log-probabilities.
    pub fn ctc_log_probs(&self, states: &EncoderStates, lang: &str) -> Result<Tensor, ModelError> {
        let mut f = Forward::inference(self);
        let enc = f.tape.shared_constant(states.states.clone());
        let lp = f.ctc_log_probs(enc, lang)?;
        Ok(f.tape.value(lp).clone())
    }

    /// Decoder log-probabilities at every position of `prefix` (which must
    /// start with `<sos>`); row `i` predicts the token after `prefix[..=i]`.
    pub fn decoder_log_probs(
        &self,
        states: &EncoderStates,
        prefix: &[usize],
        lang: &str,
    ) -> Result<Tensor, ModelError> {
        if prefix.first() != Some(&SOS) {
            return Err(ModelError::MissingSos);
        }
        let mut f = Forward::inference(self);
        let enc = f.tape.shared_constant(states.states.clone());
        let lp = f.decoder_log_probs(enc, prefix, lang)?;
        Ok(f.tape.value(lp).clone())
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn decode_step(
        &self,
        states: &EncoderStates,
        prefix: &[usize],
        lang: &str,
    ) -> Result<Vec<f64>, ModelError> {
        let lp = self.decoder_log_probs(states, prefix, lang)?;
        Ok(lp.row(lp.rows() - 1).to_vec())
    }
}

#[cfg(test)]
mod tests;
