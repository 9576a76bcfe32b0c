use std::collections::HashMap;

use super::{Model, ModelError};
use crate::tensor::{mix_seed, Tape, Tensor, Var};

/// One forward pass over a model, recorded on a fresh tape.
///
/// Parameters are bound lazily, so a pass only touches the heads of the
/// languages it uses. Parameters whose names start with a frozen prefix are
/// bound as constants and never receive gradient.
pub struct Forward<'m> {
    model: &'m Model,
    pub tape: Tape,
    bound: HashMap<String, Var>,
    dropout_seed: Option<u64>,
    dropout_calls: u64,
    frozen: Vec<String>,
}

const LN_EPS: f64 = 1e-12;

fn sinusoid(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(len, d, data).expect("shape")
}

fn causal_mask(n: usize) -> Tensor {
    let data = (0..n * n)
        .map(|k| if k % n > k / n { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    Tensor::matrix(n, n, data).expect("shape")
}

impl<'m> Forward<'m> {
    /// Deterministic pass without dropout and without trainable leaves.
    pub fn inference(model: &'m Model) -> Self {
        Self {
            model,
            tape: Tape::new(),
            bound: HashMap::new(),
            dropout_seed: None,
            dropout_calls: 0,
            frozen: vec![String::new()],
        }
    }

    /// Training pass; `dropout_seed` makes every dropout mask replayable.
    pub fn training(model: &'m Model, dropout_seed: u64, frozen_prefixes: &[String]) -> Self {
        Self {
            model,
            tape: Tape::new(),
            bound: HashMap::new(),
            dropout_seed: Some(dropout_seed),
            dropout_calls: 0,
            frozen: frozen_prefixes.to_vec(),
        }
    }

    /// Like [`Forward::training`] but without dropout, for gradient checks.
    pub fn trainable_no_dropout(model: &'m Model, frozen_prefixes: &[String]) -> Self {
        Self {
            dropout_seed: None,
            ..Self::training(model, 0, frozen_prefixes)
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            self.tape.shared_constant(t.clone())
        } else {
            self.tape.param(t.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter bound in this pass, by name.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(_, v)| self.tape.requires_grad(**v))
            .map(|(n, v)| (n.clone(), self.tape.grad_tensor(*v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var, ModelError> {
        match self.dropout_seed {
            Some(seed) if p > 0.0 => {
                self.dropout_calls += 1;
                Ok(self.tape.dropout(x, p, mix_seed(seed, self.dropout_calls))?)
            }
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let h = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(h, b)?)
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b, LN_EPS)?)
    }

    /// Scales by `sqrt(d_model)` and adds sinusoidal positions.
    fn add_positions(&mut self, x: Var) -> Result<Var, ModelError> {
        let d = self.model.config.d_model;
        let n = self.tape.shape(x)[0];
        let scaled = self.tape.scale(x, (d as f64).sqrt())?;
        let pe = self.tape.constant(sinusoid(n, d));
        let h = self.tape.add(scaled, pe)?;
        self.dropout(h, self.model.config.dropout_ff)
    }

    fn attention(&mut self, q_in: Var, kv_in: Var, name: &str, causal: bool) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let (heads, dk, p_att) = (cfg.heads, cfg.head_dim(), cfg.dropout_att);
        let q = self.linear(q_in, &format!("{name}.q"))?;
        let k = self.linear(kv_in, &format!("{name}.k"))?;
        let v = self.linear(kv_in, &format!("{name}.v"))?;
        let mask = if causal {
            let n = self.tape.shape(q)[0];
            Some(self.tape.constant(causal_mask(n)))
        } else {
            None
        };
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dk, dk)?;
            let kh = self.tape.slice_cols(k, h * dk, dk)?;
            let vh = self.tape.slice_cols(v, h * dk, dk)?;
            let scores = self.tape.matmul_bt(qh, kh)?;
            let mut scores = self.tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
            if let Some(m) = mask {
                scores = self.tape.add(scores, m)?;
            }
            let probs = self.tape.softmax(scores, 1)?;
            let probs = self.dropout(probs, p_att)?;
            ctx.push(self.tape.matmul(probs, vh)?);
        }
        let merged = if heads == 1 {
            ctx[0]
        } else {
            self.tape.concat(&ctx, 1)?
        };
        self.linear(merged, &format!("{name}.o"))
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let h = self.linear(x, &format!("{name}.w1"))?;
        let h = self.tape.relu(h)?;
        let h = self.dropout(h, self.model.config.dropout_ff)?;
        self.linear(h, &format!("{name}.w2"))
    }

    /// `x + dropout(sublayer(x))`
    fn residual(&mut self, x: Var, sub: Var) -> Result<Var, ModelError> {
        let sub = self.dropout(sub, self.model.config.dropout_ff)?;
        Ok(self.tape.add(x, sub)?)
    }

    /// Convolutional subsampling followed by the transformer encoder stack.
    pub fn encode(&mut self, features: &Tensor) -> Result<Var, ModelError> {
        let cfg = self.model.config.clone();
        if features.rank() != 2 || features.cols() != cfg.input_dim {
            return Err(ModelError::InputDim {
                got: features.cols(),
                expected: cfg.input_dim,
            });
        }
        let frames = features.rows();
        if cfg.subsampled_len(frames).is_none() {
            return Err(ModelError::TooShort {
                frames,
                required: cfg.min_frames(),
            });
        }
        let (k, s) = (cfg.conv_kernel, cfg.conv_stride);
        let pad = (k - 1) / 2;
        // Activations are laid out position-major: row (t, f), column channel.
        let mut x = self.tape.constant(features.clone());
        let (mut t_len, mut f_len, mut cin) = (frames, cfg.input_dim, 1);
        for b in 0..cfg.conv_blocks {
            let t_out = (t_len - k) / s + 1;
            let f_out = (f_len + 2 * pad - k) / s + 1;
            let mut index = Vec::with_capacity(t_out * f_out * cin * k * k);
            for to in 0..t_out {
                for fo in 0..f_out {
                    for ci in 0..cin {
                        for kt in 0..k {
                            for kf in 0..k {
                                let t = to * s + kt;
                                let f = (fo * s + kf) as isize - pad as isize;
                                index.push(if f >= 0 && (f as usize) < f_len {
                                    Some((t * f_len + f as usize) * cin + ci)
                                } else {
                                    None
                                });
                            }
                        }
                    }
                }
            }
            let patches = self
                .tape
                .gather(x, &index, vec![t_out * f_out, cin * k * k])?;
            let w = self.param(&format!("enc.conv{b}.weight"))?;
            let bias = self.param(&format!("enc.conv{b}.bias"))?;
            let h = self.tape.matmul(patches, w)?;
            let h = self.tape.add_row(h, bias)?;
            x = self.tape.relu(h)?;
            t_len = t_out;
            f_len = f_out;
            cin = cfg.conv_channels;
        }
        let flat = self.tape.reshape(x, vec![t_len, f_len * cin])?;
        let h = self.linear(flat, "enc.input")?;
        let mut h = self.add_positions(h)?;
        for i in 0..cfg.enc_layers {
            let p = format!("enc.layer{i}");
            let n = self.layer_norm(h, &format!("{p}.ln1"))?;
            let a = self.attention(n, n, &format!("{p}.self_attn"), false)?;
            h = self.residual(h, a)?;
            let n = self.layer_norm(h, &format!("{p}.ln2"))?;
            let f = self.feed_forward(n, &format!("{p}.ff"))?;
            h = self.residual(h, f)?;
        }
        self.layer_norm(h, "enc.final_ln")
    }

    pub fn ctc_log_probs(&mut self, enc: Var, lang: &str) -> Result<Var, ModelError> {
        self.model.vocab(lang)?;
        let logits = self.linear(enc, &format!("heads.{lang}.ctc"))?;
        Ok(self.tape.log_softmax(logits, 1)?)
    }

    /// Teacher-forced decoder: row `i` holds log-probabilities of the token
    /// following `input_ids[..=i]`.
    pub fn decoder_log_probs(&mut self, enc: Var, input_ids: &[usize], lang: &str) -> Result<Var, ModelError> {
        let vocab = self.model.vocab(lang)?.len();
        if let Some(&id) = input_ids.iter().find(|&&i| i >= vocab) {
            return Err(ModelError::TokenRange { id, vocab });
        }
        if input_ids.is_empty() {
            return Err(ModelError::MissingSos);
        }
        let table = self.param(&format!("heads.{lang}.embed"))?;
        let e = self.tape.embedding(table, input_ids)?;
        let mut h = self.add_positions(e)?;
        for i in 0..self.model.config.dec_layers {
            let p = format!("dec.layer{i}");
            let n = self.layer_norm(h, &format!("{p}.ln1"))?;
            let a = self.attention(n, n, &format!("{p}.self_attn"), true)?;
            h = self.residual(h, a)?;
            let n = self.layer_norm(h, &format!("{p}.ln2"))?;
            let c = self.attention(n, enc, &format!("{p}.cross_attn"), false)?;
            h = self.residual(h, c)?;
            let n = self.layer_norm(h, &format!("{p}.ln3"))?;
            let f = self.feed_forward(n, &format!("{p}.ff"))?;
            h = self.residual(h, f)?;
        }
        let h = self.layer_norm(h, "dec.final_ln")?;
        let logits = self.linear(h, &format!("heads.{lang}.out"))?;
        Ok(self.tape.log_softmax(logits, 1)?)
    }
}
