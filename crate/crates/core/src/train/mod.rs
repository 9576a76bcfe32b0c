//! Joint CTC/attention objectives, the training loop, transfer
//! initialization and checkpoints.

mod checkpoint;
mod optim;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, MAGIC, VERSION};
pub use optim::{clip_global_norm, lr_schedule, Adam, AdamConfig};

use crate::ctc::{self, CtcError};
use crate::data::{DataError, Utterance, Vocabulary, EOS, SOS};
use crate::model::{Forward, Model, ModelError};
use crate::tensor::{mix_seed, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("initialization error: {0}")]
    Init(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss {value} at step {step}")]
    Numeric { step: u64, value: f64 },
    #[error("no trainable utterances: all {0} were skipped")]
    NothingToTrain(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Asr,
    St,
}

/// Which side of the corpus supervises the CTC branch in ST training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtcTargetSide {
    Transcript,
    #[default]
    Translation,
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// λ for ASR, α for ST.
    pub ctc_weight: f64,
    #[serde(default)]
    pub ctc_target_side: CtcTargetSide,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze_non_target: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Keep the parameters of the epoch with the lowest dev loss rather than
    /// the last epoch.
    #[serde(default = "default_true")]
    pub select_best_dev: bool,
}

impl TrainConfig {
    pub fn desk(mode: Mode, ctc_weight: f64) -> Self {
        Self {
            mode,
            ctc_weight,
            ctc_target_side: CtcTargetSide::Translation,
            epochs: 30,
            warmup_steps: 400,
            peak_lr: 5e-3,
            batch_size: 16,
            seed: 0,
            freeze_non_target: false,
            clip_norm: default_clip(),
            select_best_dev: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return err(format!("ctc_weight {} outside [0, 1]", self.ctc_weight));
        }
        if self.warmup_steps < 1 {
            return err("warmup_steps must be at least 1".into());
        }
        if self.batch_size < 1 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return err(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return err(format!("clip_norm {c} must be positive"));
            }
        }
        if self.mode == Mode::Asr && self.ctc_target_side != CtcTargetSide::Translation {
            // The field is meaningless for ASR; accept only the default.
            return err("ctc_target_side applies to st mode only".into());
        }
        Ok(())
    }
}

/// `w·ctc + (1−w)·att`, with the boundaries returning one term exactly.
pub fn joint_loss(weight: f64, ctc: f64, att: f64) -> f64 {
    if weight == 0.0 {
        att
    } else if weight == 1.0 {
        ctc
    } else {
        weight * ctc + (1.0 - weight) * att
    }
}

/// Targets of one utterance under a given objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub att_lang: String,
    /// Output tokens without `<sos>`/`<eos>`.
    pub att: Vec<usize>,
    pub ctc_lang: String,
    pub ctc: Vec<usize>,
}

impl Targets {
    pub fn new(model: &Model, utt: &Utterance, mode: Mode, side: CtcTargetSide) -> Result<Self, TrainError> {
        let text = |field: &'static str, v: &Option<String>| {
            v.clone().ok_or_else(|| DataError::MissingField {
                id: utt.id.clone(),
                field,
            })
        };
        let encode = |lang: &str, s: &str| -> Result<Vec<usize>, TrainError> { Ok(model.vocab(lang)?.encode(s).0) };
        match mode {
            Mode::Asr => {
                let y = encode(&utt.lang_src, &text("transcript", &utt.transcript)?)?;
                Ok(Self {
                    att_lang: utt.lang_src.clone(),
                    att: y.clone(),
                    ctc_lang: utt.lang_src.clone(),
                    ctc: y,
                })
            }
            Mode::St => {
                let tgt = utt.lang_tgt.clone().ok_or_else(|| DataError::MissingField {
                    id: utt.id.clone(),
                    field: "lang_tgt",
                })?;
                let z = encode(&tgt, &text("translation", &utt.translation)?)?;
                let (ctc_lang, ctc) = match side {
                    CtcTargetSide::Translation => (tgt.clone(), z.clone()),
                    CtcTargetSide::Transcript => (
                        utt.lang_src.clone(),
                        encode(&utt.lang_src, &text("transcript", &utt.transcript)?)?,
                    ),
                };
                Ok(Self {
                    att_lang: tgt,
                    att: z,
                    ctc_lang,
                    ctc,
                })
            }
        }
    }

    /// Whether the model can compute this objective on `frames` input frames.
    pub fn feasible(&self, model: &Model, frames: usize, ctc_weight: f64) -> bool {
        match model.config().subsampled_len(frames) {
            None => false,
            Some(t) => ctc_weight == 0.0 || t >= ctc::min_frames(&self.ctc),
        }
    }

    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(SOS).chain(self.att.iter().copied()).collect()
    }

    pub fn decoder_output(&self) -> Vec<usize> {
        self.att.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

/// The two loss terms recorded on a forward pass; either may be absent when
/// its weight is zero.
pub struct LossVars {
    pub total: Var,
    pub ctc: Option<Var>,
    pub att: Option<Var>,
}

/// Records the joint objective of one utterance.
pub fn utterance_loss(
    f: &mut Forward,
    features: &Tensor,
    targets: &Targets,
    ctc_weight: f64,
) -> Result<LossVars, TrainError> {
    let enc = f.encode(features)?;
    let ctc = if ctc_weight > 0.0 {
        let lp = f.ctc_log_probs(enc, &targets.ctc_lang)?;
        Some(ctc::ctc_loss_var(&mut f.tape, lp, &targets.ctc)?)
    } else {
        None
    };
    let att = if ctc_weight < 1.0 {
        let lp = f.decoder_log_probs(enc, &targets.decoder_input(), &targets.att_lang)?;
        let ls = f.model().config().label_smoothing;
        Some(f.tape.cross_entropy(lp, &targets.decoder_output(), ls)?)
    } else {
        None
    };
    let total = match (ctc, att) {
        (Some(c), None) => c,
        (None, Some(a)) => a,
        (Some(c), Some(a)) => {
            let c = f.tape.scale(c, ctc_weight)?;
            let a = f.tape.scale(a, 1.0 - ctc_weight)?;
            f.tape.add(c, a)?
        }
        (None, None) => unreachable!("ctc_weight lies in [0, 1]"),
    };
    Ok(LossVars { total, ctc, att })
}

/// Batch-mean loss terms, without dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ctc: Option<f64>,
    pub att: Option<f64>,
    pub skipped: usize,
}

fn mean_loss(
    model: &Model,
    batch: &[Utterance],
    mode: Mode,
    side: CtcTargetSide,
    weight: f64,
) -> Result<LossValue, TrainError> {
    let (mut total, mut ctc, mut att, mut n, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for utt in batch {
        let targets = Targets::new(model, utt, mode, side)?;
        if !targets.feasible(model, utt.features.frames(), weight) {
            skipped += 1;
            continue;
        }
        let mut f = Forward::inference(model);
        let vars = utterance_loss(&mut f, &utt.features.to_tensor(), &targets, weight)?;
        total += f.tape.value(vars.total).item();
        ctc += vars.ctc.map_or(0.0, |v| f.tape.value(v).item());
        att += vars.att.map_or(0.0, |v| f.tape.value(v).item());
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::NothingToTrain(skipped));
    }
    let k = n as f64;
    Ok(LossValue {
        total: total / k,
        ctc: (weight > 0.0).then_some(ctc / k),
        att: (weight < 1.0).then_some(att / k),
        skipped,
    })
}

/// Mean of `λ·L_ctc + (1−λ)·L_att` over `batch`, both on transcripts.
pub fn asr_loss(model: &Model, batch: &[Utterance], lambda: f64) -> Result<LossValue, TrainError> {
    mean_loss(model, batch, Mode::Asr, CtcTargetSide::Translation, lambda)
}

/// Mean of `α·L_ctc + (1−α)·L_att` over `batch`; attention always on
/// translations, CTC on `side`.
pub fn st_loss(
    model: &Model,
    batch: &[Utterance],
    alpha: f64,
    side: CtcTargetSide,
) -> Result<LossValue, TrainError> {
    mean_loss(model, batch, Mode::St, side, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub lr: f64,
    pub skipped_utterances: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Selected parameters (best dev loss, or last epoch).
    pub model: Model,
    /// Last-epoch parameters with optimizer state, for resuming.
    pub last: Checkpoint,
    pub log: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Heads of languages the objective never touches, as parameter prefixes.
pub fn non_target_prefixes(model: &Model, used: &BTreeSet<String>) -> Vec<String> {
    model
        .languages()
        .filter(|l| !used.contains(*l))
        .map(|l| format!("heads.{l}."))
        .collect()
}

/// Batches of utterance indices sorted by frame count; ties keep corpus order.
fn make_batches(utts: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].features.frames(), i));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains from `init` (fresh optimizer state unless the checkpoint has one).
/// `on_epoch` sees every metrics record as soon as it exists.
pub fn train(
    init: Checkpoint,
    config: &TrainConfig,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model = init.model;
    let mut adam = init
        .optimizer
        .unwrap_or_else(|| Adam::new(&model, AdamConfig::default()));
    let (mode, side, w) = (config.mode, config.ctc_target_side, config.ctc_weight);

    let mut prepared = Vec::with_capacity(train_set.len());
    let mut used = BTreeSet::new();
    let mut skipped = 0;
    for utt in train_set {
        let t = Targets::new(&model, utt, mode, side)?;
        if w < 1.0 {
            used.insert(t.att_lang.clone());
        }
        if w > 0.0 {
            used.insert(t.ctc_lang.clone());
        }
        let ok = t.feasible(&model, utt.features.frames(), w);
        skipped += usize::from(!ok);
        prepared.push(ok.then(|| (utt.features.to_tensor(), t)));
    }
    if skipped == train_set.len() {
        return Err(TrainError::NothingToTrain(skipped));
    }
    let frozen = if config.freeze_non_target {
        non_target_prefixes(&model, &used)
    } else {
        Vec::new()
    };
    let feasible: Vec<Utterance> = train_set
        .iter()
        .zip(&prepared)
        .filter(|(_, p)| p.is_some())
        .map(|(u, _)| u.clone())
        .collect();
    let index: Vec<usize> = (0..train_set.len()).filter(|&i| prepared[i].is_some()).collect();
    let batches: Vec<Vec<usize>> = make_batches(&feasible, config.batch_size)
        .into_iter()
        .map(|b| b.into_iter().map(|i| index[i]).collect())
        .collect();

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut lr = 0.0;
    for epoch in 1..=config.epochs {
        let mut order = batches.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in &order {
            let step = adam.step + 1;
            lr = lr_schedule(step, config.warmup_steps, config.peak_lr)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (feats, targets) = prepared[i].as_ref().expect("feasible");
                let seed = mix_seed(mix_seed(config.seed, step), i as u64);
                let mut f = Forward::training(&model, seed, &frozen);
                let vars = utterance_loss(&mut f, feats, targets, w)?;
                let value = f.tape.value(vars.total).item();
                if !value.is_finite() {
                    return Err(TrainError::Numeric { step, value });
                }
                loss_sum += value;
                count += 1;
                let scaled = f.tape.scale(vars.total, scale)?;
                f.tape.backward(scaled)?;
                for (name, g) in f.param_grads() {
                    match grads.get_mut(&name) {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam.update(&mut model, &grads, lr)?;
        }
        let dev_loss = if dev_set.is_empty() {
            None
        } else {
            Some(mean_loss(&model, dev_set, mode, side, w)?.total)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / count.max(1) as f64,
            dev_loss,
            lr,
            skipped_utterances: skipped,
        };
        on_epoch(&metrics);
        log.push(metrics);
        if config.select_best_dev {
            if let Some(d) = dev_loss {
                if best.as_ref().map_or(true, |(b, _, _)| d < *b) {
                    best = Some((d, epoch, model.clone()));
                }
            }
        }
    }
    let last = Checkpoint::new(model.clone(), Some(adam));
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, config.epochs),
    };
    Ok(TrainOutcome {
        model,
        last,
        log,
        best_epoch,
    })
}

/// Fails with a list of every language whose vocabulary differs between the
/// model and `expected`.
pub fn check_vocabularies(model: &Model, expected: &[Vocabulary]) -> Result<(), TrainError> {
    let mut problems = Vec::new();
    for v in expected {
        match model.vocab(v.language()) {
            Err(_) => problems.push(format!("{}: absent from checkpoint", v.language())),
            Ok(have) if have != v => problems.push(format!(
                "{}: checkpoint has {} tokens, corpus has {}{}",
                v.language(),
                have.len(),
                v.len(),
                if have.len() == v.len() { " with different entries" } else { "" }
            )),
            Ok(_) => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Init(format!("vocabulary mismatch: {}", problems.join("; "))))
    }
}

/// Starts an ST model from an ASR model that has a head for `target_lang`.
/// With `retain_ctc` false the target CTC projection is re-drawn exactly as a
/// fresh model seeded with `seed` would draw it.
pub fn init_st_from_asr(
    asr: &Model,
    target_lang: &str,
    retain_ctc: bool,
    seed: u64,
) -> Result<Model, TrainError> {
    if asr.vocab(target_lang).is_err() {
        let have: Vec<&str> = asr.languages().collect();
        return Err(TrainError::Init(format!(
            "target language {target_lang:?} has no head in the ASR checkpoint (languages: {})",
            have.join(", ")
        )));
    }
    let mut model = asr.clone();
    if !retain_ctc {
        model.reset_ctc_head(target_lang, seed)?;
    }
    Ok(model)
}
