//! Joint CTC/attention beam search, plus exhaustive and greedy decoders.
//!
//! Hypotheses are ranked by `β·log p_ctc + (1−β)·log p_att` without length
//! normalization. Every tie is broken towards the lexicographically smaller
//! token sequence.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{greedy_collapse, CtcError, PrefixState};
use crate::data::{Utterance, EOS, NUM_RESERVED, SOS, UNK};
use crate::model::{EncoderStates, Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("exhaustive search over {0} sequences exceeds the limit of {EXHAUSTIVE_LIMIT}")]
    SearchSpace(u128),
}

pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

fn default_pre_beam() -> Option<usize> {
    Some(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// β: weight of the CTC prefix score.
    pub ctc_weight: f64,
    pub lang: String,
    /// Maximum output length in tokens; `None` means `⌊1.5·T'⌋ + 10`.
    #[serde(default)]
    pub max_len: Option<usize>,
    /// Candidates per hypothesis are the top `factor × beam` tokens by
    /// attention score; `None` rescores the whole vocabulary.
    #[serde(default = "default_pre_beam")]
    pub pre_beam_factor: Option<usize>,
}

impl DecodeConfig {
    pub fn new(lang: impl Into<String>, beam: usize, ctc_weight: f64) -> Self {
        Self {
            beam,
            ctc_weight,
            lang: lang.into(),
            max_len: None,
            pre_beam_factor: default_pre_beam(),
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam < 1 {
            return Err(DecodeError::Config("beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(DecodeError::Config(format!(
                "ctc_weight {} outside [0, 1]",
                self.ctc_weight
            )));
        }
        if self.pre_beam_factor == Some(0) {
            return Err(DecodeError::Config("pre_beam_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, subsampled_frames: usize) -> usize {
        self.max_len
            .unwrap_or(subsampled_frames * 3 / 2 + 10)
    }
}

/// `β·ctc + (1−β)·att`, exact at the boundaries so that `0·(−∞)` never occurs.
pub fn combine(beta: f64, ctc: f64, att: f64) -> f64 {
    if beta == 0.0 {
        att
    } else if beta == 1.0 {
        ctc
    } else {
        beta * ctc + (1.0 - beta) * att
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, without `<sos>` and `<eos>`.
    pub tokens: Vec<usize>,
    pub ended: bool,
    pub att_score: f64,
    pub ctc_score: f64,
    pub score: f64,
    ctc_state: PrefixState,
}

impl Hypothesis {
    fn decoder_prefix(&self) -> Vec<usize> {
        std::iter::once(SOS).chain(self.tokens.iter().copied()).collect()
    }
}

/// Higher score first, then the smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.ended.cmp(&b.ended))
}

/// Tokens a decoder may emit: `<unk>` and every non-reserved token.
pub fn emittable(vocab: usize) -> impl Iterator<Item = usize> {
    std::iter::once(UNK).chain(NUM_RESERVED..vocab)
}

/// Per-utterance scoring context shared by the decoders.
struct Scorers<'a> {
    model: &'a Model,
    states: &'a EncoderStates,
    ctc_lp: Tensor,
    lang: &'a str,
    beta: f64,
}

impl<'a> Scorers<'a> {
    fn new(model: &'a Model, states: &'a EncoderStates, lang: &'a str, beta: f64) -> Result<Self, DecodeError> {
        let ctc_lp = model.ctc_log_probs(states, lang)?;
        Ok(Self {
            model,
            states,
            ctc_lp,
            lang,
            beta,
        })
    }

    fn root(&self) -> Hypothesis {
        Hypothesis {
            tokens: Vec::new(),
            ended: false,
            att_score: 0.0,
            ctc_score: 0.0,
            score: 0.0,
            ctc_state: PrefixState::init(&self.ctc_lp),
        }
    }

    fn attention(&self, hyp: &Hypothesis) -> Result<Vec<f64>, DecodeError> {
        Ok(self.model.decode_step(self.states, &hyp.decoder_prefix(), self.lang)?)
    }

    fn extend(&self, hyp: &Hypothesis, att: &[f64], token: usize) -> Result<Hypothesis, DecodeError> {
        let (state, _) = hyp.ctc_state.extend(&self.ctc_lp, token)?;
        let att_score = hyp.att_score + att[token];
        let ctc_score = state.score();
        let mut tokens = hyp.tokens.clone();
        let ended = token == EOS;
        if !ended {
            tokens.push(token);
        }
        Ok(Hypothesis {
            tokens,
            ended,
            att_score,
            ctc_score,
            score: combine(self.beta, ctc_score, att_score),
            ctc_state: state,
        })
    }
}

/// Beam search over Eq. `β·ctc + (1−β)·att`; returns ended hypotheses, best first.
pub fn joint_beam_search(
    model: &Model,
    states: &EncoderStates,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    config.validate()?;
    let scorers = Scorers::new(model, states, &config.lang, config.ctc_weight)?;
    let vocab = scorers.ctc_lp.cols();
    let max_len = config.max_len_for(scorers.ctc_lp.rows());
    let pre_beam = match config.pre_beam_factor {
        _ if config.ctc_weight == 1.0 => None,
        Some(f) => Some(f.saturating_mul(config.beam)),
        None => None,
    };

    let mut running = vec![scorers.root()];
    let mut ended: Vec<Hypothesis> = Vec::new();
    for step in 0..=max_len {
        let mut candidates = Vec::new();
        for hyp in &running {
            let att = scorers.attention(hyp)?;
            let tokens: Vec<usize> = if step == max_len {
                vec![EOS]
            } else {
                let mut all: Vec<usize> = emittable(vocab).chain([EOS]).collect();
                if let Some(k) = pre_beam {
                    all.sort_by(|&a, &b| att[b].total_cmp(&att[a]).then(a.cmp(&b)));
                    all.truncate(k);
                    if !all.contains(&EOS) {
                        all.push(EOS);
                    }
                }
                all
            };
            for tok in tokens {
                candidates.push(scorers.extend(hyp, &att, tok)?);
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(config.beam);
        running.clear();
        for c in candidates {
            if c.ended {
                ended.push(c);
            } else {
                running.push(c);
            }
        }
        let best_ended = ended.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_running = running.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // Scores never increase along a path, so no live hypothesis can win.
        if running.is_empty() || best_ended > best_running {
            break;
        }
    }
    ended.sort_by(rank);
    Ok(ended)
}

/// Number of output sequences of length `0..=max_len` over `n` tokens.
fn sequence_count(n: usize, max_len: usize) -> u128 {
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(n as u128);
    }
    total
}

/// Exact argmax of the joint score over every sequence of at most `max_len`
/// tokens. Refuses search spaces above [`EXHAUSTIVE_LIMIT`].
pub fn exhaustive_decode(
    model: &Model,
    states: &EncoderStates,
    lang: &str,
    ctc_weight: f64,
    max_len: usize,
) -> Result<Hypothesis, DecodeError> {
    let scorers = Scorers::new(model, states, lang, ctc_weight)?;
    let tokens: Vec<usize> = emittable(scorers.ctc_lp.cols()).collect();
    let count = sequence_count(tokens.len(), max_len);
    if count > EXHAUSTIVE_LIMIT {
        return Err(DecodeError::SearchSpace(count));
    }
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![scorers.root()];
    while let Some(hyp) = stack.pop() {
        let att = scorers.attention(&hyp)?;
        let done = scorers.extend(&hyp, &att, EOS)?;
        if best.as_ref().map_or(true, |b| rank(&done, b) == Ordering::Less) {
            best = Some(done);
        }
        if hyp.tokens.len() < max_len {
            for &t in &tokens {
                stack.push(scorers.extend(&hyp, &att, t)?);
            }
        }
    }
    Ok(best.expect("the empty sequence is always scored"))
}

/// Best-path CTC decoding.
pub fn ctc_greedy(model: &Model, states: &EncoderStates, lang: &str) -> Result<Vec<usize>, DecodeError> {
    Ok(greedy_collapse(&model.ctc_log_probs(states, lang)?))
}

/// Recomputes the attention (teacher-forced), CTC and combined scores of
/// a finished output sequence from scratch.
pub fn rescore(
    model: &Model,
    states: &EncoderStates,
    lang: &str,
    ctc_weight: f64,
    tokens: &[usize],
) -> Result<(f64, f64, f64), DecodeError> {
    let input: Vec<usize> = std::iter::once(SOS).chain(tokens.iter().copied()).collect();
    let lp = model.decoder_log_probs(states, &input, lang)?;
    let att: f64 = tokens
        .iter()
        .chain([EOS].iter())
        .enumerate()
        .map(|(i, &t)| lp.at2(i, t))
        .sum();
    let ctc_lp = model.ctc_log_probs(states, lang)?;
    let ctc = match crate::ctc::ctc_loss(&ctc_lp, tokens) {
        Ok(l) => -l,
        Err(CtcError::Infeasible { .. }) => f64::NEG_INFINITY,
        Err(e) => return Err(e.into()),
    };
    Ok((att, ctc, combine(ctc_weight, ctc, att)))
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub text: String,
    pub score: f64,
    pub att_score: f64,
    pub ctc_score: f64,
    pub beta: f64,
    pub beam: usize,
}

/// Decodes utterances on up to `threads` worker threads; output order
/// follows input order. Utterances too short to encode yield empty text
/// with `-inf` scores.
pub fn decode_utterances(
    model: &Model,
    utts: &[Utterance],
    config: &DecodeConfig,
    threads: usize,
) -> Result<Vec<DecodeRecord>, DecodeError> {
    config.validate()?;
    let vocab = model.vocab(&config.lang)?;
    let one = |u: &Utterance| -> Result<DecodeRecord, DecodeError> {
        let record = |tokens: &[usize], score, att_score, ctc_score| DecodeRecord {
            id: u.id.clone(),
            text: vocab.decode(tokens),
            score,
            att_score,
            ctc_score,
            beta: config.ctc_weight,
            beam: config.beam,
        };
        let states = match model.encode(&u.features.to_tensor()) {
            Ok(s) => s,
            Err(ModelError::TooShort { .. }) => {
                let inf = f64::NEG_INFINITY;
                return Ok(record(&[], inf, inf, inf));
            }
            Err(e) => return Err(e.into()),
        };
        let hyps = joint_beam_search(model, &states, config)?;
        let best = &hyps[0];
        Ok(record(&best.tokens, best.score, best.att_score, best.ctc_score))
    };
    let threads = threads.clamp(1, utts.len().max(1));
    if threads == 1 {
        return utts.iter().map(one).collect();
    }
    let chunk = utts.len().div_ceil(threads);
    let parts: Vec<Result<Vec<DecodeRecord>, DecodeError>> = std::thread::scope(|s| {
        let handles: Vec<_> = utts
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(utts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
