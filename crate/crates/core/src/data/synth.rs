//! Seeded synthetic speech-like corpora.
//!
//! Every source token owns a fixed template vector; an utterance's frames
//! repeat each token's template a random number of times and add Gaussian
//! noise. Transcripts are monotone in the frames, translations are mapped
//! token-by-token and then locally reordered.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{Features, Utterance};
use super::vocab::{Segmentation, Vocabulary};
use super::DataError;
use crate::tensor::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "window")]
pub enum Reorder {
    None,
    ReversePairs,
    ReverseWindows(usize),
}

impl Reorder {
    pub fn apply<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        let w = match *self {
            Reorder::None => return seq.to_vec(),
            Reorder::ReversePairs => 2,
            Reorder::ReverseWindows(w) => w.max(1),
        };
        seq.chunks(w)
            .flat_map(|c| c.iter().rev().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    #[default]
    Lower,
    Capitalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskSpec {
    pub seed: u64,
    pub src_lang: String,
    #[serde(default)]
    pub src_casing: Casing,
    /// Absent for transcription-only corpora.
    #[serde(default)]
    pub tgt_lang: Option<String>,
    pub src_vocab: usize,
    #[serde(default)]
    pub tgt_vocab: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub feature_dim: usize,
    pub noise: f64,
    #[serde(default = "default_reorder")]
    pub reorder: Reorder,
    #[serde(default)]
    pub mapping_seed: u64,
    /// Seed of the token template vectors; defaults to `seed`. Corpora that
    /// share a template seed share acoustics.
    #[serde(default)]
    pub template_seed: Option<u64>,
}

fn default_reorder() -> Reorder {
    Reorder::None
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.src_vocab == 0 {
            return err("src_vocab must be positive");
        }
        if self.tgt_lang.is_some() && self.tgt_vocab == 0 {
            return err("tgt_vocab must be positive when tgt_lang is set");
        }
        if self.min_frames_per_token < 1 {
            return err("min_frames_per_token must be at least 1");
        }
        if self.max_frames_per_token < self.min_frames_per_token {
            return err("max_frames_per_token below min_frames_per_token");
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return err("token length range must satisfy 1 <= min_len <= max_len");
        }
        if self.feature_dim < 1 {
            return err("feature_dim must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err("noise must be finite and non-negative");
        }
        if let Reorder::ReverseWindows(0) = self.reorder {
            return err("reverse-windows needs a window of at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Option<Vocabulary>,
}

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Pronounceable word for token index `i`: `ba, be, ..., zu, bab, ...`.
pub fn syllable(i: usize, casing: Casing) -> String {
    let per = CONSONANTS.len() * VOWELS.len();
    let mut s = String::new();
    let mut k = i;
    loop {
        let r = k % per;
        s.push(CONSONANTS[r / VOWELS.len()]);
        s.push(VOWELS[r % VOWELS.len()]);
        k /= per;
        if k == 0 {
            break;
        }
        k -= 1;
    }
    if casing == Casing::Capitalized {
        let mut c = s.chars();
        let first = c.next().expect("non-empty").to_ascii_uppercase();
        s = std::iter::once(first).chain(c).collect();
    }
    s
}

pub fn synth_vocab(language: &str, size: usize, casing: Casing) -> Result<Vocabulary, DataError> {
    let tokens = (0..size).map(|i| syllable(i, casing)).collect();
    Vocabulary::new(language, Segmentation::Word, tokens, None)
}

/// Maps each source token index to a target token index.
pub fn token_mapping(mapping_seed: u64, src_vocab: usize, tgt_vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mapping_seed, 0x6d61_7070));
    let mut perm: Vec<usize> = (0..tgt_vocab).collect();
    perm.shuffle(&mut rng);
    (0..src_vocab).map(|i| perm[i % tgt_vocab]).collect()
}

/// Template vectors, one per source token, each of length `dim`.
pub fn token_templates(template_seed: u64, src_vocab: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(template_seed, 0x7465_6d70));
    (0..src_vocab)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

pub fn generate_synthetic(spec: &SynthTaskSpec) -> Result<SynthCorpus, DataError> {
    spec.validate()?;
    let src_vocab = synth_vocab(&spec.src_lang, spec.src_vocab, spec.src_casing)?;
    let tgt_vocab = spec
        .tgt_lang
        .as_deref()
        .map(|l| synth_vocab(l, spec.tgt_vocab, Casing::Capitalized))
        .transpose()?;
    let templates = token_templates(
        spec.template_seed.unwrap_or(spec.seed),
        spec.src_vocab,
        spec.feature_dim,
    );
    let mapping = token_mapping(spec.mapping_seed, spec.src_vocab, spec.tgt_vocab.max(1));
    let noise = Normal::new(0.0, spec.noise).map_err(|e| DataError::Spec(e.to_string()))?;

    let make_split = |split: &str, split_id: u64, count: usize| -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, split_id), i as u64));
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.src_vocab)).collect();
                let mut data = Vec::new();
                for &tok in &src {
                    let reps =
                        rng.gen_range(spec.min_frames_per_token..=spec.max_frames_per_token);
                    for _ in 0..reps {
                        for &t in &templates[tok] {
                            let v = if spec.noise > 0.0 {
                                t + noise.sample(&mut rng)
                            } else {
                                t
                            };
                            data.push(v as f32);
                        }
                    }
                }
                let frames = data.len() / spec.feature_dim;
                let transcript = src
                    .iter()
                    .map(|&t| syllable(t, spec.src_casing))
                    .collect::<Vec<_>>()
                    .join(" ");
                let translation = spec.tgt_lang.as_ref().map(|_| {
                    let mapped: Vec<usize> = src.iter().map(|&t| mapping[t]).collect();
                    spec.reorder
                        .apply(&mapped)
                        .iter()
                        .map(|&t| syllable(t, Casing::Capitalized))
                        .collect::<Vec<_>>()
                        .join(" ")
                });
                Utterance {
                    id: format!("{}-{split}-{i:05}", spec.src_lang),
                    features: Features::new(frames, spec.feature_dim, data)
                        .expect("at least one frame per token"),
                    lang_src: spec.src_lang.clone(),
                    lang_tgt: spec.tgt_lang.clone(),
                    transcript: Some(transcript),
                    translation,
                }
            })
            .collect()
    };

    Ok(SynthCorpus {
        train: make_split("train", 1, spec.train),
        dev: make_split("dev", 2, spec.dev),
        test: make_split("test", 3, spec.test),
        src_vocab,
        tgt_vocab,
    })
}
