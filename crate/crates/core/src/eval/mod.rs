//! Error rates and translation metrics.

mod bleu;
mod chrf;
mod edit;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu_from_stats, tokenize_13a};
pub use chrf::chrf_from_stats;
pub use edit::edit_distance;

pub const SACREBLEU_VERSION: &str = "2.3.1";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{refs} references but {hyps} hypotheses")]
    Length { refs: usize, hyps: usize },
    #[error("empty corpus")]
    Empty,
    #[error("error rate undefined: references contain no {0}")]
    NoReferenceUnits(&'static str),
    #[error("{metric}: expected {expected} statistics, found {found}")]
    Stats {
        metric: Metric,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Wer,
    Cer,
    Bleu,
    Chrf2,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Wer, Metric::Cer, Metric::Bleu, Metric::Chrf2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Wer => "wer",
            Metric::Cer => "cer",
            Metric::Bleu => "bleu",
            Metric::Chrf2 => "chrf2",
        }
    }

    pub fn signature(self) -> String {
        match self {
            Metric::Wer => "unit:word|case:mixed".into(),
            Metric::Cer => "unit:char|space:collapse|case:mixed".into(),
            Metric::Bleu => format!(
                "nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp|version:{SACREBLEU_VERSION}"
            ),
            Metric::Chrf2 => format!(
                "nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no|version:{SACREBLEU_VERSION}"
            ),
        }
    }

    fn stats_len(self) -> usize {
        match self {
            Metric::Wer | Metric::Cer => 2,
            Metric::Bleu => 2 + 2 * bleu::MAX_ORDER,
            Metric::Chrf2 => 3 * chrf::CHAR_ORDER,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s.to_ascii_lowercase())
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A corpus score with the summed sufficient statistics it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: Metric,
    pub value: f64,
    /// Per-sentence values, where the metric defines them.
    pub sentences: Option<Vec<f64>>,
    pub signature: String,
    pub stats: Vec<u64>,
}

impl ScoreReport {
    /// Recomputes the corpus value from `stats`.
    pub fn recompute(&self) -> Result<f64, EvalError> {
        value_from_stats(self.metric, &self.stats)
    }
}

pub fn value_from_stats(metric: Metric, stats: &[u64]) -> Result<f64, EvalError> {
    if stats.len() != metric.stats_len() {
        return Err(EvalError::Stats {
            metric,
            expected: metric.stats_len(),
            found: stats.len(),
        });
    }
    Ok(match metric {
        Metric::Wer | Metric::Cer => {
            if stats[1] == 0 {
                let unit = if metric == Metric::Wer { "words" } else { "characters" };
                return Err(EvalError::NoReferenceUnits(unit));
            }
            100.0 * stats[0] as f64 / stats[1] as f64
        }
        Metric::Bleu => bleu_from_stats(stats),
        Metric::Chrf2 => chrf_from_stats(stats),
    })
}

fn check<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<(), EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::Length {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn sum_stats(rows: impl Iterator<Item = Vec<u64>>, len: usize) -> Vec<u64> {
    rows.fold(vec![0; len], |mut acc, r| {
        acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        acc
    })
}

fn error_rate<S: AsRef<str>>(refs: &[S], hyps: &[S], metric: Metric) -> Result<ScoreReport, EvalError> {
    check(refs, hyps)?;
    let rows: Vec<Vec<u64>> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            let (r, h) = (r.as_ref(), h.as_ref());
            let (errors, len) = if metric == Metric::Wer {
                let (r, h) = (edit::words(r), edit::words(h));
                (edit_distance(&r, &h), r.len())
            } else {
                let (r, h) = (edit::chars(r), edit::chars(h));
                (edit_distance(&r, &h), r.len())
            };
            vec![errors as u64, len as u64]
        })
        .collect();
    // Sentences with empty references are scored against a length of one.
    let sentences = rows
        .iter()
        .map(|r| 100.0 * r[0] as f64 / r[1].max(1) as f64)
        .collect();
    let stats = sum_stats(rows.into_iter(), 2);
    Ok(ScoreReport {
        metric,
        value: value_from_stats(metric, &stats)?,
        sentences: Some(sentences),
        signature: metric.signature(),
        stats,
    })
}

/// Word error rate in percent.
pub fn wer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<ScoreReport, EvalError> {
    error_rate(refs, hyps, Metric::Wer)
}

/// Character error rate in percent; whitespace runs count as one space.
pub fn cer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<ScoreReport, EvalError> {
    error_rate(refs, hyps, Metric::Cer)
}

/// Corpus BLEU-4.
pub fn bleu<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<ScoreReport, EvalError> {
    check(refs, hyps)?;
    let rows = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| bleu::segment_stats(r.as_ref(), h.as_ref()).to_vec());
    let stats = sum_stats(rows, Metric::Bleu.stats_len());
    Ok(ScoreReport {
        metric: Metric::Bleu,
        value: bleu_from_stats(&stats),
        sentences: None,
        signature: Metric::Bleu.signature(),
        stats,
    })
}

/// Corpus chrF2.
pub fn chrf2<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<ScoreReport, EvalError> {
    check(refs, hyps)?;
    let rows: Vec<Vec<u64>> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| chrf::segment_stats(r.as_ref(), h.as_ref()).to_vec())
        .collect();
    let sentences = rows.iter().map(|r| chrf_from_stats(r)).collect();
    let stats = sum_stats(rows.into_iter(), Metric::Chrf2.stats_len());
    Ok(ScoreReport {
        metric: Metric::Chrf2,
        value: chrf_from_stats(&stats),
        sentences: Some(sentences),
        signature: Metric::Chrf2.signature(),
        stats,
    })
}

pub fn score<S: AsRef<str>>(metric: Metric, refs: &[S], hyps: &[S]) -> Result<ScoreReport, EvalError> {
    match metric {
        Metric::Wer => wer(refs, hyps),
        Metric::Cer => cer(refs, hyps),
        Metric::Bleu => bleu(refs, hyps),
        Metric::Chrf2 => chrf2(refs, hyps),
    }
}
