use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const BLANK: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<blank>", "<unk>", "<sos>", "<eos>"];

/// Word-boundary marker used by unigram vocabularies in place of a space.
pub const WORD_BOUNDARY: char = '\u{2581}';

/// Penalty below the lowest piece score given to an out-of-vocabulary character.
const UNK_PENALTY: f64 = 10.0;

/// How text maps onto tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segmentation {
    Char,
    Word,
    Unigram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VocabRecord {
    language: String,
    segmentation: Segmentation,
    tokens: Vec<String>,
    /// Scores of the non-reserved tokens only.
    log_probs: Option<Vec<f64>>,
}

/// Token inventory of one language. Indices 0..4 are always
/// `<blank>`, `<unk>`, `<sos>`, `<eos>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct Vocabulary {
    language: String,
    segmentation: Segmentation,
    tokens: Vec<String>,
    log_probs: Option<Vec<f64>>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.language == other.language
            && self.segmentation == other.segmentation
            && self.tokens == other.tokens
            && match (&self.log_probs, &other.log_probs) {
                (Some(a), Some(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (None, None) => true,
                _ => false,
            }
    }
}

impl TryFrom<VocabRecord> for Vocabulary {
    type Error = DataError;

    fn try_from(r: VocabRecord) -> Result<Self, DataError> {
        let log_probs = r.log_probs.map(|lp| {
            let mut full = vec![f64::NEG_INFINITY; NUM_RESERVED];
            full.extend(lp);
            full
        });
        Vocabulary::from_full_tokens(r.language, r.segmentation, r.tokens, log_probs)
    }
}

impl From<Vocabulary> for VocabRecord {
    fn from(v: Vocabulary) -> Self {
        VocabRecord {
            language: v.language,
            segmentation: v.segmentation,
            tokens: v.tokens,
            log_probs: v
                .log_probs
                .map(|lp| lp.get(NUM_RESERVED..).unwrap_or_default().to_vec()),
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens; the reserved four are prepended.
    pub fn new(
        language: impl Into<String>,
        segmentation: Segmentation,
        tokens: Vec<String>,
        log_probs: Option<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let log_probs = log_probs.map(|lp| {
            let mut full = vec![f64::NEG_INFINITY; NUM_RESERVED];
            full.extend(lp);
            full
        });
        Self::from_full_tokens(language.into(), segmentation, all, log_probs)
    }

    fn from_full_tokens(
        language: String,
        segmentation: Segmentation,
        tokens: Vec<String>,
        log_probs: Option<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let bad = |msg: String| DataError::Vocab {
            language: language.clone(),
            msg,
        };
        if tokens.len() < NUM_RESERVED + 1 {
            return Err(bad(format!(
                "needs at least {} tokens, got {}",
                NUM_RESERVED + 1,
                tokens.len()
            )));
        }
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *r {
                return Err(bad(format!("index {i} must hold {r}, found {:?}", tokens[i])));
            }
        }
        if let Some(lp) = &log_probs {
            if lp.len() != tokens.len() {
                return Err(bad(format!(
                    "{} log-probs for {} tokens",
                    lp.len(),
                    tokens.len()
                )));
            }
        }
        if segmentation == Segmentation::Unigram && log_probs.is_none() {
            return Err(bad("unigram segmentation needs per-token log-probs".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(bad(format!("empty token at index {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(bad(format!("duplicate token {t:?}")));
            }
        }
        let max_piece_chars = tokens[NUM_RESERVED..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            language,
            segmentation,
            tokens,
            log_probs,
            index,
            max_piece_chars,
        })
    }

    /// One token per distinct character, codepoint-sorted.
    pub fn build_char_vocab<S: AsRef<str>>(
        corpus: &[S],
        language: impl Into<String>,
    ) -> Result<Self, DataError> {
        let language = language.into();
        let chars: BTreeSet<char> = corpus.iter().flat_map(|s| s.as_ref().chars()).collect();
        if chars.is_empty() {
            return Err(DataError::EmptyCorpus(language));
        }
        let tokens = chars.into_iter().map(String::from).collect();
        Self::new(language, Segmentation::Char, tokens, None)
    }

    /// One token per distinct whitespace-separated word, sorted.
    pub fn build_word_vocab<S: AsRef<str>>(
        corpus: &[S],
        language: impl Into<String>,
    ) -> Result<Self, DataError> {
        let language = language.into();
        let words: BTreeSet<&str> = corpus
            .iter()
            .flat_map(|s| s.as_ref().split_whitespace())
            .collect();
        if words.is_empty() {
            return Err(DataError::EmptyCorpus(language));
        }
        let tokens = words.into_iter().map(String::from).collect();
        Self::new(language, Segmentation::Word, tokens, None)
    }

    /// Reads a vocabulary file: one token per line, optionally followed by
    /// a tab or space and its log-probability. Reserved tokens may be listed
    /// at the top; otherwise they are prepended.
    pub fn from_file(path: &Path, language: impl Into<String>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, lp) = match line.rsplit_once(['\t', ' ']) {
                Some((t, v)) if !t.is_empty() => match v.parse::<f64>() {
                    Ok(v) => (t, Some(v)),
                    Err(_) => (line, None),
                },
                _ => (line, None),
            };
            if RESERVED_TOKENS.contains(&tok) {
                continue;
            }
            tokens.push(tok.to_string());
            log_probs.push(lp);
            if log_probs.len() > 1 && log_probs[0].is_some() != lp.is_some() {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: n + 1,
                    msg: "log-probs must be given for all tokens or none".into(),
                });
            }
        }
        let lps: Option<Vec<f64>> = log_probs.iter().copied().collect();
        let seg = if lps.is_some() {
            Segmentation::Unigram
        } else {
            Segmentation::Word
        };
        Self::new(language, seg, tokens, lps)
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn segmentation(&self) -> Segmentation {
        self.segmentation
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn log_probs(&self) -> Option<&[f64]> {
        self.log_probs.as_deref()
    }

    /// Token ids for `text` and the number of units mapped to `<unk>`.
    pub fn encode(&self, text: &str) -> (Vec<usize>, usize) {
        let lookup = |piece: &str| self.id(piece).unwrap_or(UNK);
        let ids: Vec<usize> = match self.segmentation {
            Segmentation::Char => text
                .chars()
                .map(|c| lookup(c.encode_utf8(&mut [0; 4])))
                .collect(),
            Segmentation::Word => text.split_whitespace().map(lookup).collect(),
            Segmentation::Unigram => viterbi_segment(text, self),
        };
        let unk = ids.iter().filter(|&&i| i == UNK).count();
        (ids, unk)
    }

    /// Text for a token sequence; reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let pieces = ids
            .iter()
            .filter(|&&i| i >= NUM_RESERVED)
            .filter_map(|&i| self.token(i));
        match self.segmentation {
            Segmentation::Char => pieces.collect(),
            Segmentation::Word => pieces.collect::<Vec<_>>().join(" "),
            Segmentation::Unigram => pieces
                .collect::<String>()
                .replace(WORD_BOUNDARY, " ")
                .trim()
                .to_string(),
        }
    }
}

#[derive(Clone, Copy)]
struct Best {
    score: f64,
    count: usize,
    end: usize,
    id: usize,
}

/// Highest-scoring segmentation of `text` under the vocabulary's unigram
/// log-probabilities. Ties prefer fewer tokens, then longer leftmost pieces.
/// Spaces are matched as the word-boundary marker.
pub fn viterbi_segment(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let chars: Vec<char> = text
        .chars()
        .map(|c| if c == ' ' { WORD_BOUNDARY } else { c })
        .collect();
    let n = chars.len();
    if n == 0 {
        return Vec::new();
    }
    let lps = vocab.log_probs.as_deref();
    let piece_score = |id: usize| lps.map_or(0.0, |lp| lp[id]);
    let unk_score = lps
        .map(|lp| {
            lp[NUM_RESERVED..]
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|v| v.is_finite())
        .unwrap_or(0.0)
        - UNK_PENALTY;

    // best[i] describes the optimal segmentation of chars[i..].
    let mut best: Vec<Option<Best>> = vec![None; n + 1];
    best[n] = Some(Best {
        score: 0.0,
        count: 0,
        end: n,
        id: UNK,
    });
    let mut buf = String::new();
    for i in (0..n).rev() {
        let mut choice: Option<Best> = None;
        let longest = vocab.max_piece_chars.min(n - i);
        for j in (i + 1..=i + longest).rev() {
            let Some(rest) = best[j] else { continue };
            buf.clear();
            buf.extend(&chars[i..j]);
            let Some(id) = vocab.id(&buf).filter(|&id| id >= NUM_RESERVED) else {
                continue;
            };
            let cand = Best {
                score: piece_score(id) + rest.score,
                count: rest.count + 1,
                end: j,
                id,
            };
            // Longer pieces are visited first, so only strict improvements replace.
            let better = match choice {
                None => true,
                Some(c) => cand.score > c.score || (cand.score == c.score && cand.count < c.count),
            };
            if better {
                choice = Some(cand);
            }
        }
        if choice.is_none() {
            if let Some(rest) = best[i + 1] {
                choice = Some(Best {
                    score: unk_score + rest.score,
                    count: rest.count + 1,
                    end: i + 1,
                    id: UNK,
                });
            }
        }
        best[i] = choice;
    }
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < n {
        let b = best[pos].expect("every position is reachable through unk fallback");
        out.push(b.id);
        pos = b.end;
    }
    out
}
