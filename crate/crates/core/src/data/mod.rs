//! Vocabularies, segmentation, manifests and synthetic corpora.

mod manifest;
mod synth;
mod vocab;

use std::path::Path;

use thiserror::Error;

pub use manifest::{load_manifest, write_manifest, Features, ManifestRecord, Utterance};
pub use synth::{
    generate_synthetic, syllable, synth_vocab, token_mapping, token_templates, Casing, Reorder,
    SynthCorpus, SynthTaskSpec,
};
pub use vocab::{
    viterbi_segment, Segmentation, Vocabulary, BLANK, EOS, NUM_RESERVED, RESERVED_TOKENS, SOS,
    UNK, WORD_BOUNDARY,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("empty corpus for language {0}")]
    EmptyCorpus(String),
    #[error("vocabulary {language}: {msg}")]
    Vocab { language: String, msg: String },
    #[error("invalid synthetic task spec: {0}")]
    Spec(String),
    #[error("utterance {id} lacks a {field}")]
    MissingField { id: String, field: &'static str },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
