//! Joint CTC/attention encoder-decoder toolkit for speech recognition and
//! speech translation, with per-language output heads and ASR-to-ST transfer.

pub mod tensor;
pub mod data;
pub mod ctc;
pub mod model;
pub mod train;
pub mod decode;
pub mod eval;
