//! The experimental models: acoustic-only, lexical-only, and multimodal
//! views, each mapping a batch of utterances to an embedding `h` and class
//! probabilities.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{decode, encode, Checkpoint, MAGIC, VERSION};
pub use config::{parse_kv, Readout, ViewConfig, ViewKind};
pub use model::{
    acoustic_word_encode, argmax, filtered_frames, filtered_spans, read_acoustic_words,
    speaker_frame_filter, Prediction, View, ViewInputs, ViewOutput,
};
