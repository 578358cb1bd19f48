//! Utterance records, their on-disk format, normalization, speaker-exclusive
//! folds, batching, and the synthetic corpus generator.

mod batch;
mod folds;
mod io;
mod record;
mod standardize;
mod synth;

pub use batch::{make_batches, truncate, Batch, Limits};
pub use folds::{make_folds, select_folds, FoldScheme, FoldSplit, Partition};
pub use io::{load_corpus, read_corpus, save_corpus, to_exact_json, write_corpus, ExactFloats};
pub use record::{check_spans, Corpus, Emotion, Span, UtteranceRecord, NUM_CLASSES};
pub use standardize::{z_standardize, FeatureStats};
pub use synth::{synth_generate, GeneratorSpec};
