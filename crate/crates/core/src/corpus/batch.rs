use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{Span, UtteranceRecord};
use crate::error::{Error, Result};
use crate::layers::SeqBatch;

/// Per-utterance length caps applied before batching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub max_frames: usize,
    pub max_words: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_frames: 700,
            max_words: 30,
        }
    }
}

/// Cuts frames and words beyond the caps, keeping the record consistent.
/// Returns whether anything was removed.
pub fn truncate(r: &mut UtteranceRecord, limits: Limits) -> bool {
    let mut cut = false;
    if r.frames.len() > limits.max_frames {
        r.frames.truncate(limits.max_frames);
        r.speaker_flags.truncate(limits.max_frames);
        cut = true;
    }
    let mut keep_words = r.num_words().unwrap_or(0).min(limits.max_words);
    if let Some(spans) = &r.alignment {
        keep_words = spans
            .iter()
            .take(keep_words)
            .take_while(|s| s.start() < limits.max_frames)
            .count();
    }
    if r.num_words().is_some_and(|n| n > keep_words) {
        cut = true;
        if let Some(t) = &mut r.tokens {
            t.truncate(keep_words);
        }
        if let Some(w) = &mut r.word_vecs {
            w.truncate(keep_words);
        }
        if let Some(a) = &mut r.alignment {
            a.truncate(keep_words);
        }
        if r.cue_word.is_some_and(|c| c >= keep_words) {
            r.cue_word = None;
        }
    }
    if let Some(a) = &mut r.alignment {
        for s in a.iter_mut() {
            if s.end() > limits.max_frames {
                *s = Span(s.start(), limits.max_frames);
                cut = true;
            }
        }
    }
    if cut {
        log::warn!(
            "utterance {} truncated to at most {} frames and {} words",
            r.id,
            limits.max_frames,
            limits.max_words
        );
    }
    cut
}

/// A group of utterances processed together in one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub records: Vec<UtteranceRecord>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let labels = records.iter().map(|r| r.label.index()).collect();
        Ok(Batch { records, labels })
    }

    /// Copies and truncates `records`.
    pub fn from_refs(records: &[&UtteranceRecord], limits: Limits) -> Result<Self> {
        let recs = records
            .iter()
            .map(|&r| {
                let mut r = r.clone();
                truncate(&mut r, limits);
                r
            })
            .collect();
        Batch::new(recs)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All frames, padded to the longest item.
    pub fn frames(&self) -> Result<SeqBatch> {
        let items: Vec<Vec<Vec<f64>>> = self.records.iter().map(|r| r.frames.clone()).collect();
        SeqBatch::from_items(&items)
    }

    /// Word vectors, padded to the most words; a data error if any item lacks them.
    pub fn word_vectors(&self) -> Result<SeqBatch> {
        let items = self
            .records
            .iter()
            .map(|r| {
                r.word_vecs.clone().ok_or_else(|| Error::Data {
                    id: r.id.clone(),
                    detail: "word vectors are absent".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SeqBatch::from_items(&items)
    }
}

/// Splits `records` into batches, shuffling first when `rng` is given.
pub fn make_batches(
    records: &[&UtteranceRecord],
    batch_size: usize,
    limits: Limits,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch>> {
    if records.is_empty() {
        return Err(Error::Contract("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&UtteranceRecord> = chunk.iter().map(|&i| records[i]).collect();
            Batch::from_refs(&refs, limits)
        })
        .collect()
}
