use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four emotion categories, in canonical index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Happiness,
    Neutral,
    Sadness,
}

pub const NUM_CLASSES: usize = 4;

impl Emotion {
    pub const ALL: [Emotion; NUM_CLASSES] = [
        Emotion::Anger,
        Emotion::Happiness,
        Emotion::Neutral,
        Emotion::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Happiness => "happiness",
            Emotion::Neutral => "neutral",
            Emotion::Sadness => "sadness",
        }
    }

    /// The acoustically similar class used for hard negatives:
    /// anger with happiness, neutral with sadness.
    pub fn acoustic_partner(self) -> Emotion {
        match self {
            Emotion::Anger => Emotion::Happiness,
            Emotion::Happiness => Emotion::Anger,
            Emotion::Neutral => Emotion::Sadness,
            Emotion::Sadness => Emotion::Neutral,
        }
    }

    /// High-arousal classes (anger, happiness) vs low (neutral, sadness).
    pub fn high_arousal(self) -> bool {
        matches!(self, Emotion::Anger | Emotion::Happiness)
    }

    /// Positive valence classes (happiness, neutral) vs negative.
    pub fn positive_valence(self) -> bool {
        matches!(self, Emotion::Happiness | Emotion::Neutral)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Emotion::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown emotion label {s}")))
    }
}

/// Half-open frame range `[start, end)` of one word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(self) -> usize {
        self.0
    }

    pub fn end(self) -> usize {
        self.1
    }

    pub fn len(self) -> usize {
        self.1.saturating_sub(self.0)
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// One utterance with its acoustic frames and optional lexical fields.
///
/// Lexical fields (`tokens`, `word_vecs`, `alignment`) are absent in
/// acoustic-only corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub session: u32,
    pub speaker: String,
    pub label: Emotion,
    /// Feature vectors at 10 ms steps.
    pub frames: Vec<Vec<f64>>,
    /// True where the frame belongs to the target speaker's words.
    pub speaker_flags: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_vecs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<Span>>,
    /// Generator ground truth: index of the word carrying the lexical cue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue_word: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted: Option<bool>,
}

fn invalid(id: &str, detail: impl Into<String>) -> Error {
    Error::Validation {
        record: id.to_string(),
        detail: detail.into(),
    }
}

impl UtteranceRecord {
    pub fn frame_dim(&self) -> usize {
        self.frames.first().map(Vec::len).unwrap_or(0)
    }

    pub fn word_dim(&self) -> Option<usize> {
        self.word_vecs
            .as_ref()
            .and_then(|w| w.first())
            .map(Vec::len)
    }

    pub fn num_words(&self) -> Option<usize> {
        self.tokens
            .as_ref()
            .map(Vec::len)
            .or(self.word_vecs.as_ref().map(Vec::len))
            .or(self.alignment.as_ref().map(Vec::len))
    }

    pub fn has_lexical(&self) -> bool {
        self.word_vecs.is_some()
    }

    /// Drops tokens, word vectors, and alignments.
    pub fn strip_lexical(&mut self) {
        self.tokens = None;
        self.word_vecs = None;
        self.alignment = None;
        self.cue_word = None;
    }

    /// Enforces the record invariants: consistent lengths, finite values,
    /// ordered disjoint in-bounds spans, and speaker-flagged span frames.
    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if self.frames.is_empty() {
            return Err(invalid(id, "utterance has no frames"));
        }
        let fd = self.frame_dim();
        if fd == 0 {
            return Err(invalid(id, "frame vectors are empty"));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != fd {
                return Err(invalid(id, format!("frame {t} has width {} not {fd}", f.len())));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(invalid(id, format!("frame {t} has a non-finite value")));
            }
        }
        if self.speaker_flags.len() != self.frames.len() {
            return Err(invalid(
                id,
                format!(
                    "{} speaker flags for {} frames",
                    self.speaker_flags.len(),
                    self.frames.len()
                ),
            ));
        }
        let counts: Vec<(&str, usize)> = [
            ("tokens", self.tokens.as_ref().map(Vec::len)),
            ("word_vecs", self.word_vecs.as_ref().map(Vec::len)),
            ("alignment", self.alignment.as_ref().map(Vec::len)),
        ]
        .into_iter()
        .filter_map(|(n, c)| c.map(|c| (n, c)))
        .collect();
        if let Some(&(first, n)) = counts.first() {
            if let Some(&(other, m)) = counts.iter().find(|(_, c)| *c != n) {
                return Err(invalid(id, format!("{first} has {n} entries but {other} has {m}")));
            }
            if n == 0 {
                return Err(invalid(id, "lexical fields present but empty"));
            }
        }
        if let Some(w) = &self.word_vecs {
            let wd = w[0].len();
            if wd == 0 {
                return Err(invalid(id, "word vectors are empty"));
            }
            for (k, v) in w.iter().enumerate() {
                if v.len() != wd {
                    return Err(invalid(id, format!("word vector {k} has width {}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(invalid(id, format!("word vector {k} has a non-finite value")));
                }
            }
        }
        if let Some(spans) = &self.alignment {
            check_spans(id, spans, self.frames.len())?;
            for (k, s) in spans.iter().enumerate() {
                if let Some(t) = (s.0..s.1).find(|&t| !self.speaker_flags[t]) {
                    return Err(invalid(
                        id,
                        format!("span {k} covers frame {t} which is not a speaker frame"),
                    ));
                }
            }
        }
        if let Some(c) = self.cue_word {
            if self.num_words().is_some_and(|n| c >= n) {
                return Err(invalid(id, format!("cue word {c} out of range")));
            }
        }
        Ok(())
    }
}

/// Spans must be non-empty, ordered, disjoint, and inside `[0, frames)`.
pub fn check_spans(id: &str, spans: &[Span], frames: usize) -> Result<()> {
    let mut prev_end = 0;
    for (k, s) in spans.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Alignment(format!("{id}: span {k} {s:?} is empty")));
        }
        if s.1 > frames {
            return Err(Error::Alignment(format!(
                "{id}: span {k} {s:?} exceeds {frames} frames"
            )));
        }
        if s.0 < prev_end {
            return Err(Error::Alignment(format!(
                "{id}: span {k} {s:?} overlaps or precedes the previous span"
            )));
        }
        prev_end = s.1;
    }
    Ok(())
}

/// An immutable collection of validated utterances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn new(records: Vec<UtteranceRecord>) -> Result<Self> {
        let c = Corpus { records };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let fd = self.records.first().map(|r| r.frame_dim());
        let wd = self.records.iter().find_map(|r| r.word_dim());
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(invalid(&r.id, "duplicate utterance id"));
            }
            if Some(r.frame_dim()) != fd {
                return Err(invalid(&r.id, "frame width differs from the rest of the corpus"));
            }
            if r.word_dim().is_some() && r.word_dim() != wd {
                return Err(invalid(&r.id, "word vector width differs from the rest of the corpus"));
            }
        }
        Ok(())
    }

    pub fn frame_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.frame_dim())
    }

    pub fn word_dim(&self) -> Option<usize> {
        self.records.iter().find_map(|r| r.word_dim())
    }

    pub fn find(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Copy with every lexical field removed (the deployment setting).
    pub fn strip_lexical(&self) -> Corpus {
        let mut c = self.clone();
        c.records.iter_mut().for_each(UtteranceRecord::strip_lexical);
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&UtteranceRecord> {
        indices.iter().map(|&i| &self.records[i]).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for r in &self.records {
            c[r.label.index()] += 1;
        }
        c
    }
}
