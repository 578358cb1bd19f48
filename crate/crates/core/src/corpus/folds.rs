use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::record::Corpus;
use crate::error::{Error, Result};

/// How held-out sessions are split into validation and test speakers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldScheme {
    /// Only the first arrangement per session (one fold per session).
    pub single_arrangement: bool,
}

/// One speaker-exclusive cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub held_out_session: u32,
    pub train_sessions: Vec<u32>,
    pub validation_speakers: Vec<String>,
    pub test_speakers: Vec<String>,
}

/// Record indices of each part of a fold.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    pub fn partition(&self, corpus: &Corpus) -> Partition {
        let mut p = Partition::default();
        for (i, r) in corpus.records.iter().enumerate() {
            if r.session != self.held_out_session {
                p.train.push(i);
            } else if self.validation_speakers.contains(&r.speaker) {
                p.validation.push(i);
            } else if self.test_speakers.contains(&r.speaker) {
                p.test.push(i);
            }
        }
        p
    }
}

/// Sessions ascending; within a session each speaker (sorted) takes the
/// validation role once while the remaining speakers form the test set.
pub fn make_folds(corpus: &Corpus, scheme: FoldScheme) -> Result<Vec<FoldSplit>> {
    let mut sessions: BTreeMap<u32, BTreeSet<&str>> = BTreeMap::new();
    for r in &corpus.records {
        sessions.entry(r.session).or_default().insert(&r.speaker);
    }
    if sessions.len() < 2 {
        return Err(Error::Fold(format!(
            "need at least 2 sessions to hold one out, found {}",
            sessions.len()
        )));
    }
    let mut folds = Vec::new();
    for (&s, speakers) in &sessions {
        if speakers.len() < 2 {
            return Err(Error::Fold(format!(
                "session {s} has a single speaker; cannot split it into validation and test"
            )));
        }
        let speakers: Vec<&str> = speakers.iter().copied().collect();
        let arrangements = if scheme.single_arrangement { 1 } else { speakers.len() };
        let train_sessions: Vec<u32> = sessions.keys().copied().filter(|&k| k != s).collect();
        for v in 0..arrangements {
            folds.push(FoldSplit {
                fold_id: folds.len(),
                held_out_session: s,
                train_sessions: train_sessions.clone(),
                validation_speakers: vec![speakers[v].to_string()],
                test_speakers: speakers
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != v)
                    .map(|(_, sp)| sp.to_string())
                    .collect(),
            });
        }
    }
    Ok(folds)
}

/// Parses `all` or a comma-separated list of fold ids.
pub fn select_folds(folds: &[FoldSplit], spec: &str) -> Result<Vec<FoldSplit>> {
    if spec.trim() == "all" {
        return Ok(folds.to_vec());
    }
    spec.split(',')
        .map(|s| {
            let id: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fold id {s:?}")))?;
            folds
                .iter()
                .find(|f| f.fold_id == id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("fold {id} does not exist ({} folds)", folds.len())))
        })
        .collect()
}
