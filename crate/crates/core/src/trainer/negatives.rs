use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::plan::NegStrategy;
use crate::corpus::{Emotion, UtteranceRecord, NUM_CLASSES};
use crate::error::{Error, Result};

/// Positions of the training utterances, grouped by label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NegIndex {
    by_class: [Vec<usize>; NUM_CLASSES],
}

impl NegIndex {
    /// Positions refer to the order of `records`.
    pub fn new(records: &[&UtteranceRecord]) -> Self {
        let mut idx = NegIndex::default();
        for (i, r) in records.iter().enumerate() {
            idx.by_class[r.label.index()].push(i);
        }
        idx
    }

    pub fn class(&self, c: Emotion) -> &[usize] {
        &self.by_class[c.index()]
    }
}

/// One negative position per label, drawn with replacement.
pub fn get_neg_samples(
    labels: &[usize],
    index: &NegIndex,
    strategy: NegStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| {
            let pos = Emotion::from_index(y)
                .ok_or_else(|| Error::Contract(format!("label index {y} out of range")))?;
            match strategy {
                NegStrategy::AcousticallySimilar => {
                    let partner = pos.acoustic_partner();
                    let pool = index.class(partner);
                    if pool.is_empty() {
                        return Err(Error::Sampling(partner.to_string()));
                    }
                    Ok(pool[rng.random_range(0..pool.len())])
                }
                NegStrategy::RandomDiffClass => {
                    let others: Vec<&[usize]> = Emotion::ALL
                        .iter()
                        .filter(|&&c| c != pos)
                        .map(|&c| index.class(c))
                        .collect();
                    let total: usize = others.iter().map(|p| p.len()).sum();
                    if total == 0 {
                        return Err(Error::Sampling(format!("other than {pos}")));
                    }
                    let mut k = rng.random_range(0..total);
                    for p in others {
                        if k < p.len() {
                            return Ok(p[k]);
                        }
                        k -= p.len();
                    }
                    unreachable!("k < total")
                }
            }
        })
        .collect()
}
