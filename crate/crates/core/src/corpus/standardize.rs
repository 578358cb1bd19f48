use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::to_exact_json;
use super::record::{Corpus, UtteranceRecord};
use crate::error::{Error, Result};

/// Per-feature mean and standard deviation fitted on training frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 marks a constant feature.
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit<'a, I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a UtteranceRecord>,
    {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut frames: Vec<&[f64]> = Vec::new();
        for r in records {
            for f in &r.frames {
                if sum.is_empty() {
                    sum = vec![0.0; f.len()];
                }
                if f.len() != sum.len() {
                    return Err(Error::Validation {
                        record: r.id.clone(),
                        detail: "frame width differs from the fitting split".into(),
                    });
                }
                for (s, v) in sum.iter_mut().zip(f) {
                    *s += v;
                }
                frames.push(f);
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::Contract(format!(
                "z-standardization needs at least 2 training frames, got {n}"
            )));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; mean.len()];
        for f in frames {
            for ((q, v), m) in sq.iter_mut().zip(f).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = sq.iter().map(|q| (q / n as f64).sqrt()).collect();
        let constant: Vec<usize> = (0..std.len()).filter(|&j| std[j] == 0.0).collect();
        if !constant.is_empty() {
            log::warn!("features {constant:?} have zero variance and map to 0");
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn apply(&self, r: &mut UtteranceRecord) -> Result<()> {
        for f in &mut r.frames {
            if f.len() != self.mean.len() {
                return Err(Error::Validation {
                    record: r.id.clone(),
                    detail: format!(
                        "frame width {} does not match stats width {}",
                        f.len(),
                        self.mean.len()
                    ),
                });
            }
            for ((v, m), s) in f.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s == 0.0 { 0.0 } else { (*v - m) / s };
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, to_exact_json(self)? + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Load {
            record: path.display().to_string(),
            field: "stats".into(),
            detail: e.to_string(),
        })
    }
}

/// Fits statistics on `train` only, then transforms every record.
pub fn z_standardize(corpus: &Corpus, train: &[usize]) -> Result<(Corpus, FeatureStats)> {
    let stats = FeatureStats::fit(train.iter().map(|&i| &corpus.records[i]))?;
    let mut out = corpus.clone();
    for r in &mut out.records {
        stats.apply(r)?;
    }
    Ok((out, stats))
}
