use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, NUM_CLASSES};
use crate::error::{Error, Result};

/// Scores for one evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean recall over the classes present in the ground truth.
    pub ua: f64,
    /// Plain fraction of correct predictions.
    pub accuracy: f64,
    /// Rows are ground truth, columns predictions.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// `None` for classes absent from the ground truth.
    pub per_class_recall: [Option<f64>; NUM_CLASSES],
}

impl EvalResult {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn row_total(&self, c: usize) -> usize {
        self.confusion[c].iter().sum()
    }
}

/// Macro-averaged recall (UA) plus confusion counts.
pub fn unweighted_accuracy(labels: &[usize], predictions: &[usize]) -> Result<EvalResult> {
    if labels.len() != predictions.len() {
        return Err(Error::Dimension {
            op: "unweighted_accuracy",
            lhs: vec![labels.len()],
            rhs: vec![predictions.len()],
        });
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::Contract(format!("class index out of range: {y} / {p}")));
        }
        confusion[y][p] += 1;
    }
    let mut recall = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let n: usize = confusion[c].iter().sum();
        if n == 0 {
            log::warn!("class {} absent from ground truth; excluded from UA", Emotion::ALL[c]);
        } else {
            recall[c] = Some(confusion[c][c] as f64 / n as f64);
        }
    }
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    let ua = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let accuracy = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };
    Ok(EvalResult {
        ua,
        accuracy,
        confusion,
        per_class_recall: recall,
    })
}

/// Validation and test UA of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub dev_ua: f64,
    pub test_ua: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    pub mean_dev_ua: f64,
    pub mean_test_ua: f64,
    pub rows: Vec<FoldRow>,
}

pub fn cross_fold_summary(rows: &[FoldRow]) -> Result<FoldSummary> {
    if rows.is_empty() {
        return Err(Error::Contract("cross-fold summary of zero folds".into()));
    }
    let n = rows.len() as f64;
    Ok(FoldSummary {
        mean_dev_ua: rows.iter().map(|r| r.dev_ua).sum::<f64>() / n,
        mean_test_ua: rows.iter().map(|r| r.test_ua).sum::<f64>() / n,
        rows: rows.to_vec(),
    })
}

impl FoldSummary {
    /// Tab-separated table: one row per fold, then the mean.
    pub fn to_tsv(&self, model: &str) -> String {
        let mut s = String::from("model\tfold\tdev_ua\ttest_ua\n");
        for r in &self.rows {
            s.push_str(&format!("{model}\t{}\t{:.6}\t{:.6}\n", r.fold, r.dev_ua, r.test_ua));
        }
        s.push_str(&format!(
            "{model}\tmean\t{:.6}\t{:.6}\n",
            self.mean_dev_ua, self.mean_test_ua
        ));
        s
    }
}
