//! Unweighted accuracy, cross-fold tables, and the attention, gate, and
//! confusion-matrix reports.

mod eval;
mod report;

pub use eval::{cross_fold_summary, unweighted_accuracy, EvalResult, FoldRow, FoldSummary};
pub use report::{
    attention_report, confusion_render, confusion_svg, confusion_text, parse_confusion_text,
    AttentionReport, WordEntry,
};
