use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::eval::EvalResult;
use crate::corpus::{Emotion, UtteranceRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::views::{Prediction, ViewKind};

/// One row of an attention report.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEntry {
    pub token: String,
    pub attention: Option<f64>,
    /// Acoustic share of the GMU gate; the lexical share is `1 - acoustic`.
    pub acoustic: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub utterance: String,
    pub view: ViewKind,
    pub label: Emotion,
    pub predicted: Emotion,
    pub words: Vec<WordEntry>,
}

impl AttentionReport {
    pub fn new(u: &UtteranceRecord, kind: ViewKind, p: &Prediction) -> Result<Self> {
        let steps = match (&p.attention, &p.gate) {
            (Some(a), _) => a.len(),
            (None, Some(z)) => z.len(),
            (None, None) => {
                return Err(Error::Report(format!(
                    "view {kind} produces neither attention weights nor gate values"
                )))
            }
        };
        let tokens: Vec<String> = if kind.uses_acoustic_words() || kind.reads_word_vectors() {
            u.tokens
                .clone()
                .unwrap_or_else(|| (0..steps).map(|k| format!("word{k}")).collect())
        } else {
            (0..steps).map(|t| format!("frame{t}")).collect()
        };
        if tokens.len() < steps {
            return Err(Error::Report(format!(
                "utterance {} has {} tokens for {steps} attended steps",
                u.id,
                tokens.len()
            )));
        }
        let words = (0..steps)
            .map(|k| WordEntry {
                token: tokens[k].clone(),
                attention: p.attention.as_ref().map(|a| a[k]),
                acoustic: p.gate.as_ref().map(|z| z[k]),
            })
            .collect();
        Ok(AttentionReport {
            utterance: u.id.clone(),
            view: kind,
            label: Emotion::ALL[p.label],
            predicted: Emotion::ALL[p.predicted],
            words,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "utterance\t{}", self.utterance);
        let _ = writeln!(s, "view\t{}", self.view);
        let _ = writeln!(s, "label\t{}", self.label);
        let _ = writeln!(s, "predicted\t{}", self.predicted);
        s.push_str("index\ttoken\tattention\tacoustic\tlexical\n");
        let num = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.12}"));
        for (k, w) in self.words.iter().enumerate() {
            let _ = writeln!(
                s,
                "{k}\t{}\t{}\t{}\t{}",
                w.token,
                num(w.attention),
                num(w.acoustic),
                num(w.acoustic.map(|a| 1.0 - a))
            );
        }
        s
    }

    /// Words left to right; background opacity is the attention weight,
    /// the bar pair above each word splits the gate into acoustic (left) and
    /// lexical (right) shares.
    pub fn to_svg(&self) -> String {
        const CELL: f64 = 90.0;
        const BAR: f64 = 30.0;
        let width = CELL * self.words.len().max(1) as f64 + 20.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="120" font-family="monospace" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="10" y="14">{} {} label={} predicted={}</text>"#,
            escape(&self.utterance),
            self.view,
            self.label,
            self.predicted
        );
        for (k, w) in self.words.iter().enumerate() {
            let x = 10.0 + CELL * k as f64;
            if let Some(a) = w.attention {
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="60" width="{}" height="30" fill="steelblue" fill-opacity="{a:.6}"/>"#,
                    CELL - 4.0
                );
            }
            if let Some(z) = w.acoustic {
                let mid = x + (CELL - 4.0) / 2.0;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="14" height="{:.3}" fill="darkorange"/>"#,
                    mid - 15.0,
                    55.0 - BAR * z,
                    BAR * z
                );
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="14" height="{:.3}" fill="seagreen"/>"#,
                    mid + 1.0,
                    55.0 - BAR * (1.0 - z),
                    BAR * (1.0 - z)
                );
            }
            let _ = writeln!(s, r#"<text x="{:.3}" y="80">{}</text>"#, x + 4.0, escape(&w.token));
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<dir>/<utterance>.txt` and `.svg`, returning both paths.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let stem = self.utterance.replace(['/', '\\'], "_");
        let txt = dir.join(format!("{stem}.txt"));
        let svg = dir.join(format!("{stem}.svg"));
        fs::write(&txt, self.to_text()).map_err(|e| Error::file(&txt, e))?;
        fs::write(&svg, self.to_svg()).map_err(|e| Error::file(&svg, e))?;
        Ok((txt, svg))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn attention_report(u: &UtteranceRecord, kind: ViewKind, p: &Prediction) -> Result<AttentionReport> {
    AttentionReport::new(u, kind, p)
}

fn row_share(r: &EvalResult, c: usize, k: usize) -> f64 {
    let n = r.row_total(c);
    if n == 0 {
        0.0
    } else {
        r.confusion[c][k] as f64 / n as f64
    }
}

/// Count table followed by the row-normalized table.
pub fn confusion_text(r: &EvalResult) -> String {
    let mut s = String::from("truth\\pred");
    for e in Emotion::ALL {
        let _ = write!(s, "\t{e}");
    }
    s.push_str("\ttotal\n");
    for c in 0..NUM_CLASSES {
        let _ = write!(s, "{}", Emotion::ALL[c]);
        for k in 0..NUM_CLASSES {
            let _ = write!(s, "\t{}", r.confusion[c][k]);
        }
        let _ = write!(s, "\t{}", r.row_total(c));
        if r.row_total(c) == 0 {
            s.push_str("\t(no samples)");
        }
        s.push('\n');
    }
    s.push_str("\nrow-normalized\n");
    for c in 0..NUM_CLASSES {
        let _ = write!(s, "{}", Emotion::ALL[c]);
        for k in 0..NUM_CLASSES {
            let _ = write!(s, "\t{:.4}", row_share(r, c, k));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\nua\t{:.6}\naccuracy\t{:.6}", r.ua, r.accuracy);
    s
}

/// Recovers the count matrix from [`confusion_text`] output.
pub fn parse_confusion_text(text: &str) -> Result<[[usize; NUM_CLASSES]; NUM_CLASSES]> {
    let mut m = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut lines = text.lines();
    lines
        .next()
        .filter(|h| h.starts_with("truth\\pred"))
        .ok_or_else(|| Error::Report("confusion table header missing".into()))?;
    for (c, row) in m.iter_mut().enumerate() {
        let line = lines
            .next()
            .ok_or_else(|| Error::Report(format!("confusion row {c} missing")))?;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.first() != Some(&Emotion::ALL[c].name()) || cells.len() < NUM_CLASSES + 1 {
            return Err(Error::Report(format!("malformed confusion row {line:?}")));
        }
        for k in 0..NUM_CLASSES {
            row[k] = cells[k + 1]
                .parse()
                .map_err(|_| Error::Report(format!("bad count {:?}", cells[k + 1])))?;
        }
    }
    Ok(m)
}

pub fn confusion_svg(r: &EvalResult, title: &str) -> String {
    const CELL: f64 = 70.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="monospace" font-size="11">"#,
        100.0 + CELL * NUM_CLASSES as f64,
        60.0 + CELL * NUM_CLASSES as f64
    );
    let _ = writeln!(s, r#"<text x="10" y="14">{}</text>"#, escape(title));
    for (k, e) in Emotion::ALL.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="40">{e}</text>"#, 100.0 + CELL * k as f64);
    }
    for c in 0..NUM_CLASSES {
        let y = 50.0 + CELL * c as f64;
        let _ = writeln!(s, r#"<text x="10" y="{:.1}">{}</text>"#, y + CELL / 2.0, Emotion::ALL[c]);
        for k in 0..NUM_CLASSES {
            let x = 100.0 + CELL * k as f64;
            let v = row_share(r, c, k);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill="firebrick" fill-opacity="{v:.4}" stroke="gray"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">{v:.2}</text>"#,
                x + 20.0,
                y + CELL / 2.0
            );
        }
        if r.row_total(c) == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">no samples</text>"#,
                110.0 + CELL * NUM_CLASSES as f64 - CELL,
                y + CELL - 6.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.txt` and `<stem>.svg`.
pub fn confusion_render(r: &EvalResult, stem: &Path, title: &str) -> Result<(PathBuf, PathBuf)> {
    let txt = stem.with_extension("txt");
    let svg = stem.with_extension("svg");
    fs::write(&txt, confusion_text(r)).map_err(|e| Error::file(&txt, e))?;
    fs::write(&svg, confusion_svg(r, title)).map_err(|e| Error::file(&svg, e))?;
    Ok((txt, svg))
}
