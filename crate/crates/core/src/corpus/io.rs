use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::Formatter;

use super::record::{Corpus, UtteranceRecord};
use crate::error::{Error, Result};

/// Writes every float with 17 significant digits so values round-trip exactly.
#[derive(Clone, Copy, Default)]
pub struct ExactFloats;

impl Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{:.16e}", value as f64)
    }
}

/// Serializes `value` as one compact JSON line with exact floats.
pub fn to_exact_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Contract(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    for r in &corpus.records {
        writeln!(w, "{}", to_exact_json(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    write_corpus(corpus, BufWriter::new(f)).map_err(|e| match e {
        Error::Io(io) => Error::file(path, io),
        other => other,
    })
}

/// Field name quoted in a serde error message, if any.
fn field_of(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("?").to_string()
}

fn parse_line(line: &str, lineno: usize) -> Result<UtteranceRecord> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Load {
        record: format!("line {lineno}"),
        field: "?".into(),
        detail: e.to_string(),
    })?;
    let id = value
        .get("id")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| format!("line {lineno}"));
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        Error::Load {
            record: id,
            field: field_of(&msg),
            detail: msg,
        }
    })
}

/// Reads one JSON record per non-blank line and validates the result.
pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus> {
    let mut records = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, k + 1)?);
    }
    if records.is_empty() {
        log::warn!("corpus is empty");
    }
    Corpus::new(records)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    read_corpus(BufReader::new(f))
}
