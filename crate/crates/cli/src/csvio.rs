//! CSV encoding for embedding exports and projections.
//!
//! Header: `id,emotion,speaker,e0..e{D-1}`. Ids are quoted RFC-4180 style
//! when they contain commas, quotes, or newlines; numeric columns never
//! need quoting. Floats use Rust's shortest round-trip formatting, so a
//! written file parses back to identical bits.

use ser_core::error::{Error, Result};
use ser_core::eval::PcaProjection;
use ser_core::model::EmbeddingRecord;

fn quote_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Splits one CSV line, honoring quoted fields.
fn split_line(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        if quoted {
            match c {
                '"' if chars.peek() == Some(&'"') => {
                    chars.next();
                    field.push('"');
                }
                '"' => quoted = false,
                other => field.push(other),
            }
        } else {
            match c {
                '"' if field.is_empty() => quoted = true,
                ',' => fields.push(std::mem::take(&mut field)),
                other => field.push(other),
            }
        }
    }
    if quoted {
        return Err(Error::Format("unterminated quoted CSV field".into()));
    }
    fields.push(field);
    Ok(fields)
}

pub fn embeddings_to_csv(records: &[EmbeddingRecord]) -> String {
    let dim = records.first().map(|r| r.embedding.len()).unwrap_or(0);
    let mut out = String::from("id,emotion,speaker");
    for i in 0..dim {
        out.push_str(&format!(",e{}", i));
    }
    out.push('\n');
    for r in records {
        out.push_str(&quote_field(&r.id));
        out.push_str(&format!(",{},{}", r.emotion, r.speaker));
        for v in &r.embedding {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}

pub fn embeddings_from_csv(text: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty embeddings CSV".into()))?;
    let cols = split_line(header)?;
    if cols.len() < 4 || cols[0] != "id" || cols[1] != "emotion" || cols[2] != "speaker" {
        return Err(Error::Format(
            "embeddings CSV must start with id,emotion,speaker,e0..".into(),
        ));
    }
    let dim = cols.len() - 3;
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields = split_line(line)?;
        if fields.len() != dim + 3 {
            return Err(Error::Format(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                dim + 3,
                fields.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("line {}: bad {} '{}'", lineno + 2, what, s)))
        };
        let embedding = fields[3..]
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: bad float '{}'", lineno + 2, s))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(EmbeddingRecord {
            id: fields[0].clone(),
            emotion: parse_usize(&fields[1], "emotion")?,
            speaker: parse_usize(&fields[2], "speaker")?,
            embedding,
        });
    }
    Ok(records)
}

pub fn projection_to_csv(records: &[EmbeddingRecord], projection: &PcaProjection) -> String {
    let k = projection.explained.len();
    let mut out = String::from("id,emotion,speaker");
    for i in 1..=k {
        out.push_str(&format!(",pc{}", i));
    }
    out.push('\n');
    for (r, coords) in records.iter().zip(&projection.coords) {
        out.push_str(&quote_field(&r.id));
        out.push_str(&format!(",{},{}", r.emotion, r.speaker));
        for v in coords {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}
