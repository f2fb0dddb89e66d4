//! File formats: JSON-lines records, the flat binary matrix format and the
//! decoder parameter file.
//!
//! Binary matrix layout (all little-endian):
//!
//! ```text
//! u64 rows | u64 cols | rows * cols f64, row-major
//! ```
//!
//! Decoder parameter layout (little-endian):
//!
//! ```text
//! u64 d | u64 m_q | Wq (d*d) | Wk (d*d) | Wv (d*d) | w_out (d) | b_out | Q (m_q*d)
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecoderParams;
use crate::linalg::Matrix;
use crate::losses::Role;
use crate::ontology::AnaRegion;
use crate::parsing::{Existence, Triplet};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("binary data: {0}")]
    Binary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads one JSON value per non-blank line. Line numbers are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| FormatError::Line {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Joins records into JSON-lines text with a trailing newline.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Joins pre-rendered lines with a trailing newline.
pub fn join_lines(lines: impl IntoIterator<Item = String>) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

/// One triplet as written by `parse`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub sentence_index: usize,
    pub region: String,
    pub finding: String,
    pub existence: Existence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
}

impl TripletRecord {
    pub fn new(id: &str, t: &Triplet) -> Self {
        Self {
            id: id.to_string(),
            sentence_index: t.source_sentence,
            region: t.region.0.clone(),
            finding: t.finding.clone(),
            existence: t.existence,
            surface: t.surface.clone(),
        }
    }

    pub fn to_triplet(&self) -> Triplet {
        Triplet {
            region: AnaRegion::new(self.region.clone()),
            finding: self.finding.clone(),
            existence: self.existence,
            source_sentence: self.sentence_index,
            surface: self.surface.clone(),
        }
    }
}

/// One tag vector as written by `parse`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    pub id: String,
    pub tags: Vec<u8>,
}

/// One embedding row. Rows of a role keep file order; `group` assigns visual
/// tokens to an image index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    pub vector: Vec<f64>,
}

/// Embeddings for one batch, grouped by role.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingBundle {
    pub images: Option<Matrix>,
    pub texts: Option<Matrix>,
    pub regions: Option<Matrix>,
    pub sentences: Option<Matrix>,
    pub tokens: BTreeMap<usize, Matrix>,
}

impl EmbeddingBundle {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self, FormatError> {
        let mut rows: BTreeMap<Role, Vec<Vec<f64>>> = BTreeMap::new();
        let mut tokens: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        let dim = records.first().map(|r| r.vector.len());
        for (i, r) in records.into_iter().enumerate() {
            if Some(r.vector.len()) != dim || r.vector.is_empty() {
                return Err(FormatError::Line {
                    line: i + 1,
                    message: format!("vector length {} differs from {:?}", r.vector.len(), dim),
                });
            }
            if r.vector.iter().any(|x| !x.is_finite()) {
                return Err(FormatError::Line {
                    line: i + 1,
                    message: "non-finite entry".into(),
                });
            }
            match (r.role, r.group) {
                (Role::Token, Some(g)) => tokens.entry(g).or_default().push(r.vector),
                (Role::Token, None) => {
                    return Err(FormatError::Line {
                        line: i + 1,
                        message: "token rows need a group".into(),
                    })
                }
                (role, _) => rows.entry(role).or_default().push(r.vector),
            }
        }
        let mut take = |role| rows.remove(&role).and_then(|r| Matrix::from_rows(&r));
        Ok(Self {
            images: take(Role::Image),
            texts: take(Role::Text),
            regions: take(Role::Region),
            sentences: take(Role::Sentence),
            tokens: tokens
                .into_iter()
                .map(|(g, r)| (g, Matrix::from_rows(&r).expect("equal row lengths")))
                .collect(),
        })
    }

    pub fn to_records(&self) -> Vec<EmbeddingRecord> {
        let mut out = Vec::new();
        let mut push = |m: &Option<Matrix>, role| {
            if let Some(m) = m {
                for i in 0..m.rows() {
                    out.push(EmbeddingRecord {
                        role,
                        group: None,
                        vector: m.row(i).to_vec(),
                    });
                }
            }
        };
        push(&self.images, Role::Image);
        push(&self.texts, Role::Text);
        push(&self.regions, Role::Region);
        push(&self.sentences, Role::Sentence);
        for (&g, m) in &self.tokens {
            for i in 0..m.rows() {
                out.push(EmbeddingRecord {
                    role: Role::Token,
                    group: Some(g),
                    vector: m.row(i).to_vec(),
                });
            }
        }
        out
    }
}

fn read_u64(reader: &mut impl Read) -> Result<u64, FormatError> {
    let mut buf = [0u8; 8];
    reader
        .read_exact(&mut buf)
        .map_err(|e| FormatError::Binary(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s(reader: &mut impl Read, count: usize) -> Result<Vec<f64>, FormatError> {
    let mut bytes = vec![0u8; count * 8];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| FormatError::Binary(format!("expected {count} values: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_f64s(writer: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn ensure_eof(reader: &mut impl Read) -> Result<(), FormatError> {
    let mut extra = [0u8; 1];
    match reader.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(FormatError::Binary("trailing bytes after payload".into())),
    }
}

/// Element counts above this are treated as corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 28;

fn checked_len(a: u64, b: u64) -> Result<usize, FormatError> {
    a.checked_mul(b)
        .filter(|&n| n <= MAX_ELEMENTS)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| FormatError::Binary(format!("implausible size {a}x{b}")))
}

pub fn write_matrix_bin(writer: &mut impl Write, m: &Matrix) -> std::io::Result<()> {
    writer.write_all(&(m.rows() as u64).to_le_bytes())?;
    writer.write_all(&(m.cols() as u64).to_le_bytes())?;
    write_f64s(writer, m.as_slice())
}

pub fn read_matrix_bin(reader: &mut impl Read) -> Result<Matrix, FormatError> {
    let rows = read_u64(reader)?;
    let cols = read_u64(reader)?;
    let len = checked_len(rows, cols)?;
    let data = read_f64s(reader, len)?;
    ensure_eof(reader)?;
    Ok(Matrix::from_vec(rows as usize, cols as usize, data))
}

/// Decoder parameters together with the query embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderFile {
    pub params: DecoderParams,
    pub queries: Matrix,
}

pub fn write_decoder_bin(writer: &mut impl Write, file: &DecoderFile) -> std::io::Result<()> {
    let d = file.params.dim();
    writer.write_all(&(d as u64).to_le_bytes())?;
    writer.write_all(&(file.queries.rows() as u64).to_le_bytes())?;
    write_f64s(writer, &file.params.to_flat())?;
    write_f64s(writer, file.queries.as_slice())
}

pub fn read_decoder_bin(reader: &mut impl Read) -> Result<DecoderFile, FormatError> {
    let d = read_u64(reader)?;
    let m_q = read_u64(reader)?;
    let dd = checked_len(d, d)?;
    let d = d as usize;
    let params = DecoderParams::from_flat(d, &read_f64s(reader, 3 * dd + d + 1)?);
    let q_len = checked_len(m_q, d as u64)?;
    let queries = Matrix::from_vec(m_q as usize, d, read_f64s(reader, q_len)?);
    ensure_eof(reader)?;
    Ok(DecoderFile { params, queries })
}
