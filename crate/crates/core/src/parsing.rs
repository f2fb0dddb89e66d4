//! Lexicon-driven report parsing: sentence splitting, triplet extraction and
//! disease tag vectors.
//!
//! The extractor scans lowercase word tokens with a longest-match lookup over
//! three surface-form tables (regions, findings, negation cues). Each finding
//! mention is paired with the nearest region mention in the same sentence
//! (smallest token distance, earlier mention on ties) or with the finding's
//! default region. A finding is `Absent` when any negation cue occurs before it
//! in the sentence. Hedged findings ("possible effusion") stay `Exist`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{is_canonical_term, AnaRegion, Ontology};

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    /// Byte offsets `[start, end)` into the report text.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Existence {
    Exist,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub region: AnaRegion,
    pub finding: String,
    pub existence: Existence,
    pub source_sentence: usize,
    /// Surface text of the region mention, `None` when the default region was used.
    pub surface: Option<String>,
}

/// Binary disease-presence vector, one entry per configured disease class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagVector(pub Vec<u8>);

impl TagVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionDiagnostic {
    pub sentence_index: usize,
    pub finding: String,
    pub reason: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexiconError {
    #[error("failed to read lexicon file {path}: {message}")]
    Io { path: String, message: String },
    #[error("failed to parse lexicon: {0}")]
    Parse(String),
    #[error("surface form '{0}' is not lowercase and whitespace-normalized")]
    NonCanonicalSurface(String),
    #[error("surface form '{0}' appears in more than one table")]
    AmbiguousSurface(String),
    #[error("finding '{finding}' (surface '{surface}') is not a configured disease class")]
    UnknownFinding { surface: String, finding: String },
    #[error("disease class '{0}' is listed twice")]
    DuplicateClass(String),
    #[error("region '{region}' (surface '{surface}') is not in the ontology's C_ana")]
    UnknownRegion { surface: String, region: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LexiconFile {
    disease_classes: Vec<String>,
    #[serde(default)]
    negation_cues: Vec<String>,
    #[serde(default)]
    regions: BTreeMap<String, String>,
    #[serde(default)]
    findings: BTreeMap<String, String>,
    #[serde(default)]
    default_regions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    Region,
    Finding,
    Negation,
}

/// Surface-form tables plus the disease-class list that fixes tag layout.
#[derive(Debug, Clone)]
pub struct Lexicon {
    disease_classes: Vec<String>,
    region_terms: BTreeMap<String, AnaRegion>,
    finding_terms: BTreeMap<String, String>,
    negation_cues: Vec<String>,
    default_region: BTreeMap<String, AnaRegion>,
    entries: HashMap<String, Entry>,
    max_phrase_tokens: usize,
}

impl Lexicon {
    /// The lexicon bundled with the crate.
    pub fn default_lexicon() -> Self {
        Self::from_toml_str(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    /// Loads a TOML (or `.json`) lexicon document.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LexiconError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            let file =
                serde_json::from_str(&text).map_err(|e| LexiconError::Parse(e.to_string()))?;
            Self::from_file(file)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, LexiconError> {
        let file = toml::from_str(text).map_err(|e| LexiconError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    fn from_file(file: LexiconFile) -> Result<Self, LexiconError> {
        let mut classes = Vec::with_capacity(file.disease_classes.len());
        for c in file.disease_classes {
            if classes.contains(&c) {
                return Err(LexiconError::DuplicateClass(c));
            }
            classes.push(c);
        }

        let mut entries = HashMap::new();
        let mut insert = |surface: &str, entry: Entry| -> Result<(), LexiconError> {
            if !is_canonical_term(surface) {
                return Err(LexiconError::NonCanonicalSurface(surface.to_string()));
            }
            if entries.insert(surface.to_string(), entry).is_some() {
                return Err(LexiconError::AmbiguousSurface(surface.to_string()));
            }
            Ok(())
        };
        for surface in file.regions.keys() {
            insert(surface, Entry::Region)?;
        }
        for (surface, finding) in &file.findings {
            insert(surface, Entry::Finding)?;
            if !classes.contains(finding) {
                return Err(LexiconError::UnknownFinding {
                    surface: surface.clone(),
                    finding: finding.clone(),
                });
            }
        }
        for cue in &file.negation_cues {
            insert(cue, Entry::Negation)?;
        }
        for finding in file.default_regions.keys() {
            if !classes.contains(finding) {
                return Err(LexiconError::UnknownFinding {
                    surface: finding.clone(),
                    finding: finding.clone(),
                });
            }
        }
        let max_phrase_tokens = entries
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(1);

        Ok(Self {
            disease_classes: classes,
            region_terms: file
                .regions
                .into_iter()
                .map(|(k, v)| (k, AnaRegion(v)))
                .collect(),
            finding_terms: file.findings,
            negation_cues: file.negation_cues,
            default_region: file
                .default_regions
                .into_iter()
                .map(|(k, v)| (k, AnaRegion(v)))
                .collect(),
            entries,
            max_phrase_tokens,
        })
    }

    /// Checks that every region the lexicon can emit exists in `C_ana`.
    pub fn validate_against(&self, ontology: &Ontology) -> Result<(), LexiconError> {
        let surfaces = self.region_terms.iter().chain(self.default_region.iter());
        for (surface, region) in surfaces {
            if !ontology.contains_region(region.as_str()) {
                return Err(LexiconError::UnknownRegion {
                    surface: surface.clone(),
                    region: region.0.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn disease_classes(&self) -> &[String] {
        &self.disease_classes
    }

    pub fn negation_cues(&self) -> &[String] {
        &self.negation_cues
    }

    pub fn region_terms(&self) -> &BTreeMap<String, AnaRegion> {
        &self.region_terms
    }

    pub fn finding_terms(&self) -> &BTreeMap<String, String> {
        &self.finding_terms
    }
}

/// Splits report text on `.`, `!` or `?` followed by whitespace or end of text.
/// Whitespace-only fragments are dropped; spans exclude surrounding whitespace.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let boundary = matches!(c, '.' | '!' | '?')
            && iter.peek().is_none_or(|&(_, next)| next.is_whitespace());
        if boundary {
            push_fragment(text, start, i + c.len_utf8(), &mut out);
            start = i + c.len_utf8();
        }
    }
    push_fragment(text, start, text.len(), &mut out);
    out
}

fn push_fragment(text: &str, start: usize, end: usize, out: &mut Vec<Sentence>) {
    let fragment = &text[start..end];
    let lead = fragment.len() - fragment.trim_start().len();
    let trimmed = fragment.trim();
    if trimmed.is_empty() {
        return;
    }
    let s = start + lead;
    out.push(Sentence {
        index: out.len(),
        text: trimmed.to_string(),
        span: (s, s + trimmed.len()),
    });
}

/// Lowercase alphanumeric word tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
struct Mention {
    entry: Entry,
    surface: String,
    token: usize,
}

fn scan_mentions(tokens: &[String], lexicon: &Lexicon) -> Vec<Mention> {
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = lexicon.max_phrase_tokens.min(tokens.len() - i);
        let hit = (1..=longest).rev().find_map(|len| {
            let phrase = tokens[i..i + len].join(" ");
            lexicon.entries.get(&phrase).map(|&e| (e, phrase, len))
        });
        match hit {
            Some((entry, surface, len)) => {
                mentions.push(Mention {
                    entry,
                    surface,
                    token: i,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    mentions
}

/// Extracts `<region, finding, existence>` triplets from one sentence.
///
/// Findings that have neither a region mention nor a default region produce a
/// diagnostic instead of a triplet. At most one triplet is emitted per
/// `(region, finding)` pair; the first occurrence wins.
pub fn extract_triplets(
    sentence: &Sentence,
    lexicon: &Lexicon,
) -> (Vec<Triplet>, Vec<ExtractionDiagnostic>) {
    let tokens = tokenize(&sentence.text);
    let mentions = scan_mentions(&tokens, lexicon);
    let regions: Vec<&Mention> = mentions
        .iter()
        .filter(|m| m.entry == Entry::Region)
        .collect();

    let mut triplets: Vec<Triplet> = Vec::new();
    let mut diagnostics = Vec::new();
    for finding in mentions.iter().filter(|m| m.entry == Entry::Finding) {
        let tag = lexicon.finding_terms[&finding.surface].clone();
        let nearest = regions
            .iter()
            .min_by_key(|r| (r.token.abs_diff(finding.token), r.token));
        let (region, surface) = match nearest {
            Some(r) => (
                lexicon.region_terms[&r.surface].clone(),
                Some(r.surface.clone()),
            ),
            None => match lexicon.default_region.get(&tag) {
                Some(region) => (region.clone(), None),
                None => {
                    diagnostics.push(ExtractionDiagnostic {
                        sentence_index: sentence.index,
                        finding: tag,
                        reason: "no region mention and no default region".into(),
                    });
                    continue;
                }
            },
        };
        let negated = mentions
            .iter()
            .any(|m| m.entry == Entry::Negation && m.token < finding.token);
        let existence = if negated {
            Existence::Absent
        } else {
            Existence::Exist
        };
        if triplets
            .iter()
            .any(|t| t.region == region && t.finding == tag)
        {
            continue;
        }
        triplets.push(Triplet {
            region,
            finding: tag,
            existence,
            source_sentence: sentence.index,
            surface,
        });
    }
    (triplets, diagnostics)
}

/// Bit `j` is set iff some triplet reports `classes[j]` with `Exist`.
/// Findings outside `classes` are ignored.
pub fn tags_from_triplets(triplets: &[Triplet], classes: &[String]) -> TagVector {
    let mut bits = vec![0u8; classes.len()];
    for t in triplets.iter().filter(|t| t.existence == Existence::Exist) {
        if let Some(j) = classes.iter().position(|c| *c == t.finding) {
            bits[j] = 1;
        }
    }
    TagVector(bits)
}

/// A report after sentence splitting and extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParsedReport {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub triplets: Vec<Triplet>,
    pub tags: TagVector,
    pub diagnostics: Vec<ExtractionDiagnostic>,
}

pub fn parse_report(report: &Report, lexicon: &Lexicon) -> ParsedReport {
    let sentences = split_sentences(&report.text);
    let mut triplets = Vec::new();
    let mut diagnostics = Vec::new();
    for s in &sentences {
        let (t, d) = extract_triplets(s, lexicon);
        triplets.extend(t);
        diagnostics.extend(d);
    }
    let tags = tags_from_triplets(&triplets, lexicon.disease_classes());
    ParsedReport {
        id: report.id.clone(),
        sentences,
        triplets,
        tags,
        diagnostics,
    }
}
