//! Region-sentence pair construction.
//!
//! Each triplet's region is resolved through the ontology. Exact and
//! containment mappings pair the triplet's sentence with that class's box.
//! One-to-many mappings either merge all target boxes into one enclosing crop,
//! or split the sentence into one variant per target by substituting the region
//! term with each subregion term.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{merge_boxes, BBox, ImageDetections};
use crate::ontology::{DetectorClass, MappingResolution, Ontology};
use crate::parsing::{ParsedReport, Sentence, Triplet};

/// How one-to-many regions are turned into pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario3Strategy {
    #[default]
    #[serde(rename = "merge_bbox")]
    MergeBBox,
    SplitSentence,
}

impl std::str::FromStr for Scenario3Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "merge" | "merge_bbox" => Ok(Self::MergeBBox),
            "split" | "split_sentence" => Ok(Self::SplitSentence),
            other => Err(format!(
                "unknown strategy '{other}', expected merge or split"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    Direct,
    MergedBoxes,
    SplitSentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSentencePair {
    pub image_id: String,
    pub crop: BBox,
    pub classes: Vec<DetectorClass>,
    pub sentence_text: String,
    pub sentence_index: usize,
    pub region: String,
    pub strategy: PairStrategy,
}

#[derive(Debug, Serialize, Deserialize)]
struct WirePair {
    image_id: String,
    crop: [f64; 4],
    classes: Vec<String>,
    sentence: String,
    strategy: PairStrategy,
    sentence_index: usize,
    region: String,
}

impl RegionSentencePair {
    pub fn to_json_line(&self) -> String {
        let wire = WirePair {
            image_id: self.image_id.clone(),
            crop: self.crop.as_array(),
            classes: self.classes.iter().map(|c| c.0.clone()).collect(),
            sentence: self.sentence_text.clone(),
            strategy: self.strategy,
            sentence_index: self.sentence_index,
            region: self.region.clone(),
        };
        serde_json::to_string(&wire).expect("pair serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, String> {
        let w: WirePair = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let [x1, y1, x2, y2] = w.crop;
        let crop = BBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
        if w.sentence.is_empty() {
            return Err("empty sentence".into());
        }
        Ok(Self {
            image_id: w.image_id,
            crop,
            classes: w.classes.into_iter().map(DetectorClass).collect(),
            sentence_text: w.sentence,
            sentence_index: w.sentence_index,
            region: w.region,
            strategy: w.strategy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    Unmapped,
    BoxMissing { classes: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTriplet {
    pub image_id: String,
    pub sentence_index: usize,
    pub region: String,
    pub finding: String,
    #[serde(flatten)]
    pub reason: SkipReason,
}

/// A split-sentence triplet that fell back to box merging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFallback {
    pub image_id: String,
    pub sentence_index: usize,
    pub region: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub triplets: usize,
    pub paired: usize,
    pub skipped: usize,
    pub direct: usize,
    pub merged: usize,
    pub split: usize,
    pub duplicates_dropped: usize,
}

impl PairCounts {
    pub fn pairs(&self) -> usize {
        self.direct + self.merged + self.split
    }

    pub fn absorb(&mut self, other: &PairCounts) {
        self.triplets += other.triplets;
        self.paired += other.paired;
        self.skipped += other.skipped;
        self.direct += other.direct;
        self.merged += other.merged;
        self.split += other.split;
        self.duplicates_dropped += other.duplicates_dropped;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairingDiagnostics {
    pub skipped: Vec<SkippedTriplet>,
    pub fallbacks: Vec<SplitFallback>,
    pub counts: PairCounts,
}

impl PairingDiagnostics {
    pub fn absorb(&mut self, other: PairingDiagnostics) {
        self.skipped.extend(other.skipped);
        self.fallbacks.extend(other.fallbacks);
        self.counts.absorb(&other.counts);
    }

    /// Sidecar JSON-lines: one record per skipped triplet, then one per fallback.
    pub fn to_json_lines(&self) -> Vec<String> {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            kind: &'static str,
            #[serde(flatten)]
            record: &'a T,
        }
        let skipped = self.skipped.iter().map(|r| Tagged {
            kind: "skipped",
            record: r,
        });
        let fallbacks = self.fallbacks.iter().map(|r| Tagged {
            kind: "split_fallback",
            record: r,
        });
        skipped
            .map(|t| serde_json::to_string(&t).expect("diagnostic serializes"))
            .chain(fallbacks.map(|t| serde_json::to_string(&t).expect("diagnostic serializes")))
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplitError {
    #[error("region term '{0}' does not occur in the sentence")]
    TermNotFound(String),
    #[error("need at least two subregion terms, got {0}")]
    TooFewSubregions(usize),
}

/// Byte range of the first case-insensitive, word-bounded occurrence of `term`.
fn find_term(text: &str, term: &str) -> Option<(usize, usize)> {
    let term: Vec<char> = term.chars().flat_map(char::to_lowercase).collect();
    if term.is_empty() {
        return None;
    }
    let starts = text.char_indices().map(|(i, _)| i);
    for start in starts {
        if text[..start]
            .chars()
            .next_back()
            .is_some_and(char::is_alphanumeric)
        {
            continue;
        }
        let mut matched = 0;
        let mut end = start;
        for (off, c) in text[start..].char_indices() {
            if matched == term.len() {
                break;
            }
            let mut lower = c.to_lowercase();
            if lower.len() != 1 || lower.next() != Some(term[matched]) {
                break;
            }
            matched += 1;
            end = start + off + c.len_utf8();
        }
        if matched == term.len()
            && !text[end..]
                .chars()
                .next()
                .is_some_and(char::is_alphanumeric)
        {
            return Some((start, end));
        }
    }
    None
}

/// One sentence variant per subregion term, each replacing the first
/// occurrence of `region_term` (case-insensitive, whole words).
pub fn split_sentence(
    sentence_text: &str,
    region_term: &str,
    subregion_terms: &[String],
) -> Result<Vec<String>, SplitError> {
    if subregion_terms.len() < 2 {
        return Err(SplitError::TooFewSubregions(subregion_terms.len()));
    }
    let (start, end) = find_term(sentence_text, region_term)
        .ok_or_else(|| SplitError::TermNotFound(region_term.to_string()))?;
    Ok(subregion_terms
        .iter()
        .map(|sub| {
            format!(
                "{}{}{}",
                &sentence_text[..start],
                sub,
                &sentence_text[end..]
            )
        })
        .collect())
}

/// Builds the region-sentence pairs for one image-report pair.
///
/// `detections` is `None` when the detector produced nothing for this image,
/// in which case every mappable triplet is skipped as `BoxMissing`.
pub fn build_pairs(
    image_id: &str,
    sentences: &[Sentence],
    triplets: &[Triplet],
    detections: Option<&ImageDetections>,
    ontology: &Ontology,
    strategy: Scenario3Strategy,
) -> (Vec<RegionSentencePair>, PairingDiagnostics) {
    let mut pairs = Vec::new();
    let mut diag = PairingDiagnostics::default();
    let mut seen: HashSet<([u64; 4], String)> = HashSet::new();

    for t in triplets {
        diag.counts.triplets += 1;
        let sentence = &sentences[t.source_sentence];
        let skip = |reason| SkippedTriplet {
            image_id: image_id.to_string(),
            sentence_index: t.source_sentence,
            region: t.region.0.clone(),
            finding: t.finding.clone(),
            reason,
        };

        let targets: Vec<DetectorClass> = match ontology.resolve(t.region.as_str()) {
            MappingResolution::Unmapped => {
                diag.skipped.push(skip(SkipReason::Unmapped));
                diag.counts.skipped += 1;
                continue;
            }
            MappingResolution::Exact(c) | MappingResolution::Containment(c) => vec![c],
            MappingResolution::OneToMany { targets, .. } => targets,
        };
        let boxes: Vec<BBox> = targets
            .iter()
            .filter_map(|c| detections.and_then(|d| d.box_for(c)).map(|b| b.bbox))
            .collect();
        if boxes.len() != targets.len() {
            let missing = targets
                .iter()
                .filter(|c| detections.and_then(|d| d.box_for(c)).is_none())
                .map(|c| c.0.clone())
                .collect();
            diag.skipped
                .push(skip(SkipReason::BoxMissing { classes: missing }));
            diag.counts.skipped += 1;
            continue;
        }
        diag.counts.paired += 1;

        let make =
            |crop: BBox, classes: Vec<DetectorClass>, text: String, strategy| RegionSentencePair {
                image_id: image_id.to_string(),
                crop,
                classes,
                sentence_text: text,
                sentence_index: t.source_sentence,
                region: t.region.0.clone(),
                strategy,
            };
        let mut emitted = Vec::new();
        if targets.len() == 1 {
            emitted.push(make(
                boxes[0],
                targets,
                sentence.text.clone(),
                PairStrategy::Direct,
            ));
        } else {
            let variants = match strategy {
                Scenario3Strategy::MergeBBox => None,
                Scenario3Strategy::SplitSentence => {
                    let subs = match ontology.resolve(t.region.as_str()) {
                        MappingResolution::OneToMany {
                            subregion_terms, ..
                        } => subregion_terms,
                        _ => unreachable!("multi-target resolution is one-to-many"),
                    };
                    match split_variants(&sentence.text, t, &subs) {
                        Ok(v) => Some(v),
                        Err(e) => {
                            diag.fallbacks.push(SplitFallback {
                                image_id: image_id.to_string(),
                                sentence_index: t.source_sentence,
                                region: t.region.0.clone(),
                                error: e.to_string(),
                            });
                            None
                        }
                    }
                }
            };
            match variants {
                Some(variants) => {
                    for ((variant, cls), bbox) in variants.into_iter().zip(&targets).zip(&boxes) {
                        emitted.push(make(
                            *bbox,
                            vec![cls.clone()],
                            variant,
                            PairStrategy::SplitSentence,
                        ));
                    }
                }
                None => {
                    let crop = boxes[1..]
                        .iter()
                        .fold(boxes[0], |acc, b| merge_boxes(&acc, b));
                    emitted.push(make(
                        crop,
                        targets,
                        sentence.text.clone(),
                        PairStrategy::MergedBoxes,
                    ));
                }
            }
        }

        for pair in emitted {
            let key = (
                pair.crop.as_array().map(f64::to_bits),
                pair.sentence_text.clone(),
            );
            if !seen.insert(key) {
                diag.counts.duplicates_dropped += 1;
                continue;
            }
            match pair.strategy {
                PairStrategy::Direct => diag.counts.direct += 1,
                PairStrategy::MergedBoxes => diag.counts.merged += 1,
                PairStrategy::SplitSentence => diag.counts.split += 1,
            }
            pairs.push(pair);
        }
    }
    (pairs, diag)
}

/// Tries the canonical region term first, then the surface form the parser matched.
fn split_variants(
    sentence: &str,
    triplet: &Triplet,
    subregion_terms: &[String],
) -> Result<Vec<String>, SplitError> {
    match split_sentence(sentence, triplet.region.as_str(), subregion_terms) {
        Err(SplitError::TermNotFound(term)) => match &triplet.surface {
            Some(surface) if surface != &term => split_sentence(sentence, surface, subregion_terms)
                .map_err(|_| SplitError::TermNotFound(term)),
            _ => Err(SplitError::TermNotFound(term)),
        },
        other => other,
    }
}

/// [`build_pairs`] over a parsed report whose id doubles as the image id.
pub fn build_pairs_for_report(
    report: &ParsedReport,
    detections: Option<&ImageDetections>,
    ontology: &Ontology,
    strategy: Scenario3Strategy,
) -> (Vec<RegionSentencePair>, PairingDiagnostics) {
    build_pairs(
        &report.id,
        &report.sentences,
        &report.triplets,
        detections,
        ontology,
        strategy,
    )
}
