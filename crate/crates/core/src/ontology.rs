//! Anatomical vocabularies and the report-region to detector-class mapping.
//!
//! `C_ana` holds the region terms that appear in parsed report triplets,
//! `C_pre` holds the classes an anatomical detector emits boxes for. Every
//! report region is linked to detector classes through a curated rule that is
//! one of three kinds:
//!
//! * `Exact`: the same region under the same or an equivalent name
//!   (`right hilar` -> `right hilar structures`).
//! * `Containment`: a detector class that encloses the region
//!   (`right ventricle` -> `cardiac silhouette`).
//! * `OneToMany`: the region spans several detector classes
//!   (`diaphragm unspec` -> `left diaphragm`, `right diaphragm`). These rules
//!   also carry one lexical substitute per target for sentence splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Required size of the report-side vocabulary.
pub const C_ANA_SIZE: usize = 50;
/// Required size of the detector class set.
pub const C_PRE_SIZE: usize = 29;

const DEFAULT_TABLE: &str = include_str!("../data/ontology.toml");

/// A report-side anatomical region term.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnaRegion(pub String);

/// A detector-side anatomical class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectorClass(pub String);

impl AnaRegion {
    pub fn new(term: impl Into<String>) -> Self {
        Self(term.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl DetectorClass {
    pub fn new(term: impl Into<String>) -> Self {
        Self(term.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AnaRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DetectorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    Exact,
    Containment,
    OneToMany,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingRule {
    pub source: AnaRegion,
    pub kind: MappingKind,
    pub targets: Vec<DetectorClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subregion_terms: Option<Vec<String>>,
}

/// Outcome of looking up a region term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum MappingResolution {
    Exact(DetectorClass),
    Containment(DetectorClass),
    OneToMany {
        targets: Vec<DetectorClass>,
        subregion_terms: Vec<String>,
    },
    Unmapped,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OntologyError {
    #[error("failed to read ontology file {path}: {message}")]
    Io { path: String, message: String },
    #[error("failed to parse ontology table: {0}")]
    Parse(String),
    #[error("{set} has {found} distinct terms, expected {expected}")]
    SizeMismatch {
        set: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("term '{0}' is listed more than once")]
    DuplicateTerm(String),
    #[error("rule for '{rule}' targets unknown detector class '{target}'")]
    DanglingTarget { rule: String, target: String },
    #[error("rule source '{0}' is not a C_ana term")]
    DanglingSource(String),
    #[error("more than one rule for '{0}'")]
    DuplicateRule(String),
    #[error("malformed rule for '{rule}': {reason}")]
    MalformedRule { rule: String, reason: String },
    #[error("term '{0}' is not lowercase and whitespace-normalized")]
    NonCanonicalTerm(String),
}

/// On-disk layout. Sections `[c_ana]`, `[c_pre]` and an array of `[[rules]]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct OntologyFile {
    c_ana: TermSection,
    c_pre: ClassSection,
    #[serde(default)]
    rules: Vec<MappingRule>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TermSection {
    terms: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassSection {
    classes: Vec<String>,
}

/// A validated ontology. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    c_ana: BTreeSet<AnaRegion>,
    c_pre: BTreeSet<DetectorClass>,
    rules: BTreeMap<AnaRegion, MappingRule>,
}

pub(crate) fn is_canonical_term(s: &str) -> bool {
    !s.is_empty()
        && s.split(' ').all(|w| !w.is_empty())
        && !s
            .chars()
            .any(|c| c.is_uppercase() || (c.is_whitespace() && c != ' '))
}

impl Ontology {
    /// The table shipped with the crate.
    pub fn default_table() -> Self {
        Self::from_toml_str(DEFAULT_TABLE).expect("bundled ontology table is valid")
    }

    /// Loads a TOML or JSON table; the format is chosen by extension
    /// (`.json`, anything else is read as TOML).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OntologyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| OntologyError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, OntologyError> {
        let file: OntologyFile =
            toml::from_str(text).map_err(|e| OntologyError::Parse(e.to_string()))?;
        Self::from_parts(file.c_ana.terms, file.c_pre.classes, file.rules)
    }

    pub fn from_json_str(text: &str) -> Result<Self, OntologyError> {
        let file: OntologyFile =
            serde_json::from_str(text).map_err(|e| OntologyError::Parse(e.to_string()))?;
        Self::from_parts(file.c_ana.terms, file.c_pre.classes, file.rules)
    }

    /// Validates raw parts into an ontology.
    pub fn from_parts(
        c_ana: Vec<String>,
        c_pre: Vec<String>,
        rules: Vec<MappingRule>,
    ) -> Result<Self, OntologyError> {
        let c_ana = collect_terms(c_ana, "c_ana", C_ANA_SIZE, AnaRegion)?;
        let c_pre = collect_terms(c_pre, "c_pre", C_PRE_SIZE, DetectorClass)?;

        let mut by_source = BTreeMap::new();
        for rule in rules {
            validate_rule(&rule, &c_ana, &c_pre)?;
            if by_source.contains_key(&rule.source) {
                return Err(OntologyError::DuplicateRule(rule.source.0));
            }
            by_source.insert(rule.source.clone(), rule);
        }
        Ok(Self {
            c_ana,
            c_pre,
            rules: by_source,
        })
    }

    pub fn c_ana(&self) -> &BTreeSet<AnaRegion> {
        &self.c_ana
    }

    pub fn c_pre(&self) -> &BTreeSet<DetectorClass> {
        &self.c_pre
    }

    pub fn rules(&self) -> impl Iterator<Item = &MappingRule> {
        self.rules.values()
    }

    pub fn contains_region(&self, term: &str) -> bool {
        self.c_ana.contains(&AnaRegion::new(term))
    }

    pub fn contains_class(&self, term: &str) -> bool {
        self.c_pre.contains(&DetectorClass::new(term))
    }

    /// Looks up the mapping for a region term. Unknown terms and terms without
    /// a rule resolve to [`MappingResolution::Unmapped`].
    pub fn resolve(&self, region: &str) -> MappingResolution {
        let Some(rule) = self.rules.get(&AnaRegion::new(region)) else {
            return MappingResolution::Unmapped;
        };
        match rule.kind {
            MappingKind::Exact => MappingResolution::Exact(rule.targets[0].clone()),
            MappingKind::Containment => MappingResolution::Containment(rule.targets[0].clone()),
            MappingKind::OneToMany => MappingResolution::OneToMany {
                targets: rule.targets.clone(),
                subregion_terms: rule.subregion_terms.clone().unwrap_or_default(),
            },
        }
    }

    /// Canonical TOML form: terms and rules sorted, fixed key order.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("ontology serializes to TOML")
    }

    /// Canonical JSON form, pretty-printed with the same ordering as the TOML form.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("ontology serializes to JSON")
    }

    fn to_file(&self) -> OntologyFile {
        OntologyFile {
            c_ana: TermSection {
                terms: self.c_ana.iter().map(|t| t.0.clone()).collect(),
            },
            c_pre: ClassSection {
                classes: self.c_pre.iter().map(|t| t.0.clone()).collect(),
            },
            rules: self.rules.values().cloned().collect(),
        }
    }
}

fn collect_terms<T: Ord>(
    raw: Vec<String>,
    set: &'static str,
    expected: usize,
    wrap: fn(String) -> T,
) -> Result<BTreeSet<T>, OntologyError> {
    let mut seen = BTreeSet::new();
    for term in &raw {
        if !is_canonical_term(term) {
            return Err(OntologyError::NonCanonicalTerm(term.clone()));
        }
        if !seen.insert(term.as_str()) {
            return Err(OntologyError::DuplicateTerm(term.clone()));
        }
    }
    if seen.len() != expected {
        return Err(OntologyError::SizeMismatch {
            set,
            expected,
            found: seen.len(),
        });
    }
    Ok(raw.into_iter().map(wrap).collect())
}

fn validate_rule(
    rule: &MappingRule,
    c_ana: &BTreeSet<AnaRegion>,
    c_pre: &BTreeSet<DetectorClass>,
) -> Result<(), OntologyError> {
    let source = rule.source.0.clone();
    if !c_ana.contains(&rule.source) {
        return Err(OntologyError::DanglingSource(source));
    }
    if let Some(target) = rule.targets.iter().find(|t| !c_pre.contains(*t)) {
        return Err(OntologyError::DanglingTarget {
            rule: source,
            target: target.0.clone(),
        });
    }
    let malformed = |reason: String| OntologyError::MalformedRule {
        rule: rule.source.0.clone(),
        reason,
    };
    let distinct: BTreeSet<_> = rule.targets.iter().collect();
    if distinct.len() != rule.targets.len() {
        return Err(malformed("repeated target".into()));
    }
    match rule.kind {
        MappingKind::Exact | MappingKind::Containment => {
            if rule.targets.len() != 1 {
                return Err(malformed(format!(
                    "{:?} rules need exactly one target, found {}",
                    rule.kind,
                    rule.targets.len()
                )));
            }
            if rule.subregion_terms.is_some() {
                return Err(malformed(
                    "subregion_terms only apply to one_to_many".into(),
                ));
            }
        }
        MappingKind::OneToMany => {
            if rule.targets.len() < 2 {
                return Err(malformed(format!(
                    "one_to_many needs at least two targets, found {}",
                    rule.targets.len()
                )));
            }
            let subs = rule
                .subregion_terms
                .as_ref()
                .ok_or_else(|| malformed("one_to_many requires subregion_terms".into()))?;
            if subs.len() != rule.targets.len() {
                return Err(malformed(format!(
                    "{} subregion_terms for {} targets",
                    subs.len(),
                    rule.targets.len()
                )));
            }
            if let Some(bad) = subs.iter().find(|s| !is_canonical_term(s)) {
                return Err(OntologyError::NonCanonicalTerm(bad.clone()));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(s: &str) -> DetectorClass {
        DetectorClass::new(s)
    }

    #[test]
    fn default_table_has_expected_sizes() {
        let ont = Ontology::default_table();
        assert_eq!(ont.c_ana().len(), 50);
        assert_eq!(ont.c_pre().len(), 29);
    }

    #[test]
    fn published_scenarios_resolve() {
        let ont = Ontology::default_table();
        assert_eq!(
            ont.resolve("right hilar"),
            MappingResolution::Exact(class("right hilar structures"))
        );
        assert_eq!(
            ont.resolve("right ventricle"),
            MappingResolution::Containment(class("cardiac silhouette"))
        );
        assert_eq!(
            ont.resolve("diaphragm unspec"),
            MappingResolution::OneToMany {
                targets: vec![class("left diaphragm"), class("right diaphragm")],
                subregion_terms: vec!["left diaphragm".into(), "right diaphragm".into()],
            }
        );
        assert_eq!(ont.resolve("mediastinum xyz"), MappingResolution::Unmapped);
        assert_eq!(ont.resolve("rib"), MappingResolution::Unmapped);
    }

    fn default_file() -> OntologyFile {
        toml::from_str(DEFAULT_TABLE).unwrap()
    }

    fn rebuild(f: OntologyFile) -> Result<Ontology, OntologyError> {
        Ontology::from_parts(f.c_ana.terms, f.c_pre.classes, f.rules)
    }

    #[test]
    fn dangling_target_is_rejected() {
        let mut f = default_file();
        f.rules[0].targets = vec![class("kidney")];
        let err = rebuild(f).unwrap_err();
        assert!(
            matches!(err, OntologyError::DanglingTarget { ref target, .. } if target == "kidney")
        );
    }

    #[test]
    fn duplicate_rule_is_rejected() {
        let mut f = default_file();
        let rule = f
            .rules
            .iter()
            .find(|r| r.source.0 == "left lung unspec")
            .cloned()
            .unwrap();
        f.rules.push(rule);
        assert_eq!(
            rebuild(f).unwrap_err(),
            OntologyError::DuplicateRule("left lung unspec".into())
        );
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut f = default_file();
        f.c_pre.classes.push("kidney".into());
        assert_eq!(
            rebuild(f).unwrap_err(),
            OntologyError::SizeMismatch {
                set: "c_pre",
                expected: 29,
                found: 30
            }
        );
    }

    #[test]
    fn one_to_many_needs_matching_subregions() {
        let mut f = default_file();
        let rule = f
            .rules
            .iter_mut()
            .find(|r| r.kind == MappingKind::OneToMany)
            .unwrap();
        rule.subregion_terms.as_mut().unwrap().pop();
        assert!(matches!(
            rebuild(f).unwrap_err(),
            OntologyError::MalformedRule { .. }
        ));
    }

    #[test]
    fn exact_rule_with_two_targets_is_malformed() {
        let mut f = default_file();
        let rule = f
            .rules
            .iter_mut()
            .find(|r| r.kind == MappingKind::Exact)
            .unwrap();
        rule.targets.push(class("spine"));
        assert!(matches!(
            rebuild(f).unwrap_err(),
            OntologyError::MalformedRule { .. }
        ));
    }

    #[test]
    fn canonical_serialization_round_trips() {
        let ont = Ontology::default_table();
        let canon = ont.to_canonical_toml();
        let back = Ontology::from_toml_str(&canon).unwrap();
        assert_eq!(back, ont);
        assert_eq!(back.to_canonical_toml(), canon);
        let json = ont.to_canonical_json();
        assert_eq!(Ontology::from_json_str(&json).unwrap(), ont);
    }

    #[test]
    fn non_canonical_terms_are_rejected() {
        let mut f = default_file();
        f.c_ana.terms[0] = "Trachea".into();
        assert_eq!(
            rebuild(f).unwrap_err(),
            OntologyError::NonCanonicalTerm("Trachea".into())
        );
    }
}
