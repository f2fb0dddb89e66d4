//! Configuration, command implementations and run reports.
//!
//! Commands are pure functions from inputs to a set of named output files plus
//! a [`RunReport`]. Writing the files is left to the caller so the same code
//! backs the command line, the tests and the browser demo.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checks::{ordered_map, run_checks, CheckPlan, CheckResult};
use crate::geometry::{ingest_detections, DetectionError, ImageDetections};
use crate::io::{
    read_jsonl, to_jsonl, EmbeddingBundle, EmbeddingRecord, FormatError, TagRecord, TripletRecord,
};
use crate::linalg::Matrix;
use crate::losses::{mean_pool, LossBreakdown, LossWeights, DEFAULT_ALPHA, DEFAULT_TAU};
use crate::model::{evaluate, AsgBatch, AsgModel, ModelError, ObjectiveConfig};
use crate::ontology::{Ontology, OntologyError};
use crate::pairing::{
    build_pairs, PairCounts, PairingDiagnostics, RegionSentencePair, Scenario3Strategy, SkipReason,
};
use crate::parsing::{
    parse_report, split_sentences, Lexicon, LexiconError, ParsedReport, Report, TagVector,
};
use crate::synth::{
    stream_rng, synth_detections, synth_embeddings, synth_reports, STREAM_DETECTIONS,
    STREAM_EMBEDDINGS, STREAM_MODEL, STREAM_REPORTS,
};

/// Prefix of the environment variables that override configuration.
pub const ENV_PREFIX: &str = "ASG_";

/// Reports in the synthetic demo corpus.
pub const DEMO_REPORTS: usize = 12;
/// Embedding width used by the demo.
pub const DEMO_DIM: usize = 16;
/// Visual tokens per demo image.
pub const DEMO_TOKENS: usize = 4;
/// Chance that the demo detector misses a class.
pub const DEMO_DROP_RATE: f64 = 0.04;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("cannot read {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("{}: {source}", path.display())]
    Detections {
        path: PathBuf,
        source: DetectionError,
    },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PipelineError {
    /// Stable identifier for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::FileNotFound(_) => "FileNotFound",
            Self::Io { .. } => "Io",
            Self::Config(_) => "InvalidConfig",
            Self::MissingInput(_) => "MissingInput",
            Self::Ontology(_) => "InvalidOntology",
            Self::Lexicon(_) => "InvalidLexicon",
            Self::Detections { .. } => "InvalidDetections",
            Self::Format { .. } => "InvalidFormat",
            Self::Inconsistent(_) => "InconsistentInputs",
            Self::Model(_) => "LossEvaluation",
        }
    }

    /// Every pipeline error is an input validation failure.
    pub fn exit_code(&self) -> i32 {
        1
    }

    /// One-line JSON error record.
    pub fn to_record(&self) -> String {
        let mut rec = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        let path = match self {
            Self::FileNotFound(p)
            | Self::Io { path: p, .. }
            | Self::Detections { path: p, .. }
            | Self::Format { path: p, .. } => Some(p),
            _ => None,
        };
        if let Some(p) = path {
            rec["path"] = serde_json::Value::String(p.display().to_string());
        }
        if let Self::Detections { source, .. } = self {
            rec["line"] = source.line().into();
        }
        if let Self::Format {
            source: FormatError::Line { line, .. },
            ..
        } = self
        {
            rec["line"] = (*line).into();
        }
        rec.to_string()
    }
}

/// Input file locations. Missing entries fall back to the built-in tables or
/// are required by the command that needs them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub ontology: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub tags: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau: f64,
    pub alpha: f64,
    pub strategy: Scenario3Strategy,
    pub weights: LossWeights,
    pub seed: u64,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            strategy: Scenario3Strategy::default(),
            weights: LossWeights::default(),
            seed: 0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a TOML file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let mut cfg = Self::from_toml_str(&read_text(path)?)?;
        if let Some(dir) = path.parent() {
            let p = &mut cfg.paths;
            for slot in [
                &mut p.ontology,
                &mut p.lexicon,
                &mut p.reports,
                &mut p.detections,
                &mut p.embeddings,
                &mut p.triplets,
                &mut p.tags,
                &mut p.pairs,
            ] {
                if let Some(rel) = slot.as_ref().filter(|p| p.is_relative()) {
                    *slot = Some(dir.join(rel));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PipelineError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PipelineError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        let w = &self.weights;
        if [w.ira, w.arsa, w.bce, w.soft]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(PipelineError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            tau: self.tau,
            alpha: self.alpha,
            weights: self.weights,
        }
    }
}

/// Counts of everything that was dropped or degraded along the way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub extraction: usize,
    pub unmapped: usize,
    pub box_missing: usize,
    pub split_fallbacks: usize,
}

impl DiagnosticsSummary {
    fn add_pairing(&mut self, diag: &PairingDiagnostics) {
        for s in &diag.skipped {
            match s.reason {
                SkipReason::Unmapped => self.unmapped += 1,
                SkipReason::BoxMissing { .. } => self.box_missing += 1,
            }
        }
        self.split_fallbacks += diag.fallbacks.len();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_counts: Option<PairCounts>,
    pub diagnostics: DiagnosticsSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arsa_empty: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckResult>,
    /// SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
    /// SHA-256 over all output names and contents.
    pub output_hash: String,
}

impl RunReport {
    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// 0 on success, 2 when any invariant check failed.
    pub fn exit_code(&self) -> i32 {
        if self.checks_passed() {
            0
        } else {
            2
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Named output files of a command, plus its report.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: BTreeMap<String, String>,
    pub report: RunReport,
}

impl CommandOutput {
    /// Writes every file and `report.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, content) in &self.files {
            std::fs::write(dir.join(name), content)?;
        }
        std::fs::write(dir.join("report.json"), self.report.to_json_pretty() + "\n")
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash over file names and contents in name order. Each entry contributes
/// `name`, a zero byte, the content length as little-endian u64 and the content.
pub fn content_hash(files: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, content) in files {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((content.len() as u64).to_le_bytes());
        h.update(content.as_bytes());
    }
    hex::encode(h.finalize())
}

struct ReportBuilder {
    command: &'static str,
    config: RunConfig,
    pair_counts: Option<PairCounts>,
    diagnostics: DiagnosticsSummary,
    loss: Option<LossBreakdown>,
    arsa_empty: Option<bool>,
    checks: Vec<CheckResult>,
}

impl ReportBuilder {
    fn new(command: &'static str, config: &RunConfig) -> Self {
        Self {
            command,
            config: config.clone(),
            pair_counts: None,
            diagnostics: DiagnosticsSummary::default(),
            loss: None,
            arsa_empty: None,
            checks: Vec::new(),
        }
    }

    fn finish(self, files: BTreeMap<String, String>) -> CommandOutput {
        let outputs = files
            .iter()
            .map(|(k, v)| (k.clone(), sha256_hex(v.as_bytes())))
            .collect();
        let report = RunReport {
            command: self.command.to_string(),
            config: self.config,
            pair_counts: self.pair_counts,
            diagnostics: self.diagnostics,
            loss: self.loss,
            arsa_empty: self.arsa_empty,
            checks: self.checks,
            outputs,
            output_hash: content_hash(&files),
        };
        CommandOutput { files, report }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> PipelineError {
    if e.kind() == std::io::ErrorKind::NotFound {
        PipelineError::FileNotFound(path.to_path_buf())
    } else {
        PipelineError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| io_error(path, e))
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    read_jsonl(open(path)?).map_err(|source| PipelineError::Format {
        path: path.to_path_buf(),
        source,
    })
}

fn require<'a>(p: &'a Option<PathBuf>, what: &'static str) -> Result<&'a Path, PipelineError> {
    p.as_deref().ok_or(PipelineError::MissingInput(what))
}

pub fn load_ontology(path: Option<&Path>) -> Result<Ontology, PipelineError> {
    match path {
        None => Ok(Ontology::default_table()),
        Some(p) if !p.exists() => Err(PipelineError::FileNotFound(p.to_path_buf())),
        Some(p) => Ok(Ontology::load(p)?),
    }
}

pub fn load_lexicon(path: Option<&Path>, ontology: &Ontology) -> Result<Lexicon, PipelineError> {
    let lex = match path {
        None => Lexicon::default_lexicon(),
        Some(p) if !p.exists() => return Err(PipelineError::FileNotFound(p.to_path_buf())),
        Some(p) => Lexicon::load(p)?,
    };
    lex.validate_against(ontology)?;
    Ok(lex)
}

pub fn load_reports(path: &Path) -> Result<Vec<Report>, PipelineError> {
    read_records(path)
}

pub fn load_detections(
    path: &Path,
    ontology: &Ontology,
) -> Result<Vec<ImageDetections>, PipelineError> {
    ingest_detections(open(path)?, ontology).map_err(|source| PipelineError::Detections {
        path: path.to_path_buf(),
        source,
    })
}

fn check_unique_ids<'a>(
    ids: impl Iterator<Item = &'a str>,
    what: &str,
) -> Result<(), PipelineError> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(PipelineError::Inconsistent(format!(
                "duplicate {what} id '{id}'"
            )));
        }
    }
    Ok(())
}

/// Parses every report, in input order.
pub fn parse_corpus(reports: &[Report], lexicon: &Lexicon) -> Vec<ParsedReport> {
    ordered_map(reports, |r| parse_report(r, lexicon))
}

fn parse_files(parsed: &[ParsedReport]) -> BTreeMap<String, String> {
    let triplets: Vec<TripletRecord> = parsed
        .iter()
        .flat_map(|p| p.triplets.iter().map(|t| TripletRecord::new(&p.id, t)))
        .collect();
    let tags: Vec<TagRecord> = parsed
        .iter()
        .map(|p| TagRecord {
            id: p.id.clone(),
            tags: p.tags.0.clone(),
        })
        .collect();
    #[derive(Serialize)]
    struct Diag<'a> {
        id: &'a str,
        #[serde(flatten)]
        diag: &'a crate::parsing::ExtractionDiagnostic,
    }
    let diags: Vec<Diag> = parsed
        .iter()
        .flat_map(|p| p.diagnostics.iter().map(|d| Diag { id: &p.id, diag: d }))
        .collect();
    BTreeMap::from([
        ("triplets.jsonl".to_string(), to_jsonl(&triplets)),
        ("tags.jsonl".to_string(), to_jsonl(&tags)),
        ("extraction_diagnostics.jsonl".to_string(), to_jsonl(&diags)),
    ])
}

/// `parse`: reports to triplets and tag vectors.
pub fn cmd_parse(config: &RunConfig) -> Result<CommandOutput, PipelineError> {
    config.validate()?;
    let ontology = load_ontology(config.paths.ontology.as_deref())?;
    let lexicon = load_lexicon(config.paths.lexicon.as_deref(), &ontology)?;
    let reports = load_reports(require(&config.paths.reports, "reports")?)?;
    check_unique_ids(reports.iter().map(|r| r.id.as_str()), "report")?;
    let parsed = parse_corpus(&reports, &lexicon);
    let mut rb = ReportBuilder::new("parse", config);
    rb.diagnostics.extraction = parsed.iter().map(|p| p.diagnostics.len()).sum();
    Ok(rb.finish(parse_files(&parsed)))
}

/// Pairs and merged diagnostics for a parsed corpus. Report ids double as image ids.
pub fn align_corpus(
    parsed: &[ParsedReport],
    detections: &[ImageDetections],
    ontology: &Ontology,
    strategy: Scenario3Strategy,
) -> (Vec<RegionSentencePair>, PairingDiagnostics) {
    let by_id: BTreeMap<&str, &ImageDetections> = detections
        .iter()
        .map(|d| (d.image_id.as_str(), d))
        .collect();
    let per_report = ordered_map(parsed, |p| {
        build_pairs(
            &p.id,
            &p.sentences,
            &p.triplets,
            by_id.get(p.id.as_str()).copied(),
            ontology,
            strategy,
        )
    });
    let mut pairs = Vec::new();
    let mut diag = PairingDiagnostics::default();
    for (p, d) in per_report {
        pairs.extend(p);
        diag.absorb(d);
    }
    (pairs, diag)
}

fn pair_files(pairs: &[RegionSentencePair], diag: &PairingDiagnostics) -> BTreeMap<String, String> {
    let mut pair_text = String::new();
    for p in pairs {
        pair_text.push_str(&p.to_json_line());
        pair_text.push('\n');
    }
    BTreeMap::from([
        ("pairs.jsonl".to_string(), pair_text),
        (
            "pairing_diagnostics.jsonl".to_string(),
            crate::io::join_lines(diag.to_json_lines()),
        ),
    ])
}

/// Rebuilds parsed reports from report texts and a triplets file.
fn reattach_triplets(
    reports: &[Report],
    triplets: Vec<TripletRecord>,
    num_classes: usize,
) -> Result<Vec<ParsedReport>, PipelineError> {
    let mut grouped: BTreeMap<String, Vec<TripletRecord>> = BTreeMap::new();
    for t in triplets {
        grouped.entry(t.id.clone()).or_default().push(t);
    }
    let mut out = Vec::with_capacity(reports.len());
    for r in reports {
        let sentences = split_sentences(&r.text);
        let triplets: Vec<_> = grouped
            .remove(&r.id)
            .unwrap_or_default()
            .iter()
            .map(TripletRecord::to_triplet)
            .collect();
        if let Some(t) = triplets
            .iter()
            .find(|t| t.source_sentence >= sentences.len())
        {
            return Err(PipelineError::Inconsistent(format!(
                "triplet for '{}' points at sentence {} but the report has {}",
                r.id,
                t.source_sentence,
                sentences.len()
            )));
        }
        out.push(ParsedReport {
            id: r.id.clone(),
            sentences,
            triplets,
            tags: TagVector::zeros(num_classes),
            diagnostics: Vec::new(),
        });
    }
    if let Some(id) = grouped.keys().next() {
        return Err(PipelineError::Inconsistent(format!(
            "triplets for unknown report '{id}'"
        )));
    }
    Ok(out)
}

/// `align`: triplets plus detections to region-sentence pairs. Without a
/// triplets file the reports are parsed first.
pub fn cmd_align(config: &RunConfig) -> Result<CommandOutput, PipelineError> {
    config.validate()?;
    let ontology = load_ontology(config.paths.ontology.as_deref())?;
    let reports = load_reports(require(&config.paths.reports, "reports")?)?;
    check_unique_ids(reports.iter().map(|r| r.id.as_str()), "report")?;
    let detections = load_detections(require(&config.paths.detections, "detections")?, &ontology)?;
    let mut rb = ReportBuilder::new("align", config);
    let parsed = match &config.paths.triplets {
        Some(path) => reattach_triplets(&reports, read_records(path)?, 0)?,
        None => {
            let lexicon = load_lexicon(config.paths.lexicon.as_deref(), &ontology)?;
            let parsed = parse_corpus(&reports, &lexicon);
            rb.diagnostics.extraction = parsed.iter().map(|p| p.diagnostics.len()).sum();
            parsed
        }
    };
    let (pairs, diag) = align_corpus(&parsed, &detections, &ontology, config.strategy);
    rb.pair_counts = Some(diag.counts);
    rb.diagnostics.add_pairing(&diag);
    Ok(rb.finish(pair_files(&pairs, &diag)))
}

/// Assembles a loss batch from an embedding bundle and tag vectors.
///
/// Images without visual tokens use their global embedding as a single token;
/// a bundle without global image rows mean-pools the tokens instead.
pub fn batch_from_bundle(
    bundle: EmbeddingBundle,
    tags: Vec<TagVector>,
) -> Result<AsgBatch, PipelineError> {
    let n = tags.len();
    let bad = |m: String| Err(PipelineError::Inconsistent(m));
    if n == 0 {
        return bad("no tag vectors".into());
    }
    if !bundle.tokens.is_empty() && bundle.tokens.keys().copied().ne(0..bundle.tokens.len()) {
        return bad("token groups must be numbered 0..N without gaps".into());
    }
    let images = match (&bundle.images, bundle.tokens.len()) {
        (Some(m), _) => m.clone(),
        (None, k) if k == n => {
            let rows: Vec<Vec<f64>> = bundle.tokens.values().map(mean_pool).collect();
            Matrix::from_rows(&rows).expect("equal widths")
        }
        (None, _) => return bad("need image rows or one token group per image".into()),
    };
    let texts = match bundle.texts {
        Some(t) => t,
        None => return bad("no text embeddings".into()),
    };
    if images.rows() != n || texts.rows() != n {
        return bad(format!(
            "{} image rows and {} text rows for {n} tag vectors",
            images.rows(),
            texts.rows()
        ));
    }
    let d = images.cols();
    let tokens: Vec<Matrix> = if bundle.tokens.is_empty() {
        (0..n)
            .map(|i| Matrix::from_vec(1, d, images.row(i).to_vec()))
            .collect()
    } else if bundle.tokens.len() == n {
        bundle.tokens.into_values().collect()
    } else {
        return bad(format!(
            "{} token groups for {n} images",
            bundle.tokens.len()
        ));
    };
    let (regions, sentences) = match (bundle.regions, bundle.sentences) {
        (Some(r), Some(s)) => (r, s),
        (None, None) => (Matrix::zeros(0, d), Matrix::zeros(0, d)),
        _ => return bad("region and sentence embeddings must come together".into()),
    };
    Ok(AsgBatch {
        images,
        texts,
        regions,
        sentences,
        tokens,
        tags,
    })
}

/// The model every loss evaluation uses for a given seed.
pub fn seeded_model(seed: u64, dim: usize, num_classes: usize) -> AsgModel {
    AsgModel::random(dim, num_classes, &mut stream_rng(seed, STREAM_MODEL))
}

fn loss_file(loss: &LossBreakdown) -> String {
    serde_json::to_string_pretty(loss).expect("loss serializes") + "\n"
}

fn evaluate_into(
    rb: &mut ReportBuilder,
    batch: &AsgBatch,
    config: &RunConfig,
) -> Result<LossBreakdown, PipelineError> {
    let num_classes = batch.tags[0].len();
    if num_classes == 0 || batch.tags.iter().any(|t| t.len() != num_classes) {
        return Err(PipelineError::Inconsistent(
            "tag vectors must share a non-zero length".into(),
        ));
    }
    let model = seeded_model(config.seed, batch.images.cols(), num_classes);
    let eval = evaluate(&model, batch, &config.objective())?;
    rb.loss = Some(eval.loss);
    rb.arsa_empty = Some(eval.arsa_empty);
    Ok(eval.loss)
}

/// `loss-eval`: the four loss terms on precomputed embeddings.
pub fn cmd_loss_eval(config: &RunConfig) -> Result<CommandOutput, PipelineError> {
    config.validate()?;
    let emb_path = require(&config.paths.embeddings, "embeddings")?;
    let records: Vec<EmbeddingRecord> = read_records(emb_path)?;
    let bundle =
        EmbeddingBundle::from_records(records).map_err(|source| PipelineError::Format {
            path: emb_path.to_path_buf(),
            source,
        })?;
    let tag_records: Vec<TagRecord> = read_records(require(&config.paths.tags, "tags")?)?;
    let tags = tag_records.into_iter().map(|r| TagVector(r.tags)).collect();
    let batch = batch_from_bundle(bundle, tags)?;
    let mut rb = ReportBuilder::new("loss-eval", config);
    if let Some(path) = &config.paths.pairs {
        let text = read_text(path)?;
        let mut counts = PairCounts::default();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let pair = RegionSentencePair::from_json_line(line).map_err(|message| {
                PipelineError::Format {
                    path: path.clone(),
                    source: FormatError::Line {
                        line: i + 1,
                        message,
                    },
                }
            })?;
            match pair.strategy {
                crate::pairing::PairStrategy::Direct => counts.direct += 1,
                crate::pairing::PairStrategy::MergedBoxes => counts.merged += 1,
                crate::pairing::PairStrategy::SplitSentence => counts.split += 1,
            }
        }
        if counts.pairs() != batch.regions.rows() {
            return Err(PipelineError::Inconsistent(format!(
                "{} pairs but {} region embeddings",
                counts.pairs(),
                batch.regions.rows()
            )));
        }
        rb.pair_counts = Some(counts);
    }
    let loss = evaluate_into(&mut rb, &batch, config)?;
    Ok(rb.finish(BTreeMap::from([(
        "loss.json".to_string(),
        loss_file(&loss),
    )])))
}

/// `check`: the seeded invariant and gradient suite.
pub fn cmd_check(config: &RunConfig, plan: CheckPlan) -> Result<CommandOutput, PipelineError> {
    config.validate()?;
    let mut rb = ReportBuilder::new("check", config);
    rb.checks = run_checks(config.seed, config.tau, config.alpha, plan);
    let lines = rb
        .checks
        .iter()
        .map(|c| serde_json::to_string(c).expect("check serializes"));
    let text = crate::io::join_lines(lines);
    Ok(rb.finish(BTreeMap::from([("checks.jsonl".to_string(), text)])))
}

/// `demo`: synthetic reports, detections and embeddings through parse, align
/// and loss evaluation.
pub fn cmd_demo(config: &RunConfig) -> Result<CommandOutput, PipelineError> {
    config.validate()?;
    let seed = config.seed;
    let ontology = Ontology::default_table();
    let lexicon = Lexicon::default_lexicon();
    let mut rb = ReportBuilder::new("demo", config);

    let reports = synth_reports(DEMO_REPORTS, &mut stream_rng(seed, STREAM_REPORTS));
    let parsed = parse_corpus(&reports, &lexicon);
    rb.diagnostics.extraction = parsed.iter().map(|p| p.diagnostics.len()).sum();

    let ids: Vec<String> = reports.iter().map(|r| r.id.clone()).collect();
    let raw = synth_detections(
        &ids,
        DEMO_DROP_RATE,
        &mut stream_rng(seed, STREAM_DETECTIONS),
    );
    let det_text: String = raw.iter().map(|d| d.to_json_line() + "\n").collect();
    // Read back through the validating ingester, as a file from a detector would be.
    let detections = ingest_detections(det_text.as_bytes(), &ontology).map_err(|source| {
        PipelineError::Detections {
            path: PathBuf::from("detections.jsonl"),
            source,
        }
    })?;

    let (pairs, diag) = align_corpus(&parsed, &detections, &ontology, config.strategy);
    rb.pair_counts = Some(diag.counts);
    rb.diagnostics.add_pairing(&diag);

    let bundle = synth_embeddings(
        reports.len(),
        pairs.len(),
        DEMO_DIM,
        DEMO_TOKENS,
        &mut stream_rng(seed, STREAM_EMBEDDINGS),
    );
    let emb_text = to_jsonl(&bundle.to_records());
    let tags = parsed.iter().map(|p| p.tags.clone()).collect();
    let batch = batch_from_bundle(bundle, tags)?;
    let loss = evaluate_into(&mut rb, &batch, config)?;

    let mut files = parse_files(&parsed);
    files.extend(pair_files(&pairs, &diag));
    files.insert("reports.jsonl".into(), to_jsonl(&reports));
    files.insert("detections.jsonl".into(), det_text);
    files.insert("embeddings.jsonl".into(), emb_text);
    files.insert("loss.json".into(), loss_file(&loss));
    Ok(rb.finish(files))
}

/// `validate-ontology`: loads the ontology (and lexicon, if given) and writes
/// the canonical form of the table.
pub fn cmd_validate_ontology(config: &RunConfig) -> Result<CommandOutput, PipelineError> {
    let ontology = load_ontology(config.paths.ontology.as_deref())?;
    load_lexicon(config.paths.lexicon.as_deref(), &ontology)?;
    let rb = ReportBuilder::new("validate-ontology", config);
    Ok(rb.finish(BTreeMap::from([(
        "ontology.toml".to_string(),
        ontology.to_canonical_toml(),
    )])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(RunConfig::from_toml_str("tau = 0.0").is_err());
        assert!(RunConfig::from_toml_str("alpha = 1.5").is_err());
        assert!(RunConfig::from_toml_str(
            "weights = { ira = -1.0, arsa = 1.0, bce = 1.0, soft = 1.0 }"
        )
        .is_err());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        let cfg = RunConfig::from_toml_str("strategy = \"split_sentence\"\nseed = 9").unwrap();
        assert_eq!(cfg.strategy, Scenario3Strategy::SplitSentence);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn hash_depends_on_names_and_contents() {
        let a = BTreeMap::from([("a".to_string(), "xy".to_string())]);
        let b = BTreeMap::from([("ax".to_string(), "y".to_string())]);
        let c = BTreeMap::from([("a".to_string(), "xz".to_string())]);
        assert_ne!(content_hash(&a), content_hash(&b));
        assert_ne!(content_hash(&a), content_hash(&c));
        assert_eq!(content_hash(&a), content_hash(&a.clone()));
    }

    #[test]
    fn demo_is_deterministic_and_small() {
        let cfg = RunConfig::default();
        let a = cmd_demo(&cfg).unwrap();
        let b = cmd_demo(&cfg).unwrap();
        assert_eq!(a, b);
        let counts = a.report.pair_counts.unwrap();
        assert!(counts.pairs() > 0 && counts.pairs() <= 100, "{counts:?}");
        assert!(a.report.loss.unwrap().total.is_finite());
    }

    #[test]
    fn demo_seed_changes_outputs() {
        let a = cmd_demo(&RunConfig::default()).unwrap();
        let b = cmd_demo(&RunConfig {
            seed: 1,
            ..RunConfig::default()
        })
        .unwrap();
        assert_ne!(a.report.output_hash, b.report.output_hash);
    }

    #[test]
    fn split_demo_never_has_fewer_pairs() {
        let merge = cmd_demo(&RunConfig::default()).unwrap();
        let split = cmd_demo(&RunConfig {
            strategy: Scenario3Strategy::SplitSentence,
            ..RunConfig::default()
        })
        .unwrap();
        let (m, s) = (
            merge.report.pair_counts.unwrap(),
            split.report.pair_counts.unwrap(),
        );
        assert_eq!(m.triplets, s.triplets);
        assert!(s.pairs() >= m.pairs());
    }

    #[test]
    fn missing_reports_path_is_reported() {
        let err = cmd_parse(&RunConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "MissingInput");
        let mut cfg = RunConfig::default();
        cfg.paths.reports = Some("/nonexistent/reports.jsonl".into());
        let err = cmd_parse(&cfg).unwrap_err();
        assert_eq!(err.kind(), "FileNotFound");
        assert!(err.to_record().contains("\"path\""));
    }

    #[test]
    fn tokens_fall_back_to_image_rows() {
        let bundle = EmbeddingBundle {
            images: Some(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0])),
            texts: Some(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0])),
            ..EmbeddingBundle::default()
        };
        let batch =
            batch_from_bundle(bundle, vec![TagVector(vec![1]), TagVector(vec![0])]).unwrap();
        assert_eq!(batch.tokens[1].row(0), &[0.0, 1.0]);
        assert_eq!(batch.regions.shape(), (0, 2));
    }
}
