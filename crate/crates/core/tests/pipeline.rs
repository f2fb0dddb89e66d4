use std::path::Path;

use asg_core::io::{to_jsonl, EmbeddingBundle, TagRecord};
use asg_core::pipeline::{cmd_align, cmd_loss_eval, cmd_parse, RunConfig};
use asg_core::Matrix;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn loss_eval(dir: &Path, bundle: &EmbeddingBundle, tags: &[Vec<u8>], alpha: f64) -> RunConfig {
    let tag_records: Vec<TagRecord> = tags
        .iter()
        .enumerate()
        .map(|(i, t)| TagRecord {
            id: format!("r{i}"),
            tags: t.clone(),
        })
        .collect();
    let mut cfg = RunConfig {
        alpha,
        ..RunConfig::default()
    };
    cfg.paths.embeddings = Some(write(dir, "emb.jsonl", &to_jsonl(&bundle.to_records())));
    cfg.paths.tags = Some(write(dir, "tags.jsonl", &to_jsonl(&tag_records)));
    cfg
}

#[test]
fn identical_unit_embeddings_with_alpha_zero() {
    let dir = tempfile::tempdir().unwrap();
    let n = 4;
    let units = Matrix::from_fn(n, 6, |i, j| f64::from(u8::from(i == j)));
    let bundle = EmbeddingBundle {
        images: Some(units.clone()),
        texts: Some(units.clone()),
        regions: Some(units.clone()),
        sentences: Some(units),
        ..EmbeddingBundle::default()
    };
    let tags = vec![vec![1, 0, 1], vec![0, 1, 1], vec![1, 1, 0], vec![0, 0, 0]];
    let cfg = loss_eval(dir.path(), &bundle, &tags, 0.0);
    let loss = cmd_loss_eval(&cfg).unwrap().report.loss.unwrap();
    assert!((loss.l_soft - loss.l_ira).abs() <= 1e-12, "{loss:?}");
    assert_eq!(
        loss.total,
        loss.l_ira + loss.l_arsa + loss.l_bce + loss.l_soft
    );
}

#[test]
fn single_pair_batch_has_no_contrastive_loss() {
    let dir = tempfile::tempdir().unwrap();
    let row = Matrix::from_vec(1, 3, vec![0.3, -0.2, 0.9]);
    let bundle = EmbeddingBundle {
        images: Some(row.clone()),
        texts: Some(Matrix::from_vec(1, 3, vec![-1.0, 0.5, 0.1])),
        regions: Some(row.clone()),
        sentences: Some(row),
        ..EmbeddingBundle::default()
    };
    let cfg = loss_eval(dir.path(), &bundle, &[vec![1, 0]], 0.5);
    let out = cmd_loss_eval(&cfg).unwrap();
    let loss = out.report.loss.unwrap();
    assert_eq!(loss.l_ira, 0.0);
    assert_eq!(loss.l_arsa, 0.0);
    assert_eq!(out.report.arsa_empty, Some(false));
}

#[test]
fn loss_eval_reports_mismatched_tags() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let bundle = EmbeddingBundle {
        images: Some(m.clone()),
        texts: Some(m),
        ..EmbeddingBundle::default()
    };
    let cfg = loss_eval(dir.path(), &bundle, &[vec![1]], 0.5);
    let err = cmd_loss_eval(&cfg).unwrap_err();
    assert_eq!(err.kind(), "InconsistentInputs");
}

#[test]
fn malformed_line_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.reports = Some(write(
        dir.path(),
        "reports.jsonl",
        "{\"id\":\"a\",\"text\":\"No effusion.\"}\n{\"id\":\"b\"\n",
    ));
    let err = cmd_parse(&cfg).unwrap_err();
    assert_eq!(err.kind(), "InvalidFormat");
    assert!(
        err.to_record().contains("\"line\":2"),
        "{}",
        err.to_record()
    );
}

#[test]
fn parse_output_is_stable_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.reports = Some(write(
        dir.path(),
        "reports.jsonl",
        "{\"id\":\"a\",\"text\":\"Small right pleural effusion. No pneumothorax.\"}\n\
         {\"id\":\"b\",\"text\":\"Unremarkable study.\"}\n",
    ));
    let a = cmd_parse(&cfg).unwrap();
    let b = cmd_parse(&cfg).unwrap();
    assert_eq!(a.report.output_hash, b.report.output_hash);
    assert_eq!(a.report.outputs.len(), 3);
    let tags = &a.files["tags.jsonl"];
    assert!(tags
        .lines()
        .nth(1)
        .unwrap()
        .contains("[0,0,0,0,0,0,0,0,0,0,0,0,0,0]"));
}

#[test]
fn align_without_detections_skips_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.reports = Some(write(
        dir.path(),
        "reports.jsonl",
        "{\"id\":\"a\",\"text\":\"Right hilar opacity. The diaphragm is elevated.\"}\n",
    ));
    cfg.paths.detections = Some(write(dir.path(), "det.jsonl", ""));
    let out = cmd_align(&cfg).unwrap();
    let counts = out.report.pair_counts.unwrap();
    assert_eq!((counts.triplets, counts.pairs(), counts.skipped), (2, 0, 2));
    assert_eq!(out.report.diagnostics.box_missing, 2);
    assert!(out.files["pairs.jsonl"].is_empty());
}
