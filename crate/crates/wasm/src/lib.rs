//! Browser bindings for the interactive demo page in `www/`.
//!
//! Each exported function returns a JSON string. The work happens in plain
//! Rust functions so it can be tested natively.

use asg_core::decoder::{bce_loss, decode_trace, DecoderParams};
use asg_core::geometry::{AnatomicalBox, BBox, ImageDetections};
use asg_core::losses::{
    hard_labels, infonce, kl_soft_loss, mix_labels, similarity, soft_labels, EmbeddingBatch, Role,
};
use asg_core::ontology::{DetectorClass, Ontology};
use asg_core::pairing::{build_pairs, RegionSentencePair, Scenario3Strategy};
use asg_core::parsing::{parse_report, Lexicon, Report, TagVector, Triplet};
use asg_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_BATCH: usize = 12;
const MAX_TOKENS: usize = 16;

fn to_box(coords: &[f64]) -> Result<BBox, String> {
    match coords {
        [x1, y1, x2, y2] => BBox::new(*x1, *y1, *x2, *y2).map_err(|e| e.to_string()),
        _ => Err(format!("expected 4 coordinates, got {}", coords.len())),
    }
}

#[derive(Debug, Serialize)]
pub struct Alignment {
    pub triplets: Vec<Triplet>,
    pub merge: Vec<RegionSentencePair>,
    pub split: Vec<RegionSentencePair>,
    pub diagnostics: Vec<String>,
}

/// Parses `text` and pairs its sentences with the given left and right
/// diaphragm boxes under both one-to-many strategies.
pub fn align(text: &str, left: &[f64], right: &[f64]) -> Result<Alignment, String> {
    let ontology = Ontology::default_table();
    let lexicon = Lexicon::default_lexicon();
    let parsed = parse_report(
        &Report {
            id: "demo".into(),
            text: text.into(),
        },
        &lexicon,
    );
    let boxes = [("left diaphragm", left), ("right diaphragm", right)]
        .into_iter()
        .map(|(cls, coords)| {
            Ok(AnatomicalBox {
                bbox: to_box(coords)?,
                cls: DetectorClass::new(cls),
                score: None,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let dets = ImageDetections {
        image_id: "demo".into(),
        width: 512.0,
        height: 512.0,
        boxes,
    };
    let run = |s| {
        build_pairs(
            "demo",
            &parsed.sentences,
            &parsed.triplets,
            Some(&dets),
            &ontology,
            s,
        )
    };
    let (merge, merge_diag) = run(Scenario3Strategy::MergeBBox);
    let (split, split_diag) = run(Scenario3Strategy::SplitSentence);
    let mut diagnostics = merge_diag.to_json_lines();
    diagnostics.extend(
        split_diag
            .fallbacks
            .iter()
            .map(|f| serde_json::to_string(f).expect("serializes")),
    );
    Ok(Alignment {
        triplets: parsed.triplets,
        merge,
        split,
        diagnostics,
    })
}

#[derive(Debug, Serialize)]
pub struct LabelView {
    pub tags: Vec<Vec<u8>>,
    pub similarity: Vec<Vec<f64>>,
    pub soft: Vec<Vec<f64>>,
    pub mixed: Vec<Vec<f64>>,
    pub infonce: f64,
    pub kl: f64,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.to_rows()
}

/// A random batch of `n` image/text embeddings and tag vectors, its similarity
/// matrix at `tau`, the soft and mixed targets, and both losses.
pub fn labels(seed: u32, n: usize, tau: f64, alpha: f64) -> Result<LabelView, String> {
    if !(1..=MAX_BATCH).contains(&n) {
        return Err(format!("batch size must be 1..={MAX_BATCH}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let d = 8;
    let latent = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
    let images = Matrix::from_fn(n, d, |i, j| latent[(i, j)] + 0.5 * rng.gen_range(-1.0..1.0));
    let texts = Matrix::from_fn(n, d, |i, j| latent[(i, j)] + 0.5 * rng.gen_range(-1.0..1.0));
    let tags: Vec<TagVector> = (0..n)
        .map(|_| TagVector((0..6).map(|_| u8::from(rng.gen_bool(0.35))).collect()))
        .collect();
    let err = |e: asg_core::losses::LossError| e.to_string();
    let a = EmbeddingBatch::new(images, Role::Image).map_err(err)?;
    let b = EmbeddingBatch::new(texts, Role::Text).map_err(err)?;
    let p = similarity(&a, &b, tau).map_err(err)?;
    let soft = soft_labels(&tags, tau).map_err(err)?;
    let mixed = mix_labels(&hard_labels(n), &soft, alpha).map_err(err)?;
    Ok(LabelView {
        infonce: infonce(&p),
        kl: kl_soft_loss(&mixed, &p).map_err(err)?,
        tags: tags.into_iter().map(|t| t.0).collect(),
        similarity: rows(&p.p),
        soft: rows(&soft.rows),
        mixed: rows(&mixed.rows),
    })
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    pub attention: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub bce: f64,
}

/// Random decoder with `classes` queries over `tokens` visual tokens.
/// `sharpness` scales the query projection, which sharpens attention.
pub fn attention(
    seed: u32,
    tokens: usize,
    classes: usize,
    sharpness: f64,
) -> Result<AttentionView, String> {
    if !(1..=MAX_TOKENS).contains(&tokens) || !(1..=MAX_TOKENS).contains(&classes) {
        return Err(format!("tokens and classes must be 1..={MAX_TOKENS}"));
    }
    if !sharpness.is_finite() {
        return Err("sharpness must be finite".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let d = 8;
    let z = Matrix::from_fn(tokens, d, |_, _| rng.gen_range(-1.0..1.0));
    let q = Matrix::from_fn(classes, d, |_, _| rng.gen_range(-1.0..1.0));
    let mut params = DecoderParams::random(d, &mut rng);
    params.wq = params.wq.scale(sharpness);
    let labels = TagVector((0..classes).map(|_| u8::from(rng.gen_bool(0.5))).collect());
    let trace = decode_trace(&z, &q, &params).map_err(|e| e.to_string())?;
    Ok(AttentionView {
        bce: bce_loss(&trace.probs, &labels).map_err(|e| e.to_string())?,
        attention: rows(&trace.attention),
        probs: trace.probs,
        labels: labels.0,
    })
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("view serializes"))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = alignDiaphragm)]
pub fn align_js(text: &str, left: Vec<f64>, right: Vec<f64>) -> Result<String, JsError> {
    json(align(text, &left, &right))
}

#[wasm_bindgen(js_name = labelMatrices)]
pub fn labels_js(seed: u32, n: usize, tau: f64, alpha: f64) -> Result<String, JsError> {
    json(labels(seed, n, tau, alpha))
}

#[wasm_bindgen(js_name = decoderAttention)]
pub fn attention_js(
    seed: u32,
    tokens: usize,
    classes: usize,
    sharpness: f64,
) -> Result<String, JsError> {
    json(attention(seed, tokens, classes, sharpness))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diaphragm_sentence_merges_and_splits() {
        let a = align(
            "The diaphragm is elevated.",
            &[10.0, 100.0, 200.0, 260.0],
            &[210.0, 100.0, 400.0, 250.0],
        )
        .unwrap();
        assert_eq!(a.merge.len(), 1);
        assert_eq!(a.merge[0].crop.as_array(), [10.0, 100.0, 400.0, 260.0]);
        let s: Vec<&str> = a.split.iter().map(|p| p.sentence_text.as_str()).collect();
        assert_eq!(
            s,
            [
                "The left diaphragm is elevated.",
                "The right diaphragm is elevated."
            ]
        );
    }

    #[test]
    fn bad_boxes_are_errors() {
        assert!(align("x", &[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(align("x", &[5.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn alpha_zero_makes_kl_equal_infonce() {
        let v = labels(3, 6, 0.3, 0.0).unwrap();
        assert!((v.kl - v.infonce).abs() < 1e-12);
        for row in v.similarity.iter().chain(&v.soft).chain(&v.mixed) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(labels(0, 0, 0.1, 0.5).is_err());
        assert!(labels(0, 4, 0.0, 0.5).is_err());
        assert!(labels(0, 4, 0.1, 1.5).is_err());
        assert!(attention(0, 0, 3, 1.0).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let v = attention(1, 5, 4, 2.0).unwrap();
        assert_eq!(v.attention.len(), 4);
        for row in &v.attention {
            assert_eq!(row.len(), 5);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(v.bce > 0.0);
    }
}
