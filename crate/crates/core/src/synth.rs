//! Seeded synthetic corpus: template reports, detector boxes and embeddings.
//!
//! Every generator draws from its own ChaCha8 stream derived from one seed, so
//! changing, say, the embedding dimension never perturbs the report text:
//!
//! | stream | used for               |
//! |--------|------------------------|
//! | 0      | report text            |
//! | 1      | detections             |
//! | 2      | embeddings             |
//! | 3      | model parameters       |
//! | 4      | invariant-check inputs |

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{AnatomicalBox, BBox, ImageDetections};
use crate::io::EmbeddingBundle;
use crate::linalg::Matrix;
use crate::losses::mean_pool;
use crate::ontology::DetectorClass;
use crate::parsing::Report;

pub const STREAM_REPORTS: u64 = 0;
pub const STREAM_DETECTIONS: u64 = 1;
pub const STREAM_EMBEDDINGS: u64 = 2;
pub const STREAM_MODEL: u64 = 3;
pub const STREAM_CHECKS: u64 = 4;

pub const IMAGE_SIZE: f64 = 512.0;

/// Generator for one named stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const REGIONS: &[&str] = &[
    "lung",
    "left lung",
    "right lung",
    "right hilar",
    "left hilar",
    "right ventricle",
    "diaphragm",
    "left lower lobe",
    "right upper lobe",
    "pleura",
    "mediastinum",
    "bases",
    "apices",
    "rib",
    "clavicle",
    "trachea",
    "right costophrenic angle",
    "retrocardiac",
];

const FINDINGS: &[&str] = &[
    "pneumothorax",
    "effusion",
    "consolidation",
    "atelectasis",
    "opacity",
    "nodule",
    "mass",
    "fracture",
    "edema",
];

const FILLERS: &[&str] = &[
    "Heart size is normal.",
    "Patient is comfortable.",
    "Comparison is made to the prior study.",
    "Support devices are unchanged.",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn finding_sentence(rng: &mut impl Rng) -> String {
    let region = REGIONS.choose(rng).expect("non-empty");
    let finding = FINDINGS.choose(rng).expect("non-empty");
    match rng.gen_range(0..6) {
        0 => format!("There is {} {finding} in the {region}.", article(finding)),
        1 => format!("No {finding} in the {region}."),
        2 => format!("{} {finding} is noted.", capitalize(region)),
        3 => format!("Possible {finding} at the {region}."),
        4 => format!("The {region} is without {finding}."),
        _ => format!("The {region} is elevated."),
    }
}

/// `count` template reports with ids `synth-000`, `synth-001`, ...
pub fn synth_reports(count: usize, rng: &mut impl Rng) -> Vec<Report> {
    (0..count)
        .map(|i| {
            let mut sentences: Vec<String> = (0..rng.gen_range(2..=4))
                .map(|_| finding_sentence(rng))
                .collect();
            sentences.push(FILLERS.choose(rng).expect("non-empty").to_string());
            sentences.shuffle(rng);
            Report {
                id: format!("synth-{i:03}"),
                text: sentences.join(" "),
            }
        })
        .collect()
}

/// Reference layout of every detector class on a 512 x 512 frontal film.
/// Patient right is image left.
const LAYOUT: &[(&str, [f64; 4])] = &[
    ("right lung", [40.0, 60.0, 240.0, 420.0]),
    ("right upper lung zone", [40.0, 60.0, 240.0, 180.0]),
    ("right mid lung zone", [40.0, 180.0, 240.0, 300.0]),
    ("right lower lung zone", [40.0, 300.0, 240.0, 420.0]),
    ("right hilar structures", [150.0, 170.0, 230.0, 270.0]),
    ("right apical zone", [60.0, 50.0, 220.0, 110.0]),
    ("right costophrenic angle", [40.0, 370.0, 110.0, 430.0]),
    ("right diaphragm", [50.0, 380.0, 240.0, 440.0]),
    ("left lung", [272.0, 60.0, 472.0, 420.0]),
    ("left upper lung zone", [272.0, 60.0, 472.0, 180.0]),
    ("left mid lung zone", [272.0, 180.0, 472.0, 300.0]),
    ("left lower lung zone", [272.0, 300.0, 472.0, 420.0]),
    ("left hilar structures", [282.0, 170.0, 362.0, 270.0]),
    ("left apical zone", [292.0, 50.0, 452.0, 110.0]),
    ("left costophrenic angle", [402.0, 370.0, 472.0, 430.0]),
    ("left diaphragm", [272.0, 390.0, 462.0, 450.0]),
    ("trachea", [236.0, 20.0, 276.0, 200.0]),
    ("spine", [226.0, 20.0, 286.0, 500.0]),
    ("right clavicle", [60.0, 70.0, 250.0, 120.0]),
    ("left clavicle", [262.0, 70.0, 452.0, 120.0]),
    ("aortic arch", [260.0, 120.0, 330.0, 180.0]),
    ("mediastinum", [190.0, 100.0, 330.0, 400.0]),
    ("upper mediastinum", [200.0, 60.0, 320.0, 190.0]),
    ("svc", [210.0, 120.0, 250.0, 260.0]),
    ("cardiac silhouette", [180.0, 240.0, 400.0, 420.0]),
    ("cavoatrial junction", [215.0, 250.0, 255.0, 290.0]),
    ("right atrium", [180.0, 260.0, 260.0, 400.0]),
    ("carina", [236.0, 180.0, 276.0, 220.0]),
    ("abdomen", [60.0, 430.0, 460.0, 510.0]),
];

/// Jittered layout boxes for each image id. Each class is dropped with
/// probability `drop_rate`; occasionally a lower-scoring duplicate is added.
pub fn synth_detections(
    ids: &[String],
    drop_rate: f64,
    rng: &mut impl Rng,
) -> Vec<ImageDetections> {
    ids.iter()
        .map(|id| {
            let mut boxes = Vec::new();
            for (cls, [x1, y1, x2, y2]) in LAYOUT {
                if rng.gen_bool(drop_rate) {
                    continue;
                }
                let mut jitter = |v: f64| (v + rng.gen_range(-6.0..6.0)).clamp(0.0, IMAGE_SIZE);
                let bbox = BBox::new(jitter(*x1), jitter(*y1), jitter(*x2), jitter(*y2))
                    .expect("layout boxes stay valid under small jitter");
                let score = (rng.gen_range(0.6..1.0f64) * 1000.0).round() / 1000.0;
                boxes.push(AnatomicalBox {
                    bbox,
                    cls: DetectorClass::new(*cls),
                    score: Some(score),
                });
                if rng.gen_bool(0.05) {
                    let shifted = BBox::new(
                        bbox.x1,
                        bbox.y1,
                        (bbox.x2 - 4.0).max(bbox.x1 + 1.0),
                        bbox.y2,
                    )
                    .expect("shrunk box stays valid");
                    boxes.push(AnatomicalBox {
                        bbox: shifted,
                        cls: DetectorClass::new(*cls),
                        score: Some((score * 0.5 * 1000.0).round() / 1000.0),
                    });
                }
            }
            ImageDetections {
                image_id: id.clone(),
                width: IMAGE_SIZE,
                height: IMAGE_SIZE,
                boxes,
            }
        })
        .collect()
}

fn noisy(center: &[f64], scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + scale * rng.gen_range(-1.0..1.0))
        .collect()
}

/// Embeddings where each image and its report share a latent vector, and each
/// region-sentence pair shares another. Global image embeddings are the mean
/// of `tokens_per_image` visual tokens.
pub fn synth_embeddings(
    images: usize,
    pairs: usize,
    dim: usize,
    tokens_per_image: usize,
    rng: &mut impl Rng,
) -> EmbeddingBundle {
    let mut image_rows = Vec::with_capacity(images);
    let mut text_rows = Vec::with_capacity(images);
    let mut tokens = std::collections::BTreeMap::new();
    for i in 0..images {
        let latent: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let toks: Vec<Vec<f64>> = (0..tokens_per_image)
            .map(|_| noisy(&latent, 0.3, rng))
            .collect();
        let toks = Matrix::from_rows(&toks).expect("equal rows");
        image_rows.push(mean_pool(&toks));
        tokens.insert(i, toks);
        text_rows.push(noisy(&latent, 0.3, rng));
    }
    let mut region_rows = Vec::with_capacity(pairs);
    let mut sentence_rows = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let latent: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        region_rows.push(noisy(&latent, 0.2, rng));
        sentence_rows.push(noisy(&latent, 0.2, rng));
    }
    let m = |rows: &[Vec<f64>]| Matrix::from_rows(rows).filter(|m| m.rows() > 0);
    EmbeddingBundle {
        images: m(&image_rows),
        texts: m(&text_rows),
        regions: m(&region_rows),
        sentences: m(&sentence_rows),
        tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::Ontology;

    #[test]
    fn layout_covers_every_detector_class() {
        let ont = Ontology::default_table();
        assert_eq!(LAYOUT.len(), ont.c_pre().len());
        for (cls, _) in LAYOUT {
            assert!(ont.contains_class(cls), "{cls}");
        }
    }

    #[test]
    fn template_regions_and_findings_are_in_the_lexicon() {
        let lex = crate::parsing::Lexicon::default_lexicon();
        for r in REGIONS {
            assert!(lex.region_terms().contains_key(*r), "{r}");
        }
        for f in FINDINGS {
            assert!(lex.finding_terms().contains_key(*f), "{f}");
        }
    }

    #[test]
    fn streams_are_reproducible_and_independent() {
        let a = synth_reports(5, &mut stream_rng(9, STREAM_REPORTS));
        let b = synth_reports(5, &mut stream_rng(9, STREAM_REPORTS));
        assert_eq!(a, b);
        let c = synth_reports(5, &mut stream_rng(9, STREAM_DETECTIONS));
        assert_ne!(a, c);
    }

    #[test]
    fn detections_round_trip_through_ingestion() {
        let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
        let dets = synth_detections(&ids, 0.1, &mut stream_rng(1, STREAM_DETECTIONS));
        let text: String = dets.iter().map(|d| d.to_json_line() + "\n").collect();
        let back = crate::geometry::ingest_detections(text.as_bytes(), &Ontology::default_table())
            .unwrap();
        for (d, b) in dets.iter().zip(&back) {
            assert!(b.boxes.len() <= d.boxes.len());
            let mut classes: Vec<_> = b.boxes.iter().map(|x| &x.cls).collect();
            classes.dedup();
            assert_eq!(classes.len(), b.boxes.len());
        }
    }
}
