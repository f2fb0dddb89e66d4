//! Anatomy-guided vision-language pre-training machinery for chest X-rays.
//!
//! The crate covers the data path from free-text radiology reports and
//! anatomical detector output to the four-part training objective:
//!
//! * [`parsing`]: sentence splitting, `<region, finding, existence>` triplets, tag vectors.
//! * [`ontology`]: the report-side region vocabulary, detector classes and their mapping.
//! * [`geometry`]: bounding boxes, box merging and detection ingestion.
//! * [`pairing`]: region-sentence pairs under the merge-box or split-sentence strategy.
//! * [`losses`]: projection, similarity, InfoNCE, soft labels, KL and the total loss.
//! * [`decoder`]: the cross-attention tag decoder and its binary cross-entropy.
//! * [`pipeline`]: configuration, file formats and the command implementations.

pub mod checks;
pub mod decoder;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod ontology;
pub mod pairing;
pub mod parsing;
pub mod pipeline;
pub mod synth;

pub use linalg::Matrix;
