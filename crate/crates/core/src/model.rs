//! The full four-term objective evaluated on one batch.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{batch_bce_loss, decode_tags, DecoderError, DecoderParams};
use crate::linalg::Matrix;
use crate::losses::{
    arsa_loss, hard_labels, mix_labels, project, soft_labels, symmetric_infonce, symmetric_kl,
    weighted_total, EmbeddingBatch, LossBreakdown, LossError, LossWeights, ProjectionHead, Role,
    SymmetricSimilarity,
};
use crate::parsing::TagVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("batch is inconsistent: {0}")]
    Batch(String),
}

/// Projection heads for the four embedding roles plus the tag decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsgModel {
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub region_head: ProjectionHead,
    pub sentence_head: ProjectionHead,
    pub decoder: DecoderParams,
    /// One query row per disease class.
    pub queries: Matrix,
}

impl AsgModel {
    /// Randomly initialized model for `dim`-dimensional encoder outputs. Heads
    /// map to `max(1, dim / 2)` dimensions through a `dim`-wide hidden layer.
    pub fn random<R: Rng + ?Sized>(dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let out = (dim / 2).max(1);
        Self {
            image_head: ProjectionHead::random(dim, dim, out, rng),
            text_head: ProjectionHead::random(dim, dim, out, rng),
            region_head: ProjectionHead::random(dim, dim, out, rng),
            sentence_head: ProjectionHead::random(dim, dim, out, rng),
            decoder: DecoderParams::random(dim, rng),
            queries: Matrix::from_fn(num_classes, dim, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }
}

/// Encoder outputs for `N` image-report pairs and `P` region-sentence pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AsgBatch {
    /// `N x d` global image embeddings.
    pub images: Matrix,
    /// `N x d` global report embeddings.
    pub texts: Matrix,
    /// `P x d` region embeddings, one per aligned pair across the batch.
    pub regions: Matrix,
    /// `P x d` sentence embeddings matching `regions` row for row.
    pub sentences: Matrix,
    /// Visual tokens of each image.
    pub tokens: Vec<Matrix>,
    /// Tag vector of each pair.
    pub tags: Vec<TagVector>,
}

impl AsgBatch {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    fn validate(&self) -> Result<(), ModelError> {
        let n = self.images.rows();
        let bad = |msg: String| Err(ModelError::Batch(msg));
        if n == 0 {
            return bad("no image-report pairs".into());
        }
        if self.texts.rows() != n || self.tokens.len() != n || self.tags.len() != n {
            return bad(format!(
                "{n} images, {} texts, {} token sets, {} tag vectors",
                self.texts.rows(),
                self.tokens.len(),
                self.tags.len()
            ));
        }
        if self.regions.rows() != self.sentences.rows() {
            return bad(format!(
                "{} region rows vs {} sentence rows",
                self.regions.rows(),
                self.sentences.rows()
            ));
        }
        Ok(())
    }
}

/// Temperature, mixing weight and per-term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub alpha: f64,
    pub weights: LossWeights,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: crate::losses::DEFAULT_TAU,
            alpha: crate::losses::DEFAULT_ALPHA,
            weights: LossWeights::default(),
        }
    }
}

/// Loss breakdown plus whether the region-sentence term had no pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub arsa_empty: bool,
}

/// Evaluates all four terms on one batch.
pub fn evaluate(
    model: &AsgModel,
    batch: &AsgBatch,
    config: &ObjectiveConfig,
) -> Result<Evaluation, ModelError> {
    batch.validate()?;
    let tau = config.tau;

    let images = project(
        &EmbeddingBatch::new(batch.images.clone(), Role::Image)?,
        &model.image_head,
    )?;
    let texts = project(
        &EmbeddingBatch::new(batch.texts.clone(), Role::Text)?,
        &model.text_head,
    )?;
    let l_ira = symmetric_infonce(&images, &texts, tau)?;

    let labels = mix_labels(
        &hard_labels(batch.len()),
        &soft_labels(&batch.tags, tau)?,
        config.alpha,
    )?;
    let l_soft = symmetric_kl(&labels, &SymmetricSimilarity::new(&images, &texts, tau)?)?;

    let arsa = if batch.regions.rows() == 0 {
        arsa_loss(&batch.regions, &batch.sentences, tau)?
    } else {
        let (regions, _) = model.region_head.forward(&batch.regions)?;
        let (sentences, _) = model.sentence_head.forward(&batch.sentences)?;
        arsa_loss(&regions, &sentences, tau)?
    };

    let mut samples = Vec::with_capacity(batch.len());
    for (tokens, tags) in batch.tokens.iter().zip(&batch.tags) {
        samples.push((
            decode_tags(tokens, &model.queries, &model.decoder)?,
            tags.clone(),
        ));
    }
    let l_bce = batch_bce_loss(&samples)?;

    Ok(Evaluation {
        loss: weighted_total(l_ira, arsa.value, l_bce, l_soft, &config.weights)?,
        arsa_empty: arsa.empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, p: usize, d: usize, rng: &mut ChaCha8Rng) -> AsgBatch {
        let mut m = |r: usize| Matrix::from_fn(r, d, |_, _| rng.gen_range(-1.0..1.0));
        AsgBatch {
            images: m(n),
            texts: m(n),
            regions: m(p),
            sentences: m(p),
            tokens: (0..n).map(|_| m(3)).collect(),
            tags: (0..n)
                .map(|i| TagVector(vec![(i % 2) as u8, 1, 0]))
                .collect(),
        }
    }

    #[test]
    fn single_pair_contrastive_terms_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = AsgModel::random(4, 3, &mut rng);
        let b = batch(1, 1, 4, &mut rng);
        let eval = evaluate(&model, &b, &ObjectiveConfig::default()).unwrap();
        assert_eq!(eval.loss.l_ira, 0.0);
        assert_eq!(eval.loss.l_arsa, 0.0);
        assert_eq!(eval.loss.l_soft, 0.0);
        assert!(eval.loss.l_bce > 0.0);
    }

    #[test]
    fn alpha_zero_soft_equals_ira() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = AsgModel::random(6, 3, &mut rng);
        let b = batch(5, 7, 6, &mut rng);
        let cfg = ObjectiveConfig {
            alpha: 0.0,
            ..ObjectiveConfig::default()
        };
        let eval = evaluate(&model, &b, &cfg).unwrap();
        assert!((eval.loss.l_soft - eval.loss.l_ira).abs() <= 1e-12);
    }

    #[test]
    fn empty_pair_set_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = AsgModel::random(4, 3, &mut rng);
        let b = batch(3, 0, 4, &mut rng);
        let eval = evaluate(&model, &b, &ObjectiveConfig::default()).unwrap();
        assert!(eval.arsa_empty);
        assert_eq!(eval.loss.l_arsa, 0.0);
    }

    #[test]
    fn inconsistent_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = AsgModel::random(4, 3, &mut rng);
        let mut b = batch(3, 2, 4, &mut rng);
        b.tags.pop();
        assert!(matches!(
            evaluate(&model, &b, &ObjectiveConfig::default()),
            Err(ModelError::Batch(_))
        ));
    }
}
