//! Contrastive and distillation loss kernels.
//!
//! All arithmetic is `f64`, and every sum runs sequentially in row-major order so
//! that a fixed input always produces the same bits.
//!
//! * [`similarity`]: row-softmax of temperature-scaled cosine similarities.
//! * [`infonce`]: mean cross-entropy against the one-hot diagonal.
//! * [`soft_labels`] / [`mix_labels`]: tag-similarity targets mixed with one-hot labels.
//! * [`kl_soft_loss`]: mean row KL divergence from a label matrix to a similarity matrix.
//! * [`total_loss`]: the unweighted four-term sum.

mod objective;
mod projection;

pub use objective::{
    contrastive_grad_check, contrastive_value, contrastive_with_grads, ContrastiveGrads,
    ContrastiveTarget, SymmetricSimilarity,
};
pub use projection::{HeadGrads, ProjectionCache, ProjectionHead};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm, softmax_into, Matrix};
use crate::parsing::TagVector;

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.07;
/// Default soft-label mixing weight.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Rows with a norm below this are considered degenerate after projection.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("row {row} has norm {norm:e} after projection")]
    ZeroVector { row: usize, norm: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("embedding batch must be non-empty with finite entries: {0}")]
    InvalidBatch(String),
    #[error("loss component {name} is not finite ({value})")]
    NonFiniteComponent { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Image,
    Text,
    Region,
    Sentence,
    Token,
}

/// `N x d` embeddings of one role, all finite, `N, d >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Matrix,
    role: Role,
}

impl EmbeddingBatch {
    pub fn new(vectors: Matrix, role: Role) -> Result<Self, LossError> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(LossError::InvalidBatch(format!(
                "shape {}x{}",
                vectors.rows(),
                vectors.cols()
            )));
        }
        if !vectors.is_finite() {
            return Err(LossError::InvalidBatch("non-finite entry".into()));
        }
        Ok(Self { vectors, role })
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Mean of a token sequence, the global representation of one image.
pub fn mean_pool(tokens: &Matrix) -> Vec<f64> {
    let n = tokens.rows() as f64;
    tokens.column_sums().into_iter().map(|s| s / n).collect()
}

/// Projects a batch through `head` and L2-normalizes every row.
pub fn project(batch: &EmbeddingBatch, head: &ProjectionHead) -> Result<EmbeddingBatch, LossError> {
    let (out, _) = head.forward(batch.vectors())?;
    Ok(EmbeddingBatch {
        vectors: out,
        role: batch.role,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Row-stochastic similarity matrix `p_ij = softmax_j(cos(a_i, b_j) / tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub p: Matrix,
    pub direction: Direction,
    pub temperature: f64,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.p.rows()
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::NonPositiveTemperature(tau))
    }
}

/// Cosine similarity; zero when either vector is all-zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn softmax_of_cosines(a: &Matrix, b: &Matrix, tau: f64) -> Matrix {
    let n = a.rows();
    let mut p = Matrix::zeros(n, b.rows());
    let mut logits = vec![0.0; b.rows()];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = cosine(a.row(i), b.row(j)) / tau;
        }
        softmax_into(&logits, p.row_mut(i));
    }
    p
}

/// Similarity of every row of `a` against every row of `b`.
///
/// The direction is `TextToImage` when `a` holds text or sentence embeddings
/// and `ImageToText` otherwise.
pub fn similarity(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    tau: f64,
) -> Result<SimilarityMatrix, LossError> {
    check_tau(tau)?;
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    let direction = match a.role {
        Role::Text | Role::Sentence => Direction::TextToImage,
        _ => Direction::ImageToText,
    };
    Ok(SimilarityMatrix {
        p: softmax_of_cosines(a.vectors(), b.vectors(), tau),
        direction,
        temperature: tau,
    })
}

/// `(1/N) sum_i -ln p_ii`.
pub fn infonce(p: &SimilarityMatrix) -> f64 {
    let n = p.n();
    let mut sum = 0.0;
    for i in 0..n {
        sum += -p.p[(i, i)].ln();
    }
    sum / n as f64
}

/// Symmetric InfoNCE between two already-projected batches:
/// `(infonce(a -> b) + infonce(b -> a)) / 2`.
pub fn symmetric_infonce(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    tau: f64,
) -> Result<f64, LossError> {
    let sims = SymmetricSimilarity::new(a, b, tau)?;
    Ok(0.5 * (infonce(&sims.forward) + infonce(&sims.backward)))
}

/// Region-sentence contrastive loss over all pairs of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArsaLoss {
    pub value: f64,
    /// Set when there were no pairs and the loss defaulted to zero.
    pub empty: bool,
}

/// Symmetric InfoNCE over projected region and sentence embeddings, one row
/// per aligned pair. An empty pair set contributes zero.
pub fn arsa_loss(regions: &Matrix, sentences: &Matrix, tau: f64) -> Result<ArsaLoss, LossError> {
    check_tau(tau)?;
    if regions.shape() != sentences.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "{} region rows x {} vs {} sentence rows x {}",
            regions.rows(),
            regions.cols(),
            sentences.rows(),
            sentences.cols()
        )));
    }
    if regions.rows() == 0 {
        return Ok(ArsaLoss {
            value: 0.0,
            empty: true,
        });
    }
    let r = EmbeddingBatch::new(regions.clone(), Role::Region)?;
    let s = EmbeddingBatch::new(sentences.clone(), Role::Sentence)?;
    Ok(ArsaLoss {
        value: symmetric_infonce(&r, &s, tau)?,
        empty: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Hard,
    Soft,
    Mixed,
}

/// Row-stochastic target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub rows: Matrix,
    pub kind: LabelKind,
    pub alpha: Option<f64>,
}

impl LabelMatrix {
    pub fn n(&self) -> usize {
        self.rows.rows()
    }
}

/// One-hot targets `y_ii = 1`.
pub fn hard_labels(n: usize) -> LabelMatrix {
    LabelMatrix {
        rows: Matrix::identity(n),
        kind: LabelKind::Hard,
        alpha: None,
    }
}

/// Soft targets from tag-vector cosine similarity, row-softmaxed at `tau`.
/// An all-zero tag vector has cosine 0 with everything.
pub fn soft_labels(tags: &[TagVector], tau: f64) -> Result<LabelMatrix, LossError> {
    check_tau(tau)?;
    let width = tags.first().map_or(0, TagVector::len);
    if tags.iter().any(|t| t.len() != width) {
        return Err(LossError::ShapeMismatch(
            "tag vectors differ in length".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = tags.iter().map(TagVector::as_f64).collect();
    let m = Matrix::from_rows(&rows).expect("equal-length rows");
    Ok(LabelMatrix {
        rows: softmax_of_cosines(&m, &m, tau),
        kind: LabelKind::Soft,
        alpha: None,
    })
}

/// `(1 - alpha) * hard + alpha * soft`, elementwise.
pub fn mix_labels(
    hard: &LabelMatrix,
    soft: &LabelMatrix,
    alpha: f64,
) -> Result<LabelMatrix, LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::AlphaOutOfRange(alpha));
    }
    if hard.rows.shape() != soft.rows.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "hard {:?} vs soft {:?}",
            hard.rows.shape(),
            soft.rows.shape()
        )));
    }
    // Endpoints are copied so that alpha = 0 / 1 reproduce the inputs bit for bit.
    let rows = if alpha == 0.0 {
        hard.rows.clone()
    } else if alpha == 1.0 {
        soft.rows.clone()
    } else {
        Matrix::from_fn(hard.n(), hard.n(), |i, j| {
            (1.0 - alpha) * hard.rows[(i, j)] + alpha * soft.rows[(i, j)]
        })
    };
    Ok(LabelMatrix {
        rows,
        kind: LabelKind::Mixed,
        alpha: Some(alpha),
    })
}

/// `(1/N) sum_i KL(target_i || p_i)` with `0 ln 0 = 0`.
pub fn kl_soft_loss(target: &LabelMatrix, p: &SimilarityMatrix) -> Result<f64, LossError> {
    if target.rows.shape() != p.p.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "labels {:?} vs similarity {:?}",
            target.rows.shape(),
            p.p.shape()
        )));
    }
    let n = p.n();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let q = target.rows[(i, j)];
            if q > 0.0 {
                sum += q * (q.ln() - p.p[(i, j)].ln());
            }
        }
    }
    Ok(sum / n as f64)
}

/// `(KL(target || p_forward) + KL(target || p_backward)) / 2`.
pub fn symmetric_kl(target: &LabelMatrix, sims: &SymmetricSimilarity) -> Result<f64, LossError> {
    Ok(0.5 * (kl_soft_loss(target, &sims.forward)? + kl_soft_loss(target, &sims.backward)?))
}

/// Per-term multipliers applied before summation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ira: f64,
    pub arsa: f64,
    pub bce: f64,
    pub soft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ira: 1.0,
            arsa: 1.0,
            bce: 1.0,
            soft: 1.0,
        }
    }
}

/// The four loss terms and their sum, `total = l_ira + l_arsa + l_bce + l_soft`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ira: f64,
    pub l_arsa: f64,
    pub l_bce: f64,
    pub l_soft: f64,
    pub total: f64,
}

/// Unweighted sum of the four components.
pub fn total_loss(
    l_ira: f64,
    l_arsa: f64,
    l_bce: f64,
    l_soft: f64,
) -> Result<LossBreakdown, LossError> {
    for (name, value) in [
        ("l_ira", l_ira),
        ("l_arsa", l_arsa),
        ("l_bce", l_bce),
        ("l_soft", l_soft),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFiniteComponent { name, value });
        }
    }
    Ok(LossBreakdown {
        l_ira,
        l_arsa,
        l_bce,
        l_soft,
        total: l_ira + l_arsa + l_bce + l_soft,
    })
}

/// Scales each component by its weight, then sums. Unit weights reproduce
/// [`total_loss`] exactly.
pub fn weighted_total(
    l_ira: f64,
    l_arsa: f64,
    l_bce: f64,
    l_soft: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    total_loss(
        weights.ira * l_ira,
        weights.arsa * l_arsa,
        weights.bce * l_bce,
        weights.soft * l_soft,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>], role: Role) -> EmbeddingBatch {
        EmbeddingBatch::new(Matrix::from_rows(rows).unwrap(), role).unwrap()
    }

    fn identity2(role: Role) -> EmbeddingBatch {
        batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], role)
    }

    const E: f64 = std::f64::consts::E;

    #[test]
    fn single_row_similarity_is_one() {
        let a = batch(&[vec![0.3, 0.4]], Role::Image);
        let b = batch(&[vec![-1.0, 2.0]], Role::Text);
        let p = similarity(&a, &b, 0.07).unwrap();
        assert_eq!(p.p.as_slice(), &[1.0]);
        assert_eq!(infonce(&p), 0.0);
    }

    #[test]
    fn identity_rows_at_unit_temperature() {
        let p = similarity(&identity2(Role::Image), &identity2(Role::Text), 1.0).unwrap();
        let hi = E / (E + 1.0);
        let lo = 1.0 / (E + 1.0);
        assert!((p.p[(0, 0)] - hi).abs() < 1e-15);
        assert!((p.p[(0, 1)] - lo).abs() < 1e-15);
        assert!((p.p[(0, 0)] - 0.73106).abs() < 1e-5);
        assert!((infonce(&p) - 0.31326).abs() < 1e-5);
        assert_eq!(p.direction, Direction::ImageToText);
    }

    #[test]
    fn uniform_infonce_is_ln_n() {
        let p = SimilarityMatrix {
            p: Matrix::from_fn(4, 4, |_, _| 0.25),
            direction: Direction::ImageToText,
            temperature: 1.0,
        };
        assert!((infonce(&p) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn temperature_must_be_positive() {
        let a = identity2(Role::Image);
        for tau in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                similarity(&a, &a, tau),
                Err(LossError::NonPositiveTemperature(_))
            ));
        }
        assert!(soft_labels(&[TagVector(vec![1])], 0.0).is_err());
    }

    #[test]
    fn argmax_is_temperature_invariant() {
        let a = batch(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.6, 0.8]], Role::Image);
        let b = batch(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]], Role::Text);
        let argmax = |tau| {
            let p = similarity(&a, &b, tau).unwrap();
            (0..2)
                .map(|i| {
                    let r = p.p.row(i);
                    (0..r.len()).max_by(|&x, &y| r[x].total_cmp(&r[y])).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(argmax(0.07), argmax(1.0));
    }

    #[test]
    fn soft_label_examples() {
        let same = vec![TagVector(vec![1, 0, 1]); 3];
        let s = soft_labels(&same, 0.07).unwrap();
        for x in s.rows.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let ortho = [TagVector(vec![1, 0]), TagVector(vec![0, 1])];
        let s = soft_labels(&ortho, 1.0).unwrap();
        assert!((s.rows[(0, 0)] - E / (E + 1.0)).abs() < 1e-15);
        assert!((s.rows[(1, 1)] - E / (E + 1.0)).abs() < 1e-15);

        let with_zero = [
            TagVector(vec![1, 0]),
            TagVector(vec![0, 0]),
            TagVector(vec![1, 1]),
        ];
        let s = soft_labels(&with_zero, 0.07).unwrap();
        for j in 0..3 {
            assert!((s.rows[(1, j)] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let hard = hard_labels(2);
        let soft = LabelMatrix {
            rows: Matrix::from_vec(2, 2, vec![0.7, 0.3, 0.3, 0.7]),
            kind: LabelKind::Soft,
            alpha: None,
        };
        assert_eq!(mix_labels(&hard, &soft, 0.0).unwrap().rows, hard.rows);
        assert_eq!(mix_labels(&hard, &soft, 1.0).unwrap().rows, soft.rows);
        let mid = mix_labels(&hard, &soft, 0.5).unwrap();
        assert!((mid.rows[(0, 0)] - 0.85).abs() < 1e-15);
        assert!((mid.rows[(0, 1)] - 0.15).abs() < 1e-15);
        assert_eq!(
            mix_labels(&hard, &soft, 1.5),
            Err(LossError::AlphaOutOfRange(1.5))
        );
    }

    #[test]
    fn kl_examples() {
        let p = similarity(&identity2(Role::Image), &identity2(Role::Text), 1.0).unwrap();
        let same = LabelMatrix {
            rows: p.p.clone(),
            kind: LabelKind::Soft,
            alpha: None,
        };
        assert!(kl_soft_loss(&same, &p).unwrap().abs() < 1e-15);
        assert_eq!(kl_soft_loss(&hard_labels(2), &p).unwrap(), infonce(&p));

        let target = LabelMatrix {
            rows: Matrix::from_vec(1, 1, vec![1.0]),
            kind: LabelKind::Mixed,
            alpha: Some(0.5),
        };
        assert!(kl_soft_loss(&target, &p).is_err());
    }

    #[test]
    fn kl_mixed_row_value() {
        // Row (0.85, 0.15) against the identity-row similarity at tau = 1.
        let p = similarity(&identity2(Role::Image), &identity2(Role::Text), 1.0).unwrap();
        let target = LabelMatrix {
            rows: Matrix::from_vec(2, 2, vec![0.85, 0.15, 0.15, 0.85]),
            kind: LabelKind::Mixed,
            alpha: Some(0.5),
        };
        let kl = kl_soft_loss(&target, &p).unwrap();
        let (hi, lo) = (E / (E + 1.0), 1.0 / (E + 1.0));
        let by_hand = 0.85 * (0.85 / hi).ln() + 0.15 * (0.15 / lo).ln();
        assert!((kl - by_hand).abs() < 1e-15, "{kl}");
        assert!((kl - 0.0405526).abs() < 1e-7, "{kl}");
    }

    #[test]
    fn totals() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0).unwrap().total, 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0).unwrap().total, 10.0);
        assert!(matches!(
            total_loss(1.0, f64::NAN, 0.0, 0.0),
            Err(LossError::NonFiniteComponent { name: "l_arsa", .. })
        ));
        let w = LossWeights {
            ira: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(weighted_total(5.0, 1.0, 1.0, 1.0, &w).unwrap().total, 3.0);
    }

    #[test]
    fn arsa_edge_cases() {
        let empty = Matrix::zeros(0, 4);
        let out = arsa_loss(&empty, &empty, 0.07).unwrap();
        assert!(out.empty);
        assert_eq!(out.value, 0.0);

        let one = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        assert_eq!(arsa_loss(&one, &one, 0.07).unwrap().value, 0.0);

        let ident = Matrix::identity(2);
        let p = similarity(&identity2(Role::Image), &identity2(Role::Text), 1.0).unwrap();
        assert_eq!(arsa_loss(&ident, &ident, 1.0).unwrap().value, infonce(&p));
    }

    #[test]
    fn mean_pool_averages_tokens() {
        let tokens = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(mean_pool(&tokens), vec![2.0, 4.0]);
    }
}
