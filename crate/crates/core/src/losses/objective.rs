use super::{
    check_tau, infonce, kl_soft_loss, similarity, EmbeddingBatch, HeadGrads, LabelMatrix,
    LossError, ProjectionHead, SimilarityMatrix,
};
use crate::gradcheck::{central_differences, max_relative_error};
use crate::linalg::Matrix;

/// Both similarity directions between two projected batches.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSimilarity {
    /// Rows of `a` against `b` (image to text).
    pub forward: SimilarityMatrix,
    /// Rows of `b` against `a` (text to image).
    pub backward: SimilarityMatrix,
}

impl SymmetricSimilarity {
    pub fn new(a: &EmbeddingBatch, b: &EmbeddingBatch, tau: f64) -> Result<Self, LossError> {
        Ok(Self {
            forward: similarity(a, b, tau)?,
            backward: similarity(b, a, tau)?,
        })
    }
}

/// What the two similarity directions are trained towards.
#[derive(Debug, Clone, Copy)]
pub enum ContrastiveTarget<'a> {
    /// InfoNCE against the diagonal.
    OneHot,
    /// Mean KL divergence from the given row-stochastic labels, used for both
    /// directions.
    Labels(&'a LabelMatrix),
}

fn symmetric_value(
    sims: &SymmetricSimilarity,
    target: ContrastiveTarget<'_>,
) -> Result<f64, LossError> {
    Ok(match target {
        ContrastiveTarget::OneHot => 0.5 * (infonce(&sims.forward) + infonce(&sims.backward)),
        ContrastiveTarget::Labels(labels) => {
            0.5 * (kl_soft_loss(labels, &sims.forward)? + kl_soft_loss(labels, &sims.backward)?)
        }
    })
}

/// Value of the symmetric contrastive loss on raw inputs, without gradients.
pub fn contrastive_value(
    a_raw: &Matrix,
    head_a: &ProjectionHead,
    b_raw: &Matrix,
    head_b: &ProjectionHead,
    tau: f64,
    target: ContrastiveTarget<'_>,
) -> Result<f64, LossError> {
    check_tau(tau)?;
    let (a_hat, _) = head_a.forward(a_raw)?;
    let (b_hat, _) = head_b.forward(b_raw)?;
    let a = EmbeddingBatch::new(a_hat, super::Role::Image)?;
    let b = EmbeddingBatch::new(b_hat, super::Role::Text)?;
    symmetric_value(&SymmetricSimilarity::new(&a, &b, tau)?, target)
}

/// Gradients of a symmetric contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub a_raw: Matrix,
    pub b_raw: Matrix,
    pub head_a: HeadGrads,
    pub head_b: HeadGrads,
}

/// Projects `a_raw` and `b_raw` through their heads and evaluates
/// `(L(a -> b) + L(b -> a)) / 2`, returning the value with gradients
/// w.r.t. the raw rows and both heads' parameters.
///
/// The value is computed with the same public kernels as the non-differentiable
/// path ([`similarity`], [`infonce`], [`kl_soft_loss`]), so both agree bit for bit.
pub fn contrastive_with_grads(
    a_raw: &Matrix,
    head_a: &ProjectionHead,
    b_raw: &Matrix,
    head_b: &ProjectionHead,
    tau: f64,
    target: ContrastiveTarget<'_>,
) -> Result<(f64, ContrastiveGrads), LossError> {
    check_tau(tau)?;
    let (a_hat, cache_a) = head_a.forward(a_raw)?;
    let (b_hat, cache_b) = head_b.forward(b_raw)?;
    let a = EmbeddingBatch::new(a_hat, super::Role::Image)?;
    let b = EmbeddingBatch::new(b_hat, super::Role::Text)?;
    let sims = SymmetricSimilarity::new(&a, &b, tau)?;
    let n = a.len();

    let value = symmetric_value(&sims, target)?;

    // For rows of q summing to one, d/dlogits of both CE(q, softmax) and
    // KL(q || softmax) is softmax - q. Logits are cos / tau with unit rows.
    let target_at = |i: usize, j: usize| match target {
        ContrastiveTarget::OneHot => f64::from(u8::from(i == j)),
        ContrastiveTarget::Labels(l) => l.rows[(i, j)],
    };
    let scale = 0.5 / (n as f64 * tau);
    let grad_logits = Matrix::from_fn(n, n, |i, j| {
        let fwd = sims.forward.p[(i, j)] - target_at(i, j);
        let bwd = sims.backward.p[(j, i)] - target_at(j, i);
        scale * (fwd + bwd)
    });
    let grad_a_hat = grad_logits.matmul(b.vectors());
    let grad_b_hat = grad_logits.t_matmul(a.vectors());
    let (a_grad, head_a_grad) = head_a.backward(&cache_a, &grad_a_hat);
    let (b_grad, head_b_grad) = head_b.backward(&cache_b, &grad_b_hat);
    Ok((
        value,
        ContrastiveGrads {
            a_raw: a_grad,
            b_raw: b_grad,
            head_a: head_a_grad,
            head_b: head_b_grad,
        },
    ))
}

/// Finite-difference step for the contrastive gradient checks.
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Largest relative error between [`contrastive_with_grads`] and central
/// differences, over the raw rows of both inputs and all parameters of both heads.
pub fn contrastive_grad_check(
    a_raw: &Matrix,
    head_a: &ProjectionHead,
    b_raw: &Matrix,
    head_b: &ProjectionHead,
    tau: f64,
    target: ContrastiveTarget<'_>,
) -> Result<f64, LossError> {
    let (_, grads) = contrastive_with_grads(a_raw, head_a, b_raw, head_b, tau, target)?;
    let analytic: Vec<f64> = [
        grads.a_raw.as_slice(),
        grads.b_raw.as_slice(),
        &grads.head_a.to_flat(),
        &grads.head_b.to_flat(),
    ]
    .concat();

    let na = a_raw.as_slice().len();
    let nb = b_raw.as_slice().len();
    let pa = head_a.param_count();
    let point: Vec<f64> = [
        a_raw.as_slice(),
        b_raw.as_slice(),
        &head_a.to_flat(),
        &head_b.to_flat(),
    ]
    .concat();
    let mut failure = None;
    let numeric = central_differences(&point, GRAD_CHECK_STEP, |x| {
        let a = Matrix::from_vec(a_raw.rows(), a_raw.cols(), x[..na].to_vec());
        let b = Matrix::from_vec(b_raw.rows(), b_raw.cols(), x[na..na + nb].to_vec());
        let ha = head_a.with_flat(&x[na + nb..na + nb + pa]);
        let hb = head_b.with_flat(&x[na + nb + pa..]);
        match contrastive_value(&a, &ha, &b, &hb, tau, target) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(&analytic, &numeric))
}
