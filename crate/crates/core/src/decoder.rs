//! Image-tag recognition decoder.
//!
//! Disease-class queries attend over an image's visual tokens with one
//! scaled dot-product attention head; a shared linear readout turns each
//! query's context vector into a tag logit.
//!
//! ```text
//! attn    = rowsoftmax((Q Wq)(Z Wk)^T / sqrt(d))
//! context = attn (Z Wv)
//! prob_j  = sigmoid(<context_j, w_out> + b_out)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcheck::{central_differences, max_relative_error};
use crate::linalg::{dot, row_softmax, row_softmax_backward, Matrix};
use crate::parsing::TagVector;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecoderError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{probs} probabilities for {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

/// Gradients with the layout of [`DecoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl DecoderParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            wq: Matrix::identity(dim),
            wk: Matrix::identity(dim),
            wv: Matrix::identity(dim),
            w_out: vec![0.0; dim],
            b_out: 0.0,
        }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let limit = (3.0 / dim as f64).sqrt();
        let mut m = || Matrix::from_fn(dim, dim, |_, _| rng.gen_range(-limit..limit));
        let wq = m();
        let wk = m();
        let wv = m();
        let w_out = (0..dim).map(|_| rng.gen_range(-limit..limit)).collect();
        let b_out = rng.gen_range(-0.5..0.5);
        Self {
            wq,
            wk,
            wv,
            w_out,
            b_out,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_out.len()
    }

    pub fn is_finite(&self) -> bool {
        self.wq.is_finite()
            && self.wk.is_finite()
            && self.wv.is_finite()
            && self.w_out.iter().all(|x| x.is_finite())
            && self.b_out.is_finite()
    }

    /// Parameters flattened as `Wq, Wk, Wv, w_out, b_out`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.wq.as_slice());
        v.extend_from_slice(self.wk.as_slice());
        v.extend_from_slice(self.wv.as_slice());
        v.extend_from_slice(&self.w_out);
        v.push(self.b_out);
        v
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Self {
        let dd = dim * dim;
        assert_eq!(flat.len(), 3 * dd + dim + 1);
        Self {
            wq: Matrix::from_vec(dim, dim, flat[..dd].to_vec()),
            wk: Matrix::from_vec(dim, dim, flat[dd..2 * dd].to_vec()),
            wv: Matrix::from_vec(dim, dim, flat[2 * dd..3 * dd].to_vec()),
            w_out: flat[3 * dd..3 * dd + dim].to_vec(),
            b_out: flat[3 * dd + dim],
        }
    }

    fn check(&self, tokens: &Matrix, queries: &Matrix) -> Result<(), DecoderError> {
        let d = self.dim();
        if tokens.rows() == 0 {
            return Err(DecoderError::Empty("visual tokens"));
        }
        if queries.rows() == 0 {
            return Err(DecoderError::Empty("queries"));
        }
        let square = |m: &Matrix| m.shape() == (d, d);
        if tokens.cols() != d
            || queries.cols() != d
            || !square(&self.wq)
            || !square(&self.wk)
            || !square(&self.wv)
        {
            return Err(DecoderError::DimensionMismatch(format!(
                "tokens {:?}, queries {:?}, readout dim {d}",
                tokens.shape(),
                queries.shape()
            )));
        }
        Ok(())
    }
}

impl DecoderGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.wq.as_slice());
        v.extend_from_slice(self.wk.as_slice());
        v.extend_from_slice(self.wv.as_slice());
        v.extend_from_slice(&self.w_out);
        v.push(self.b_out);
        v
    }
}

/// Intermediate values of one decoder evaluation.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub attention: Matrix,
    pub context: Matrix,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    queries_proj: Matrix,
    keys: Matrix,
    values: Matrix,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs the decoder and keeps every intermediate.
pub fn decode_trace(
    tokens: &Matrix,
    queries: &Matrix,
    params: &DecoderParams,
) -> Result<DecoderTrace, DecoderError> {
    params.check(tokens, queries)?;
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let queries_proj = queries.matmul(&params.wq);
    let keys = tokens.matmul(&params.wk);
    let values = tokens.matmul(&params.wv);
    let attention = row_softmax(&queries_proj.matmul_t(&keys).scale(scale));
    let context = attention.matmul(&values);
    let logits: Vec<f64> = (0..context.rows())
        .map(|j| dot(context.row(j), &params.w_out) + params.b_out)
        .collect();
    let probs = logits.iter().map(|&l| sigmoid(l)).collect();
    Ok(DecoderTrace {
        attention,
        context,
        logits,
        probs,
        queries_proj,
        keys,
        values,
    })
}

/// Per-class tag probabilities, one per query row.
pub fn decode_tags(
    tokens: &Matrix,
    queries: &Matrix,
    params: &DecoderParams,
) -> Result<Vec<f64>, DecoderError> {
    Ok(decode_trace(tokens, queries, params)?.probs)
}

/// Binary cross-entropy of one sample, averaged over classes:
/// `-(1/M) sum_j [l_j ln p_j + (1 - l_j) ln(1 - p_j)]` with clamped `p`.
pub fn bce_loss(probs: &[f64], labels: &TagVector) -> Result<f64, DecoderError> {
    if probs.len() != labels.len() {
        return Err(DecoderError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(DecoderError::Empty("probabilities"));
    }
    let mut sum = 0.0;
    for (&p, &l) in probs.iter().zip(&labels.0) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum += if l == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(-sum / probs.len() as f64)
}

/// Mean of [`bce_loss`] over a batch of samples.
pub fn batch_bce_loss(samples: &[(Vec<f64>, TagVector)]) -> Result<f64, DecoderError> {
    if samples.is_empty() {
        return Err(DecoderError::Empty("batch"));
    }
    let mut sum = 0.0;
    for (probs, labels) in samples {
        sum += bce_loss(probs, labels)?;
    }
    Ok(sum / samples.len() as f64)
}

/// `bce_loss(decode_tags(..))` and its gradient w.r.t. every decoder parameter.
pub fn bce_with_grads(
    tokens: &Matrix,
    queries: &Matrix,
    params: &DecoderParams,
    labels: &TagVector,
) -> Result<(f64, DecoderGrads), DecoderError> {
    let trace = decode_trace(tokens, queries, params)?;
    let loss = bce_loss(&trace.probs, labels)?;
    let m = trace.probs.len() as f64;
    let scale = 1.0 / (params.dim() as f64).sqrt();

    // d loss / d logit_j = (p_j - l_j) / M, zero where the clamp is active.
    let grad_logits: Vec<f64> = trace
        .probs
        .iter()
        .zip(&labels.0)
        .map(|(&p, &l)| {
            if (BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                (p - f64::from(l)) / m
            } else {
                0.0
            }
        })
        .collect();
    let b_out = grad_logits.iter().sum();
    let mut w_out = vec![0.0; params.dim()];
    for (j, g) in grad_logits.iter().enumerate() {
        for (w, c) in w_out.iter_mut().zip(trace.context.row(j)) {
            *w += g * c;
        }
    }
    let grad_context = Matrix::from_fn(grad_logits.len(), params.dim(), |j, k| {
        grad_logits[j] * params.w_out[k]
    });
    let grad_attention = grad_context.matmul_t(&trace.values);
    let grad_values = trace.attention.t_matmul(&grad_context);
    let grad_scores = row_softmax_backward(&trace.attention, &grad_attention).scale(scale);
    let grad_queries_proj = grad_scores.matmul(&trace.keys);
    let grad_keys = grad_scores.t_matmul(&trace.queries_proj);

    Ok((
        loss,
        DecoderGrads {
            wq: queries.t_matmul(&grad_queries_proj),
            wk: tokens.t_matmul(&grad_keys),
            wv: tokens.t_matmul(&grad_values),
            w_out,
            b_out,
        },
    ))
}

/// Finite-difference step used by [`decoder_grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Largest relative error between the analytic decoder gradient and central
/// finite differences over every parameter.
pub fn decoder_grad_check(
    tokens: &Matrix,
    queries: &Matrix,
    params: &DecoderParams,
    labels: &TagVector,
) -> Result<f64, DecoderError> {
    let (_, grads) = bce_with_grads(tokens, queries, params, labels)?;
    let dim = params.dim();
    let numeric = central_differences(&params.to_flat(), GRAD_CHECK_STEP, |flat| {
        let p = DecoderParams::from_flat(dim, flat);
        let probs = decode_tags(tokens, queries, &p).expect("shapes checked above");
        bce_loss(&probs, labels).expect("lengths checked above")
    });
    Ok(max_relative_error(&grads.to_flat(), &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64) -> (Matrix, Matrix, DecoderParams, TagVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..=8);
        let mz = rng.gen_range(1..=6);
        let mq = rng.gen_range(1..=5);
        let tokens = Matrix::from_fn(mz, d, |_, _| rng.gen_range(-1.0..1.0));
        let queries = Matrix::from_fn(mq, d, |_, _| rng.gen_range(-1.0..1.0));
        let params = DecoderParams::random(d, &mut rng);
        let labels = TagVector((0..mq).map(|_| rng.gen_range(0..=1)).collect());
        (tokens, queries, params, labels)
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let tokens = Matrix::from_vec(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        let queries = Matrix::from_vec(2, 2, vec![1.0, 2.0, -3.0, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DecoderParams::random(2, &mut rng);
        let trace = decode_trace(&tokens, &queries, &params).unwrap();
        for x in trace.attention.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let value = tokens.matmul(&params.wv);
        for j in 0..2 {
            for k in 0..2 {
                assert!((trace.context[(j, k)] - value[(0, k)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn output_length_matches_queries() {
        for seed in 0..10 {
            let (tokens, queries, params, _) = random_instance(seed);
            let probs = decode_tags(&tokens, &queries, &params).unwrap();
            assert_eq!(probs.len(), queries.rows());
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let params = DecoderParams::identity(2);
        let err = decode_tags(&Matrix::zeros(2, 3), &Matrix::zeros(1, 2), &params);
        assert!(matches!(err, Err(DecoderError::DimensionMismatch(_))));
    }

    #[test]
    fn bce_reference_points() {
        let labels = TagVector(vec![1, 0, 1]);
        let half = bce_loss(&[0.5; 3], &labels).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = bce_loss(&[1.0, 0.0, 1.0], &labels).unwrap();
        assert!((0.0..=1e-11).contains(&perfect));
        assert_eq!(
            bce_loss(&[0.5], &labels),
            Err(DecoderError::LengthMismatch {
                probs: 1,
                labels: 3
            })
        );
    }

    #[test]
    fn zero_readout_ignores_the_image() {
        let (tokens, queries, mut params, labels) = random_instance(11);
        params.w_out.iter_mut().for_each(|w| *w = 0.0);
        let probs = decode_tags(&tokens, &queries, &params).unwrap();
        for p in &probs {
            assert_eq!(*p, sigmoid(params.b_out));
        }
        let (_, g) = bce_with_grads(&tokens, &queries, &params, &labels).unwrap();
        assert!(g.wv.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.wq.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.wk.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grad_check_passes_and_is_deterministic() {
        for seed in 0..20 {
            let (tokens, queries, params, labels) = random_instance(seed);
            let err = decoder_grad_check(&tokens, &queries, &params, &labels).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
            let again = decoder_grad_check(&tokens, &queries, &params, &labels).unwrap();
            assert_eq!(err.to_bits(), again.to_bits());
        }
    }

    #[test]
    fn flat_round_trip() {
        let (_, _, params, _) = random_instance(4);
        assert_eq!(
            DecoderParams::from_flat(params.dim(), &params.to_flat()),
            params
        );
    }
}
