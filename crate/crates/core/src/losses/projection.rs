use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LossError, MIN_ROW_NORM};
use crate::linalg::{dot, norm, Matrix};

/// Two-layer projection `x -> tanh(x W1 + b1) W2 + b2`, followed by row-wise
/// L2 normalization in [`ProjectionHead::forward`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Gradients with the same layout as [`ProjectionHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Matrix,
    hidden: Matrix,
    output_norms: Vec<f64>,
    normalized: Matrix,
}

impl ProjectionHead {
    /// `W1 = I`, `W2 = I`, zero biases.
    pub fn identity(dim: usize) -> Self {
        Self {
            w1: Matrix::identity(dim),
            b1: vec![0.0; dim],
            w2: Matrix::identity(dim),
            b2: vec![0.0; dim],
        }
    }

    /// Uniform Glorot-style initialization.
    pub fn random<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
        };
        let w1 = uniform(input, hidden);
        let w2 = uniform(hidden, output);
        let b1 = (0..hidden).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let b2 = (0..output).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Self { w1, b1, w2, b2 }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|x| x.is_finite())
    }

    fn check_shapes(&self, input: &Matrix) -> Result<(), LossError> {
        let h = self.w1.cols();
        if input.cols() != self.w1.rows()
            || self.b1.len() != h
            || self.w2.rows() != h
            || self.b2.len() != self.w2.cols()
        {
            return Err(LossError::ShapeMismatch(format!(
                "input dim {} vs head {}x{} -> {}x{}",
                input.cols(),
                self.w1.rows(),
                h,
                self.w2.rows(),
                self.w2.cols()
            )));
        }
        Ok(())
    }

    /// Projects and normalizes every row. Fails with `ZeroVector` when a row's
    /// pre-normalization norm is below [`MIN_ROW_NORM`].
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ProjectionCache), LossError> {
        self.check_shapes(input)?;
        let hidden = input
            .matmul(&self.w1)
            .add_row_vector(&self.b1)
            .map(f64::tanh);
        let out = hidden.matmul(&self.w2).add_row_vector(&self.b2);
        let mut normalized = out.clone();
        let mut output_norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let n = norm(out.row(i));
            if n < MIN_ROW_NORM || !n.is_finite() {
                return Err(LossError::ZeroVector { row: i, norm: n });
            }
            for x in normalized.row_mut(i) {
                *x /= n;
            }
            output_norms.push(n);
        }
        let cache = ProjectionCache {
            input: input.clone(),
            hidden,
            output_norms,
            normalized: normalized.clone(),
        };
        Ok((normalized, cache))
    }

    /// Backpropagates `grad_out` (w.r.t. the normalized output) to the input
    /// rows and the head parameters.
    pub fn backward(&self, cache: &ProjectionCache, grad_out: &Matrix) -> (Matrix, HeadGrads) {
        // d(y/|y|) = (g - u (u . g)) / |y|
        let mut grad_pre = Matrix::zeros(grad_out.rows(), grad_out.cols());
        for i in 0..grad_out.rows() {
            let u = cache.normalized.row(i);
            let g = grad_out.row(i);
            let radial = dot(u, g);
            let n = cache.output_norms[i];
            for ((o, &gi), &ui) in grad_pre.row_mut(i).iter_mut().zip(g).zip(u) {
                *o = (gi - ui * radial) / n;
            }
        }
        let w2 = cache.hidden.t_matmul(&grad_pre);
        let b2 = grad_pre.column_sums();
        let grad_hidden = grad_pre.matmul_t(&self.w2);
        let mut grad_act = grad_hidden;
        for (g, h) in grad_act
            .as_mut_slice()
            .iter_mut()
            .zip(cache.hidden.as_slice())
        {
            *g *= 1.0 - h * h;
        }
        let w1 = cache.input.t_matmul(&grad_act);
        let b1 = grad_act.column_sums();
        let grad_input = grad_act.matmul_t(&self.w1);
        (grad_input, HeadGrads { w1, b1, w2, b2 })
    }

    /// Parameters flattened as `W1, b1, W2, b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }

    /// Inverse of [`to_flat`](Self::to_flat) for a head of the same shape.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.param_count());
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let (r1, c1) = self.w1.shape();
        let (r2, c2) = self.w2.shape();
        let w1 = Matrix::from_vec(r1, c1, take(r1 * c1));
        let b1 = take(c1);
        let w2 = Matrix::from_vec(r2, c2, take(r2 * c2));
        let b2 = take(c2);
        Self { w1, b1, w2, b2 }
    }

    pub fn param_count(&self) -> usize {
        self.w1.as_slice().len() + self.b1.len() + self.w2.as_slice().len() + self.b2.len()
    }
}

impl HeadGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{project, EmbeddingBatch, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_head_keeps_one_hot_rows() {
        let head = ProjectionHead::identity(3);
        let x = Matrix::from_vec(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (out, _) = head.forward(&x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn identity_head_is_near_identity_in_linear_region() {
        let head = ProjectionHead::identity(3);
        let u = [0.48, 0.6, 0.64];
        let x = Matrix::from_vec(1, 3, u.iter().map(|v| v * 1e-6).collect());
        let (out, _) = head.forward(&x).unwrap();
        for (o, e) in out.row(0).iter().zip(u) {
            assert!((o - e).abs() < 1e-11);
        }
    }

    #[test]
    fn outputs_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = ProjectionHead::random(6, 5, 4, &mut rng);
        let x = Matrix::from_fn(5, 6, |_, _| rng.gen_range(-2.0..2.0));
        let batch = EmbeddingBatch::new(x, Role::Image).unwrap();
        let out = project(&batch, &head).unwrap();
        for i in 0..out.len() {
            assert!((norm(out.vectors().row(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_with_zero_bias_fails() {
        let head = ProjectionHead::identity(2);
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            head.forward(&x),
            Err(LossError::ZeroVector { row: 1, .. })
        ));
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ProjectionHead::random(3, 4, 2, &mut rng);
        assert_eq!(head.with_flat(&head.to_flat()), head);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let head = ProjectionHead::identity(2);
        assert!(matches!(
            head.forward(&Matrix::zeros(1, 3)),
            Err(LossError::ShapeMismatch(_))
        ));
    }
}
