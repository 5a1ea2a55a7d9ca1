//! Triplet objective for the verification embedding, with a linear surrogate
//! network small enough to train in a unit test.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::VerifyError;

/// `f(x) = W x` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEmbedder {
    pub weights: DMatrix<f64>,
}

impl LinearEmbedder {
    pub fn new(weights: DMatrix<f64>) -> Self {
        LinearEmbedder { weights }
    }

    pub fn identity(dim: usize) -> Self {
        LinearEmbedder { weights: DMatrix::identity(dim, dim) }
    }

    /// Gaussian initialisation scaled by `1/sqrt(in)`.
    pub fn random(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (input.max(1) as f64).sqrt()).expect("positive std");
        LinearEmbedder { weights: DMatrix::from_fn(output, input, |_, _| normal.sample(rng)) }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn embed(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weights * x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<DVector<f64>>,
    pub positives: Vec<DVector<f64>>,
    pub negatives: Vec<DVector<f64>>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn new(
        anchors: Vec<DVector<f64>>,
        positives: Vec<DVector<f64>>,
        negatives: Vec<DVector<f64>>,
        margin: f64,
    ) -> Result<Self, VerifyError> {
        let b = TripletBatch { anchors, positives, negatives, margin };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        if self.anchors.len() != self.positives.len() || self.anchors.len() != self.negatives.len() {
            return Err(VerifyError::InvalidBatch(format!(
                "lengths differ: {} anchors, {} positives, {} negatives",
                self.anchors.len(),
                self.positives.len(),
                self.negatives.len()
            )));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(VerifyError::InvalidBatch(format!("margin must be finite and positive, got {}", self.margin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn triplets(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>, &DVector<f64>)> {
        self.anchors.iter().zip(&self.positives).zip(&self.negatives).map(|((a, p), n)| (a, p, n))
    }
}

/// `sum_i [ |f(a_i) - f(p_i)|^2 - |f(a_i) - f(n_i)|^2 + margin ]_+`
pub fn triplet_loss(batch: &TripletBatch, embed: &LinearEmbedder) -> f64 {
    batch
        .triplets()
        .map(|(a, p, n)| {
            let dp = embed.embed(&(a - p)).norm_squared();
            let dn = embed.embed(&(a - n)).norm_squared();
            (dp - dn + batch.margin).max(0.0)
        })
        .sum()
}

/// Loss and its gradient with respect to the weights.
pub fn triplet_loss_and_grad(batch: &TripletBatch, embed: &LinearEmbedder) -> (f64, DMatrix<f64>) {
    let w = &embed.weights;
    let mut loss = 0.0;
    let mut outer = DMatrix::zeros(w.ncols(), w.ncols());
    for (a, p, n) in batch.triplets() {
        let u = a - p;
        let v = a - n;
        let term = (w * &u).norm_squared() - (w * &v).norm_squared() + batch.margin;
        if term > 0.0 {
            loss += term;
            outer += &u * u.transpose() - &v * v.transpose();
        }
    }
    (loss, 2.0 * w * outer)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
}

/// Plain gradient descent on the batch-mean triplet loss.
///
/// `next_batch` is called once per step with the step index.
pub fn train_toy_embedder(
    init: LinearEmbedder,
    mut next_batch: impl FnMut(usize) -> TripletBatch,
    cfg: TrainConfig,
) -> Result<LinearEmbedder, VerifyError> {
    let mut model = init;
    for step in 0..cfg.steps {
        let batch = next_batch(step);
        batch.validate()?;
        if batch.is_empty() {
            continue;
        }
        let (loss, grad) = triplet_loss_and_grad(&batch, &model);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(VerifyError::NonFiniteLoss { step });
        }
        model.weights -= grad * (cfg.lr / batch.len() as f64);
        if step % 100 == 0 {
            log::debug!("triplet step {step}: loss {:.6}", loss / batch.len() as f64);
        }
    }
    Ok(model)
}
