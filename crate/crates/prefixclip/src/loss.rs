//! Contrastive objectives over a temperature-scaled similarity matrix.
//!
//! Both objectives act on the same `[B, B]` logits (rows are images,
//! columns are texts, both sides L2-normalized, scaled by the learned
//! temperature). The pair loss treats the diagonal as the only positives;
//! the multi-positive loss averages log-probabilities over every same-label
//! pair, out of the log, and reduces to the pair loss when all labels are
//! distinct. The two are computed through deliberately different routes
//! (diagonal gather vs. mask weighting) so they can cross-check each other.

use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contrastive loss needs at least two samples, got {0}")]
    BatchTooSmall(usize),
    #[error("positive mask covers {mask} samples but the batch has {batch}")]
    MaskMismatch { mask: usize, batch: usize },
    #[error("similarity needs matching embedding shapes, image {image:?} vs text {text:?}")]
    EmbeddingMismatch { image: Vec<usize>, text: Vec<usize> },
}

/// Temperature ceiling; the clamp stops gradient flow when it binds.
pub const TAU_MAX: f64 = 100.0;

/// Temperature-scaled cosine similarities for one batch.
pub struct SimilarityMatrix {
    /// `[B, B]` logits, rows are images, columns are texts.
    pub logits: Tensor,
    /// Temperature value after the ceiling, for logging.
    pub tau: f64,
    pub batch: usize,
}

/// Normalizes both embedding matrices, forms `u v^T` and scales it by
/// `min(exp(log_tau), TAU_MAX)` inside the graph.
pub fn similarity_matrix(
    image_emb: &Tensor,
    text_emb: &Tensor,
    log_tau: &Tensor,
) -> Result<SimilarityMatrix, LossError> {
    let (is, ts) = (image_emb.shape(), text_emb.shape());
    if is.len() != 2 || is != ts {
        return Err(LossError::EmbeddingMismatch { image: is, text: ts });
    }
    let b = is[0];
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let tau = log_tau.exp()?.clamp_max(TAU_MAX)?;
    let u = image_emb.l2_normalize_rows()?;
    let v = text_emb.l2_normalize_rows()?;
    let logits = u.matmul(&v.transpose()?)?.mul(&tau)?;
    Ok(SimilarityMatrix { logits, tau: tau.item(), batch: b })
}

fn diagonal_map(b: usize) -> Rc<Vec<usize>> {
    Rc::new((0..b).map(|i| i * b + i).collect())
}

/// Symmetric pair loss: mean negative log-probability of the diagonal under
/// row-wise softmax, in both directions, summed.
pub fn clip_loss(sim: &SimilarityMatrix) -> Result<Tensor, LossError> {
    let b = sim.batch;
    let diag = diagonal_map(b);
    let i2t = sim
        .logits
        .log_softmax_last()?
        .gather(Rc::clone(&diag), &[b])?
        .mean_all()?
        .scale(-1.0)?;
    let t2i = sim
        .logits
        .transpose()?
        .log_softmax_last()?
        .gather(diag, &[b])?
        .mean_all()?
        .scale(-1.0)?;
    Ok(i2t.add(&t2i)?)
}

/// Which batch entries count as positives for each anchor. Built from
/// labels: entries sharing a label are mutual positives, and every entry is
/// its own positive.
pub struct PositiveMask {
    pub batch: usize,
    mask: Vec<bool>,
    counts: Vec<usize>,
}

impl PositiveMask {
    pub fn from_labels(labels: &[u64]) -> PositiveMask {
        let b = labels.len();
        let mut mask = vec![false; b * b];
        let mut counts = vec![0usize; b];
        for i in 0..b {
            for j in 0..b {
                if labels[i] == labels[j] {
                    mask[i * b + j] = true;
                    counts[i] += 1;
                }
            }
        }
        PositiveMask { batch: b, mask, counts }
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.batch + j]
    }

    pub fn positives_of(&self, i: usize) -> usize {
        self.counts[i]
    }

    /// Per-cell weights `1 / (B * |P(row)|)` on positive cells. The same
    /// matrix serves both directions because the label relation is
    /// symmetric while the row count always refers to the anchor.
    fn weights(&self) -> Vec<f64> {
        let b = self.batch;
        let mut w = vec![0.0; b * b];
        for i in 0..b {
            let wi = 1.0 / (b as f64 * self.counts[i] as f64);
            for j in 0..b {
                if self.mask[i * b + j] {
                    w[i * b + j] = wi;
                }
            }
        }
        w
    }
}

/// Multi-positive loss: for each anchor, the mean over its positives of the
/// negative log-probability (mean outside the log), both directions summed.
pub fn unicl_loss(sim: &SimilarityMatrix, positives: &PositiveMask) -> Result<Tensor, LossError> {
    let b = sim.batch;
    if positives.batch != b {
        return Err(LossError::MaskMismatch { mask: positives.batch, batch: b });
    }
    let w = Tensor::from_vec(&[b, b], positives.weights())?;
    let i2t = sim.logits.log_softmax_last()?.mul(&w)?.sum_all()?.scale(-1.0)?;
    let t2i = sim
        .logits
        .transpose()?
        .log_softmax_last()?
        .mul(&w)?
        .sum_all()?
        .scale(-1.0)?;
    Ok(i2t.add(&t2i)?)
}
