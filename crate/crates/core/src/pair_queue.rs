//! FIFO queue of momentum-encoded features and batch×queue pair formation.

use std::collections::VecDeque;

use thiserror::Error;

use crate::losses::PairBatch;
use crate::numkit::{dot, norm2, Matrix};
use crate::similarity::{SimilarityError, SimilarityKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("queue config: {0}")]
    Config(String),
    #[error("queue is empty; warm it up before forming pairs")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub feature: Vec<f64>,
    pub label: usize,
    pub step_enqueued: u64,
    norm: f64,
}

#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
    next_step: u64,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, QueueError> {
        if capacity == 0 || dim == 0 {
            return Err(QueueError::Config(format!("capacity {capacity} and dim {dim} must be positive")));
        }
        Ok(Self { capacity, dim, entries: VecDeque::with_capacity(capacity), next_step: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Appends the batch, evicting the oldest entries once full.
    pub fn enqueue_batch(&mut self, features: &Matrix, labels: &[usize]) -> Result<(), QueueError> {
        if features.rows() != labels.len() {
            return Err(QueueError::Shape(format!("{} feature rows, {} labels", features.rows(), labels.len())));
        }
        if features.cols() != self.dim {
            return Err(QueueError::Shape(format!("features have {} columns, queue holds {}", features.cols(), self.dim)));
        }
        if features.rows() > self.capacity {
            return Err(QueueError::Config(format!(
                "batch of {} exceeds queue capacity {}",
                features.rows(),
                self.capacity
            )));
        }
        for (row, &label) in features.row_iter().zip(labels) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                feature: row.to_vec(),
                label,
                step_enqueued: self.next_step,
                norm: norm2(row),
            });
            self.next_step += 1;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Matrix, labels: &[usize]) -> Result<(), QueueError> {
        if self.entries.is_empty() {
            return Err(QueueError::Empty);
        }
        if batch.rows() != labels.len() || batch.cols() != self.dim {
            return Err(QueueError::Shape(format!(
                "batch {:?} with {} labels against queue dim {}",
                batch.shape(),
                labels.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// All `m × len` batch-vs-queue pairs, row-major over the batch.
    pub fn form_pairs(
        &self,
        batch: &Matrix,
        labels: &[usize],
        sim: &SimilarityKind,
    ) -> Result<PairBatch, QueueError> {
        self.check_batch(batch, labels)?;
        let q = self.entries.len();
        let mut out = PairBatch {
            scores: Vec::with_capacity(batch.rows() * q),
            labels: Vec::with_capacity(batch.rows() * q),
            provenance: Vec::with_capacity(batch.rows() * q),
        };
        for (i, (x, &y)) in batch.row_iter().zip(labels).enumerate() {
            let nx = norm2(x);
            for (j, e) in self.entries.iter().enumerate() {
                if sim_needs_nonzero(sim) && (nx == 0.0 || e.norm == 0.0) {
                    sim.score(x, &e.feature)?;
                }
                out.scores.push(sim.score_from_parts(dot(x, &e.feature), nx, e.norm));
                out.labels.push(y == e.label);
                out.provenance.push((i, j));
            }
        }
        Ok(out)
    }

    /// Back-propagates pair-score gradients onto the batch-side features
    /// only; queue entries are constants. Returns `(∂L/∂batch, ∂L/∂b_θ)`.
    pub fn batch_feature_grads(
        &self,
        batch: &Matrix,
        pairs: &PairBatch,
        d_scores: &[f64],
        sim: &SimilarityKind,
    ) -> Result<(Matrix, f64), QueueError> {
        if d_scores.len() != pairs.provenance.len() {
            return Err(QueueError::Shape("gradient length differs from pair count".into()));
        }
        let mut grad = Matrix::zeros(batch.rows(), batch.cols());
        let mut d_btheta = 0.0;
        let norms: Vec<f64> = batch.row_iter().map(norm2).collect();
        for (&(i, j), &g) in pairs.provenance.iter().zip(d_scores) {
            if g == 0.0 {
                continue;
            }
            let x = batch.row(i);
            let e = self
                .entries
                .get(j)
                .ok_or_else(|| QueueError::Shape(format!("queue slot {j} out of range")))?;
            let c = sim.coeffs_from_parts(dot(x, &e.feature), norms[i], e.norm);
            let gx = grad.row_mut(i);
            for ((gv, &xv), &qv) in gx.iter_mut().zip(x).zip(&e.feature) {
                *gv += g * (c.along_other * qv + c.self_1 * xv);
            }
            d_btheta += g * c.d_btheta;
        }
        Ok((grad, d_btheta))
    }
}

fn sim_needs_nonzero(sim: &SimilarityKind) -> bool {
    matches!(sim.kind, crate::similarity::SimilarityFn::Cosine | crate::similarity::SimilarityFn::Angular)
}

/// Fraction of positive pairs.
pub fn pos_neg_ratio(pairs: &PairBatch) -> Result<f64, QueueError> {
    if pairs.is_empty() {
        return Err(QueueError::Empty);
    }
    Ok(pairs.num_positive() as f64 / pairs.len() as f64)
}
