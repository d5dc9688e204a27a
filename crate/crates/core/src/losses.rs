//! The SimPLE pair-classification loss family.
//!
//! All variants share the `(S + b)` argument convention:
//!
//! * `naive`:        `y·softplus(−(S+b)) + (1−y)·softplus(S+b)`
//! * `balanced`:     `α·y·softplus(−(S+b)) + (1−α)(1−y)·softplus(S+b)`
//! * `simple_final`: `α·y·softplus(−(S+b)/r) + (1−α)(1−y)·softplus(r(S+b))`

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{compensated_sum, sigmoid, softplus};
use crate::similarity::{SimilarityError, SimilarityKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("empty pair batch")]
    EmptyBatch,
    #[error("pair batch has {scores} scores but {labels} labels")]
    Mismatch { scores: usize, labels: usize },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Naive,
    Balanced,
    SimpleFinal,
}

impl std::str::FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(LossVariant::Naive),
            "balanced" => Ok(LossVariant::Balanced),
            "simple_final" => Ok(LossVariant::SimpleFinal),
            other => Err(format!("unknown loss variant `{other}`")),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::Naive => "naive",
            LossVariant::Balanced => "balanced",
            LossVariant::SimpleFinal => "simple_final",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Reverse-mining strength; `r = 1` disables mining.
    pub r: f64,
    /// Positive/negative rebalancing weight.
    pub alpha: f64,
    /// Constant bias; `−b` is the pair decision threshold.
    pub b: f64,
    pub b_learnable: bool,
    pub similarity: SimilarityKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::SimpleFinal,
            r: 3.0,
            alpha: 0.001,
            b: 0.0,
            b_learnable: true,
            similarity: SimilarityKind::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(LossError::Config(format!("r must be positive, got {}", self.r)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LossError::Config(format!("alpha must lie strictly inside (0, 1), got {}", self.alpha)));
        }
        if !self.b.is_finite() {
            return Err(LossError::Config("b must be finite".into()));
        }
        self.similarity.validate()?;
        Ok(())
    }

    /// `(positive weight, negative weight, mining r)` for the variant.
    fn kernel(&self) -> (f64, f64, f64) {
        match self.variant {
            LossVariant::Naive => (1.0, 1.0, 1.0),
            LossVariant::Balanced => (self.alpha, 1.0 - self.alpha, 1.0),
            LossVariant::SimpleFinal => (self.alpha, 1.0 - self.alpha, self.r),
        }
    }
}

/// Scores of every formed pair, with same-class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// `(batch row, queue slot)` for each pair.
    pub provenance: Vec<(usize, usize)>,
}

impl PairBatch {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, LossError> {
        if scores.len() != labels.len() {
            return Err(LossError::Mismatch { scores: scores.len(), labels: labels.len() });
        }
        Ok(Self { scores, labels, provenance: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }
}

/// Loss of a single pair with score `s`.
pub fn pair_loss(cfg: &LossConfig, s: f64, positive: bool) -> f64 {
    let (wp, wn, r) = cfg.kernel();
    let t = s + cfg.b;
    if positive {
        wp * softplus(-t / r)
    } else {
        wn * softplus(r * t)
    }
}

/// `(∂ℓ/∂s, ∂ℓ/∂b)`; the two coincide because `s` and `b` enter as `s + b`.
pub fn pair_loss_grad(cfg: &LossConfig, s: f64, positive: bool) -> (f64, f64) {
    let (wp, wn, r) = cfg.kernel();
    let t = s + cfg.b;
    let d = if positive { -(wp / r) * sigmoid(-t / r) } else { wn * r * sigmoid(r * t) };
    (d, d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub d_scores: Vec<f64>,
    pub d_b: f64,
}

/// Pooled mean over every pair in the batch.
pub fn batch_loss(cfg: &LossConfig, pairs: &PairBatch) -> Result<BatchLoss, LossError> {
    if pairs.scores.len() != pairs.labels.len() {
        return Err(LossError::Mismatch { scores: pairs.scores.len(), labels: pairs.labels.len() });
    }
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = pairs.len() as f64;
    let loss = compensated_sum(pairs.scores.iter().zip(&pairs.labels).map(|(&s, &y)| pair_loss(cfg, s, y))) / n;
    let d_scores: Vec<f64> = pairs
        .scores
        .iter()
        .zip(&pairs.labels)
        .map(|(&s, &y)| pair_loss_grad(cfg, s, y).0 / n)
        .collect();
    let d_b = compensated_sum(d_scores.iter().copied());
    Ok(BatchLoss { loss, d_scores, d_b })
}

/// `Q1(t) = log(1 + exp(−t/r))`, `Q2(t) = log(1 + exp(r·t))`.
pub fn mining_curves(r: f64, t: f64) -> (f64, f64) {
    (softplus(-t / r), softplus(r * t))
}
