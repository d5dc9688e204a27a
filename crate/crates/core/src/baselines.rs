//! Comparator losses: proxy softmax cross-entropy, its generalized-inner
//! variants (CE* / CosFace*), and the proxy-free contrastive and triplet
//! losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::PairBatch;
use crate::numkit::{dot, norm2, Matrix};
use crate::similarity::{SimilarityError, SimilarityKind};
use crate::trainer::{Method, RunLog};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("baseline config: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("norm probe needs a softmax_ce run, got {0}")]
    WrongMethod(Method),
    #[error("run log has no epochs")]
    EmptyLog,
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Learnable class proxies `w_i` (rows of `proxies`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank {
    pub proxies: Matrix,
    /// Use `w_i/‖w_i‖` in [`softmax_ce`] logits.
    pub normalize_proxies: bool,
    /// Multiplier on [`softmax_ce`] logits.
    pub scale: f64,
    pub b_theta: f64,
    pub b_theta_learnable: bool,
    /// Additive angular margin on non-target logits of [`proxy_gip_ce`].
    pub margin: f64,
}

impl ProxyBank {
    pub fn new(proxies: Matrix) -> Result<Self, BaselineError> {
        let bank = Self {
            proxies,
            normalize_proxies: false,
            scale: 1.0,
            b_theta: 0.0,
            b_theta_learnable: false,
            margin: 0.0,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.proxies.rows() < 2 {
            return Err(BaselineError::Config("need at least two class proxies".into()));
        }
        if !self.proxies.is_finite() {
            return Err(BaselineError::Config("non-finite proxy".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(BaselineError::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(BaselineError::Config(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.rows()
    }

    fn check(&self, feature: &[f64], label: usize) -> Result<(), BaselineError> {
        if label >= self.num_classes() {
            return Err(BaselineError::Label { label, classes: self.num_classes() });
        }
        if feature.len() != self.proxies.cols() {
            return Err(BaselineError::Shape(format!(
                "feature dim {} vs proxy dim {}",
                feature.len(),
                self.proxies.cols()
            )));
        }
        Ok(())
    }

    /// Index of the largest [`softmax_ce`] logit.
    pub fn predict(&self, feature: &[f64]) -> usize {
        let logits = self.ce_logits(feature);
        argmax(&logits)
    }

    fn ce_logits(&self, feature: &[f64]) -> Vec<f64> {
        self.proxies
            .row_iter()
            .map(|w| {
                let raw = dot(w, feature);
                let l = if self.normalize_proxies {
                    let n = norm2(w);
                    if n > 0.0 {
                        raw / n
                    } else {
                        0.0
                    }
                } else {
                    raw
                };
                self.scale * l
            })
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and gradients of one example under a proxy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyLossOutput {
    pub loss: f64,
    pub d_feature: Vec<f64>,
    pub d_proxies: Matrix,
    pub d_btheta: f64,
}

/// `log(1 + Σ_{i≠y} exp(ℓ_i − ℓ_y))` and its gradient w.r.t. the logits.
fn ce_from_logits(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let ly = logits[label];
    let diffs: Vec<f64> = logits.iter().enumerate().filter(|&(i, _)| i != label).map(|(_, &l)| l - ly).collect();
    let m = diffs.iter().copied().fold(0.0f64, f64::max);
    let loss = if m == 0.0 {
        diffs.iter().map(|d| d.exp()).sum::<f64>().ln_1p()
    } else {
        m + ((-m).exp() + diffs.iter().map(|d| (d - m).exp()).sum::<f64>()).ln()
    };
    let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - lmax).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
    g[label] -= 1.0;
    (loss, g)
}

/// Softmax cross-entropy over proxy inner-product logits.
pub fn softmax_ce(bank: &ProxyBank, feature: &[f64], label: usize) -> Result<ProxyLossOutput, BaselineError> {
    bank.check(feature, label)?;
    let logits = bank.ce_logits(feature);
    let (loss, g) = ce_from_logits(&logits, label);
    let d = feature.len();
    let mut d_feature = vec![0.0; d];
    let mut d_proxies = Matrix::zeros(bank.num_classes(), d);
    for (i, w) in bank.proxies.row_iter().enumerate() {
        let gi = g[i] * bank.scale;
        if bank.normalize_proxies {
            let n = norm2(w);
            if n == 0.0 {
                continue;
            }
            let proj = dot(w, feature) / n;
            for k in 0..d {
                d_feature[k] += gi * w[k] / n;
            }
            for (k, dp) in d_proxies.row_mut(i).iter_mut().enumerate() {
                *dp = gi * (feature[k] - proj * w[k] / n) / n;
            }
        } else {
            for k in 0..d {
                d_feature[k] += gi * w[k];
            }
            for (k, dp) in d_proxies.row_mut(i).iter_mut().enumerate() {
                *dp = gi * feature[k];
            }
        }
    }
    Ok(ProxyLossOutput { loss, d_feature, d_proxies, d_btheta: 0.0 })
}

/// Cross-entropy with generalized-inner logits
/// `ℓ_i = ‖w_i‖‖x̃‖(cos θ_i − b_θ − m·[i≠y])`. With `margin = 0` this is CE*,
/// otherwise CosFace*.
pub fn proxy_gip_ce(bank: &ProxyBank, feature: &[f64], label: usize) -> Result<ProxyLossOutput, BaselineError> {
    bank.check(feature, label)?;
    let nx = norm2(feature);
    let norms: Vec<f64> = bank.proxies.row_iter().map(norm2).collect();
    let offsets: Vec<f64> =
        (0..bank.num_classes()).map(|i| bank.b_theta + if i == label { 0.0 } else { bank.margin }).collect();
    let logits: Vec<f64> = bank
        .proxies
        .row_iter()
        .enumerate()
        .map(|(i, w)| dot(w, feature) - offsets[i] * (norms[i] * nx))
        .collect();
    let (loss, g) = ce_from_logits(&logits, label);
    let d = feature.len();
    let mut d_feature = vec![0.0; d];
    let mut d_proxies = Matrix::zeros(bank.num_classes(), d);
    let mut d_btheta = 0.0;
    for (i, w) in bank.proxies.row_iter().enumerate() {
        let gi = g[i];
        let c = offsets[i];
        let fx = if nx > 0.0 { c * norms[i] / nx } else { 0.0 };
        let fw = if norms[i] > 0.0 { c * nx / norms[i] } else { 0.0 };
        for k in 0..d {
            d_feature[k] += gi * (w[k] - fx * feature[k]);
        }
        for (k, dp) in d_proxies.row_mut(i).iter_mut().enumerate() {
            *dp = gi * (feature[k] - fw * w[k]);
        }
        d_btheta -= gi * norms[i] * nx;
    }
    Ok(ProxyLossOutput { loss, d_feature, d_proxies, d_btheta })
}

/// Hinge loss on pair scores: positives pay `(margin − s)₊`, negatives
/// `(s + margin)₊`. Mean over pairs; subgradient 0 exactly at the hinge.
pub fn contrastive_loss(pairs: &PairBatch, margin: f64) -> Result<(f64, Vec<f64>), BaselineError> {
    if !(margin > 0.0) {
        return Err(BaselineError::Config(format!("contrastive margin must be positive, got {margin}")));
    }
    if pairs.is_empty() {
        return Err(BaselineError::Shape("empty pair batch".into()));
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let mut d = Vec::with_capacity(pairs.len());
    for (&s, &y) in pairs.scores.iter().zip(&pairs.labels) {
        let (l, g) = if y {
            if s < margin {
                (margin - s, -1.0)
            } else {
                (0.0, 0.0)
            }
        } else if s > -margin {
            (s + margin, 1.0)
        } else {
            (0.0, 0.0)
        };
        total += l;
        d.push(g / n);
    }
    Ok((total / n, d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub similarity: SimilarityKind,
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.margin > 0.0) {
            return Err(BaselineError::Config(format!("triplet margin must be positive, got {}", self.margin)));
        }
        self.similarity.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negative: Vec<f64>,
    pub d_btheta: f64,
}

/// `(margin + S(a, n) − S(a, p))₊`.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    cfg: &TripletConfig,
) -> Result<TripletOutput, BaselineError> {
    let sim = &cfg.similarity;
    let s_ap = sim.score(anchor, positive)?;
    let s_an = sim.score(anchor, negative)?;
    let v = cfg.margin + s_an - s_ap;
    let d = anchor.len();
    if v <= 0.0 {
        return Ok(TripletOutput {
            loss: 0.0,
            d_anchor: vec![0.0; d],
            d_positive: vec![0.0; d],
            d_negative: vec![0.0; d],
            d_btheta: 0.0,
        });
    }
    let gp = sim.score_grad(anchor, positive)?;
    let gn = sim.score_grad(anchor, negative)?;
    Ok(TripletOutput {
        loss: v,
        d_anchor: gn.d_x1.iter().zip(&gp.d_x1).map(|(n, p)| n - p).collect(),
        d_positive: gp.d_x2.iter().map(|v| -v).collect(),
        d_negative: gn.d_x2,
        d_btheta: gn.d_btheta - gp.d_btheta,
    })
}

/// Per-epoch mean feature norm of a softmax cross-entropy run.
pub fn norm_blowup_probe(log: &RunLog) -> Result<Vec<f64>, BaselineError> {
    if log.method != Method::SoftmaxCe {
        return Err(BaselineError::WrongMethod(log.method));
    }
    if log.epochs.is_empty() {
        return Err(BaselineError::EmptyLog);
    }
    Ok(log.epochs.iter().map(|e| e.mean_feature_norm).collect())
}
