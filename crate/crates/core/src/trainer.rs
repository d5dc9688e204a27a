//! Training loops: SimPLE over a momentum queue, the contrastive and
//! batch-hard triplet baselines on the same queue, and the proxy softmax
//! baselines. Also the seeded ablation sweep.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, ProxyBank, TripletConfig};
use crate::data::{self, DataError, Dataset};
use crate::encoder::{
    sgd_scalar, sgd_step, Activation, Checkpoint, EmaEncoder, EncoderError, EncoderNet, ParamGrads, SgdConfig,
    SgdState,
};
use crate::eval::{self, EvalError, EvalOptions, EvalReport};
use crate::losses::{batch_loss, LossConfig, LossError};
use crate::numkit::{norm2, Matrix, Rng};
use crate::pair_queue::{pos_neg_ratio, FeatureQueue, QueueError};
use crate::similarity::{SimilarityFn, SimilarityKind};

/// Largest admissible learned `b_θ`.
pub const B_THETA_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    /// Whether the error is a bad configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, TrainError::Config(_))
            || matches!(self, TrainError::Encoder(EncoderError::Config(_)))
            || matches!(self, TrainError::Loss(LossError::Config(_)))
            || matches!(self, TrainError::Queue(QueueError::Config(_)))
            || matches!(self, TrainError::Baseline(BaselineError::Config(_)))
            || matches!(self, TrainError::Data(DataError::Spec(_) | DataError::Split(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simple,
    Contrastive,
    Triplet,
    SoftmaxCe,
    ProxyGipCe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Simple => "simple",
            Method::Contrastive => "contrastive",
            Method::Triplet => "triplet",
            Method::SoftmaxCe => "softmax_ce",
            Method::ProxyGipCe => "proxy_gip_ce",
        }
    }

    pub fn uses_queue(self) -> bool {
        matches!(self, Method::Simple | Method::Contrastive | Method::Triplet)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Method::Simple, Method::Contrastive, Method::Triplet, Method::SoftmaxCe, Method::ProxyGipCe]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], feat_dim: 32, activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub contrastive_margin: f64,
    pub triplet_margin: f64,
    /// Non-target margin for `proxy_gip_ce`; zero gives CE*.
    pub proxy_margin: f64,
    /// L2-normalize features before the `softmax_ce` logits.
    pub normalize_features: bool,
    pub normalize_proxies: bool,
    pub logit_scale: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            contrastive_margin: 0.5,
            triplet_margin: 0.3,
            proxy_margin: 0.0,
            normalize_features: false,
            normalize_proxies: false,
            logit_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    /// Fractions of total steps after which lr is multiplied by `decay_factor`.
    pub decay_at: [f64; 2],
    pub decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { warmup_steps: 100, decay_at: [0.6, 0.8], decay_factor: 0.1 }
    }
}

impl ScheduleConfig {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps == 0 { 1.0 } else { ((step + 1) as f64 / self.warmup_steps as f64).min(1.0) };
        let frac = step as f64 / total.max(1) as f64;
        let decays = self.decay_at.iter().filter(|&&d| frac >= d).count() as i32;
        base * warm * self.decay_factor.powi(decays)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub num_pos: usize,
    pub num_neg: usize,
    pub far_targets: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { num_pos: 3000, num_neg: 3000, far_targets: eval::DEFAULT_FAR_TARGETS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub eta: f64,
    pub epochs: usize,
    pub eval_every: usize,
    /// Draw a fresh batch order every epoch; otherwise reuse the first.
    pub shuffle_each_epoch: bool,
    pub split: [f64; 3],
    pub seed: u64,
}

/// Positive-pair weight tuned on the default task. Small values that suit
/// heavily imbalanced pair sets collapse here to labelling every pair negative.
pub const DEFAULT_ALPHA: f64 = 0.97;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Simple,
            loss: LossConfig { alpha: DEFAULT_ALPHA, ..LossConfig::default() },
            sgd: SgdConfig::default(),
            schedule: ScheduleConfig::default(),
            encoder: EncoderConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
            batch_size: 32,
            queue_capacity: 256,
            eta: 0.99,
            epochs: 100,
            eval_every: 1,
            shuffle_each_epoch: true,
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.method.uses_queue() && self.batch_size > self.queue_capacity {
            return bad(format!("batch_size {} exceeds queue_capacity {}", self.batch_size, self.queue_capacity));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must be in [0, 1], got {}", self.eta));
        }
        if self.encoder.feat_dim == 0 || self.encoder.hidden.contains(&0) {
            return bad("encoder dims must be positive".into());
        }
        if self.eval.num_pos == 0 || self.eval.num_neg == 0 {
            return bad("eval pair counts must be positive".into());
        }
        if !(self.schedule.decay_factor > 0.0) {
            return bad("schedule.decay_factor must be positive".into());
        }
        self.loss.validate()?;
        self.sgd.validate()?;
        let b = &self.baseline;
        for (name, v) in [("contrastive_margin", b.contrastive_margin), ("triplet_margin", b.triplet_margin)] {
            if !(v > 0.0) {
                return bad(format!("baseline.{name} must be positive, got {v}"));
            }
        }
        if !(b.proxy_margin >= 0.0) || !(b.logit_scale > 0.0) {
            return bad("baseline proxy margin must be ≥ 0 and logit scale > 0".into());
        }
        Ok(())
    }

    fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.encoder.hidden);
        dims.push(self.encoder.feat_dim);
        dims
    }

    pub fn learns_b_theta(&self) -> bool {
        match self.method {
            Method::SoftmaxCe => false,
            Method::ProxyGipCe => self.loss.similarity.b_theta_learnable,
            _ => self.loss.similarity.learns_b_theta(),
        }
    }

    /// Similarity used for evaluation, given the current learned `b_θ`.
    pub fn eval_similarity(&self, b_theta: f64) -> SimilarityKind {
        match self.method {
            Method::SoftmaxCe => SimilarityKind::cosine(),
            Method::ProxyGipCe => SimilarityKind::generalized_inner(b_theta),
            _ => SimilarityKind { b_theta, ..self.loss.similarity },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pos_fraction: f64,
    pub b: f64,
    pub b_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_feature_norm: f64,
    pub train_accuracy: Option<f64>,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub method: Method,
    pub config: TrainConfig,
    pub warmup_steps: usize,
    pub initial_feature_norm: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Held-out report on the test split after the last epoch.
    pub test_report: EvalReport,
    /// Test clustering accuracy with threshold `−b`, for pair methods.
    pub boundary_clustering_accuracy: Option<f64>,
    pub final_b: f64,
    pub final_b_theta: f64,
    pub checkpoint: Option<String>,
}

impl RunLog {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.epochs.iter().rev().find_map(|e| e.report.as_ref())
    }

    pub fn steps_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    /// Everything except the per-step records.
    pub fn summary_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("log serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("steps");
            obj.insert("num_steps".into(), self.steps.len().into());
        }
        serde_json::to_string_pretty(&v).expect("log serializes")
    }
}

/// Trained state at the end of a run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: EncoderNet,
    pub ema: Option<EmaEncoder>,
    pub proxies: Option<ProxyBank>,
    pub b: f64,
    pub b_theta: f64,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.net.clone()).with_scalar("b", self.b).with_scalar("b_theta", self.b_theta)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub model: TrainedModel,
}

/// L2-normalized rows and the norms that produced them.
fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = norm2(x.row(r));
        norms.push(n);
        if n > 0.0 {
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
    }
    (out, norms)
}

/// Chain rule through `x ↦ x/‖x‖` given the normalized rows.
fn normalize_backward(unit: &Matrix, norms: &[f64], grad: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for r in 0..unit.rows() {
        if norms[r] == 0.0 {
            continue;
        }
        let u = unit.row(r);
        let g = grad.row(r);
        let p: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &gi), &ui) in out.row_mut(r).iter_mut().zip(g).zip(u) {
            *o = (gi - p * ui) / norms[r];
        }
    }
    out
}

struct State {
    net: EncoderNet,
    opt: SgdState,
    ema: Option<EmaEncoder>,
    queue: Option<FeatureQueue>,
    bank: Option<ProxyBank>,
    bank_velocity: Vec<f64>,
    b: f64,
    b_velocity: f64,
    b_theta: f64,
    b_theta_velocity: f64,
}

impl State {
    fn embed(&self, cfg: &TrainConfig, x: &Matrix) -> Result<Matrix, TrainError> {
        embed(cfg, &self.net, x)
    }
}

/// Evaluation-time features: the encoder output, row-normalized when the
/// method trains on normalized features.
pub fn embed(cfg: &TrainConfig, net: &EncoderNet, x: &Matrix) -> Result<Matrix, TrainError> {
    let f = net.encode(x)?;
    Ok(if cfg.method == Method::SoftmaxCe && cfg.baseline.normalize_features { normalize_rows(&f).0 } else { f })
}

/// Re-evaluates a saved encoder on the test split `cfg` produces for `ds`.
/// For the checkpoint of a `train` run this reproduces its test report.
pub fn evaluate_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint, ds: &Dataset) -> Result<EvalReport, TrainError> {
    cfg.validate()?;
    if ckpt.net.input_dim() != ds.input_dim() {
        return Err(TrainError::Config(format!(
            "checkpoint expects {} input columns, dataset has {}",
            ckpt.net.input_dim(),
            ds.input_dim()
        )));
    }
    let (_, _, test_ds) = data::split(ds, cfg.split, cfg.seed)?;
    test_ds.check_pairable().map_err(|e| TrainError::Config(format!("test split: {e}")))?;
    let bt = ckpt.scalar("b_theta").unwrap_or(cfg.loss.similarity.b_theta);
    let tf = embed(cfg, &ckpt.net, &test_ds.inputs)?;
    let sim = cfg.eval_similarity(bt);
    Ok(eval::evaluate(&tf, &test_ds.labels, &sim, &eval_options(cfg, None), &cfg.eval.far_targets)?)
}

/// Loss and gradients of one mini-batch for every trainable quantity.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub grads: ParamGrads,
    pub d_b: f64,
    pub d_btheta: f64,
    pub d_proxies: Option<Matrix>,
    /// Positive fraction of the pair batch; NaN for methods without pairs.
    pub pos_fraction: f64,
}

/// The training objective for `cfg.method` at the given state, without
/// updating anything. Queue methods need `queue`, proxy methods `bank`.
#[allow(clippy::too_many_arguments)]
pub fn compute_objective(
    cfg: &TrainConfig,
    net: &EncoderNet,
    queue: Option<&FeatureQueue>,
    bank: Option<&ProxyBank>,
    b: f64,
    b_theta: f64,
    x: &Matrix,
    labels: &[usize],
) -> Result<Objective, TrainError> {
    let (features, cache) = net.forward(x)?;
    let mut d_b = 0.0;
    let mut d_btheta = 0.0;
    let mut d_proxies = None;
    let mut pos_fraction = f64::NAN;
    let (loss, d_features) = match cfg.method {
        Method::Simple | Method::Contrastive | Method::Triplet => {
            let sim = SimilarityKind { b_theta, ..cfg.loss.similarity };
            let queue = queue.ok_or_else(|| TrainError::Config(format!("{} needs a queue", cfg.method)))?;
            if cfg.method == Method::Triplet {
                let (loss, g, dbt) = batch_hard_triplet(queue, &features, labels, cfg.baseline.triplet_margin, &sim)?;
                d_btheta = dbt;
                (loss, g)
            } else {
                let pairs = queue.form_pairs(&features, labels, &sim)?;
                pos_fraction = pos_neg_ratio(&pairs)?;
                let (loss, d_scores) = if cfg.method == Method::Simple {
                    let lc = LossConfig { b, similarity: sim, ..cfg.loss };
                    let out = batch_loss(&lc, &pairs)?;
                    d_b = out.d_b;
                    (out.loss, out.d_scores)
                } else {
                    baselines::contrastive_loss(&pairs, cfg.baseline.contrastive_margin)?
                };
                let (g, dbt) = queue.batch_feature_grads(&features, &pairs, &d_scores, &sim)?;
                d_btheta = dbt;
                (loss, g)
            }
        }
        Method::SoftmaxCe | Method::ProxyGipCe => {
            let mut bank = bank.ok_or_else(|| TrainError::Config(format!("{} needs proxies", cfg.method)))?.clone();
            bank.b_theta = b_theta;
            let normalize = cfg.method == Method::SoftmaxCe && cfg.baseline.normalize_features;
            let (emb, norms) = if normalize { normalize_rows(&features) } else { (features.clone(), Vec::new()) };
            let m = x.rows() as f64;
            let mut loss = 0.0;
            let mut g = Matrix::zeros(emb.rows(), emb.cols());
            let mut dp = Matrix::zeros(bank.proxies.rows(), bank.proxies.cols());
            for (r, &y) in labels.iter().enumerate() {
                let out = if cfg.method == Method::SoftmaxCe {
                    baselines::softmax_ce(&bank, emb.row(r), y)?
                } else {
                    baselines::proxy_gip_ce(&bank, emb.row(r), y)?
                };
                loss += out.loss / m;
                for (gv, dv) in g.row_mut(r).iter_mut().zip(&out.d_feature) {
                    *gv = dv / m;
                }
                for (p, dv) in dp.data_mut().iter_mut().zip(out.d_proxies.data()) {
                    *p += dv / m;
                }
                d_btheta += out.d_btheta / m;
            }
            d_proxies = Some(dp);
            let g = if normalize { normalize_backward(&emb, &norms, &g) } else { g };
            (loss, g)
        }
    };
    let grads = net.backward(&cache, &d_features)?;
    Ok(Objective { loss, grads, d_b, d_btheta, d_proxies, pos_fraction })
}

/// One optimization step; returns `(loss, pos_fraction)`.
fn step(
    cfg: &TrainConfig,
    st: &mut State,
    x: &Matrix,
    labels: &[usize],
    sgd: &SgdConfig,
) -> Result<(f64, f64), TrainError> {
    let obj = compute_objective(cfg, &st.net, st.queue.as_ref(), st.bank.as_ref(), st.b, st.b_theta, x, labels)?;
    if !obj.loss.is_finite() {
        return Err(TrainError::Diverged { step: 0 });
    }
    sgd_step(&mut st.net, &obj.grads, sgd, &mut st.opt)?;
    if let (Some(bank), Some(dp)) = (st.bank.as_mut(), obj.d_proxies.as_ref()) {
        for ((w, v), &g) in bank.proxies.data_mut().iter_mut().zip(st.bank_velocity.iter_mut()).zip(dp.data()) {
            sgd_scalar(w, g, v, sgd, true);
        }
    }
    if cfg.method == Method::Simple && cfg.loss.b_learnable {
        sgd_scalar(&mut st.b, obj.d_b, &mut st.b_velocity, sgd, false);
    }
    if cfg.learns_b_theta() {
        sgd_scalar(&mut st.b_theta, obj.d_btheta, &mut st.b_theta_velocity, sgd, false);
        st.b_theta = st.b_theta.clamp(0.0, B_THETA_MAX);
    }
    if let (Some(ema), Some(queue)) = (st.ema.as_mut(), st.queue.as_mut()) {
        ema.update(&st.net)?;
        let qf = ema.params().encode(x)?;
        queue.enqueue_batch(&qf, labels)?;
    }
    Ok((obj.loss, obj.pos_fraction))
}

/// Batch-hard triplets against the queue: per anchor, the least similar
/// same-class entry and the most similar other-class entry. Anchors with
/// no valid positive or negative are skipped.
fn batch_hard_triplet(
    queue: &FeatureQueue,
    batch: &Matrix,
    labels: &[usize],
    margin: f64,
    sim: &SimilarityKind,
) -> Result<(f64, Matrix, f64), TrainError> {
    let entries: Vec<_> = queue.entries().collect();
    let tc = TripletConfig { margin, similarity: *sim };
    let mut grad = Matrix::zeros(batch.rows(), batch.cols());
    let mut d_btheta = 0.0;
    let mut loss = 0.0;
    let m = batch.rows() as f64;
    for (r, &y) in labels.iter().enumerate() {
        let a = batch.row(r);
        let mut hardest_pos: Option<(f64, usize)> = None;
        let mut hardest_neg: Option<(f64, usize)> = None;
        for (j, e) in entries.iter().enumerate() {
            let s = sim.score(a, &e.feature).map_err(BaselineError::from)?;
            if e.label == y {
                if hardest_pos.is_none_or(|(b, _)| s < b) {
                    hardest_pos = Some((s, j));
                }
            } else if hardest_neg.is_none_or(|(b, _)| s > b) {
                hardest_neg = Some((s, j));
            }
        }
        let (Some((_, p)), Some((_, n))) = (hardest_pos, hardest_neg) else { continue };
        let out = baselines::triplet_loss(a, &entries[p].feature, &entries[n].feature, &tc)?;
        loss += out.loss / m;
        for (g, d) in grad.row_mut(r).iter_mut().zip(&out.d_anchor) {
            *g = d / m;
        }
        d_btheta += out.d_btheta / m;
    }
    Ok((loss, grad, d_btheta))
}

fn eval_options(cfg: &TrainConfig, cluster_threshold: Option<f64>) -> EvalOptions {
    EvalOptions {
        num_pos: cfg.eval.num_pos,
        num_neg: cfg.eval.num_neg,
        seed: Rng::new(cfg.seed).stream("trainer.eval").seed(),
        cluster_threshold,
    }
}

fn train_accuracy(st: &State, emb: &Matrix, labels: &[usize]) -> Option<f64> {
    let bank = st.bank.as_ref()?;
    let correct = emb.row_iter().zip(labels).filter(|(x, &y)| bank.predict(x) == y).count();
    Some(correct as f64 / labels.len() as f64)
}

/// Trains on the train split of `ds`, evaluating on validation pairs and
/// finally on the held-out test split.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (train_ds, val_ds, test_ds) = data::split(ds, cfg.split, cfg.seed)?;
    for (name, part) in [("train", &train_ds), ("validation", &val_ds), ("test", &test_ds)] {
        part.check_pairable().map_err(|e| TrainError::Config(format!("{name} split: {e}")))?;
    }
    let m = cfg.batch_size;
    let steps_per_epoch = train_ds.len() / m;
    if steps_per_epoch == 0 {
        return Err(TrainError::Config(format!("train split has {} rows, fewer than one batch", train_ds.len())));
    }
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.stream("trainer.init");
    let net = EncoderNet::new(&cfg.layer_dims(ds.input_dim()), cfg.encoder.activation, &mut init_rng)?;
    let d = cfg.encoder.feat_dim;
    let (ema, queue) = if cfg.method.uses_queue() {
        (Some(EmaEncoder::new(&net, cfg.eta)?), Some(FeatureQueue::new(cfg.queue_capacity, d)?))
    } else {
        (None, None)
    };
    let bank = if cfg.method.uses_queue() {
        None
    } else {
        let k = ds.num_classes;
        let scale = (1.0 / d as f64).sqrt();
        let w = Matrix::from_vec(k, d, (0..k * d).map(|_| scale * init_rng.normal()).collect())
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let mut bank = ProxyBank::new(w)?;
        bank.normalize_proxies = cfg.baseline.normalize_proxies;
        bank.scale = cfg.baseline.logit_scale;
        bank.margin = if cfg.method == Method::ProxyGipCe { cfg.baseline.proxy_margin } else { 0.0 };
        Some(bank)
    };
    let b_theta = if cfg.method == Method::SoftmaxCe { 0.0 } else { cfg.loss.similarity.b_theta };
    let mut st = State {
        opt: SgdState::new(&net),
        net,
        ema,
        queue,
        bank_velocity: vec![0.0; bank.as_ref().map_or(0, |b| b.proxies.data().len())],
        bank,
        b: cfg.loss.b,
        b_velocity: 0.0,
        b_theta,
        b_theta_velocity: 0.0,
    };

    let shuffle_root = root.stream("trainer.shuffle");
    let epoch_order = |epoch: usize| {
        let e = if cfg.shuffle_each_epoch { epoch } else { 0 };
        shuffle_root.split(e as u64).permutation(train_ds.len())
    };
    // Warm-up replays the tail of the first epoch's batches through θ_q, so
    // the queue enters every epoch as it would leave the one before.
    let warmup_steps = if cfg.method.uses_queue() { cfg.queue_capacity.div_ceil(m) } else { 0 };
    if warmup_steps > 0 {
        let order = epoch_order(0);
        let batches: Vec<&[usize]> = order.chunks_exact(m).collect();
        let n = batches.len();
        for w in 0..warmup_steps {
            let idx = batches[(n * warmup_steps - warmup_steps + w) % n];
            let x = train_ds.inputs.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_ds.labels[i]).collect();
            let qf = st.ema.as_ref().expect("queue methods own an ema").params().encode(&x)?;
            st.queue.as_mut().expect("queue methods own a queue").enqueue_batch(&qf, &y)?;
        }
    }

    let initial_feature_norm = st.embed(cfg, &train_ds.inputs)?.mean_row_norm();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks_exact(m) {
            let x = train_ds.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_ds.labels[i]).collect();
            let lr = cfg.schedule.lr_at(cfg.sgd.lr, global, total_steps);
            let sgd = SgdConfig { lr, ..cfg.sgd };
            let (loss, pos_fraction) = step(cfg, &mut st, &x, &y, &sgd).map_err(|e| match e {
                TrainError::Diverged { .. } => TrainError::Diverged { step: global },
                e => e,
            })?;
            loss_sum += loss;
            steps.push(StepRecord { step: global, epoch: epoch + 1, lr, loss, pos_fraction, b: st.b, b_theta: st.b_theta });
            global += 1;
        }
        let emb = st.embed(cfg, &train_ds.inputs)?;
        let last = epoch + 1 == cfg.epochs;
        let report = if (epoch + 1) % cfg.eval_every == 0 || last {
            let vf = st.embed(cfg, &val_ds.inputs)?;
            Some(eval::evaluate(
                &vf,
                &val_ds.labels,
                &cfg.eval_similarity(st.b_theta),
                &eval_options(cfg, None),
                &cfg.eval.far_targets,
            )?)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / steps_per_epoch as f64,
            mean_feature_norm: emb.mean_row_norm(),
            train_accuracy: train_accuracy(&st, &emb, &train_ds.labels),
            report,
        });
    }

    let tf = st.embed(cfg, &test_ds.inputs)?;
    let sim = cfg.eval_similarity(st.b_theta);
    let test_report = eval::evaluate(&tf, &test_ds.labels, &sim, &eval_options(cfg, None), &cfg.eval.far_targets)?;
    let boundary_clustering_accuracy = if cfg.method == Method::Simple && (-st.b).is_finite() {
        let pred = eval::cluster_by_threshold(&tf, &sim, -st.b)?;
        Some(eval::clustering_accuracy(&pred, &test_ds.labels)?)
    } else {
        None
    };
    let log = RunLog {
        method: cfg.method,
        config: cfg.clone(),
        warmup_steps,
        initial_feature_norm,
        steps,
        epochs,
        test_report,
        boundary_clustering_accuracy,
        final_b: st.b,
        final_b_theta: st.b_theta,
        checkpoint: None,
    };
    let model = TrainedModel { net: st.net, ema: st.ema, proxies: st.bank, b: st.b, b_theta: st.b_theta };
    Ok(TrainOutcome { log, model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub r: Vec<f64>,
    pub alpha: Vec<f64>,
    pub b_theta: Vec<f64>,
}

impl AblationGrid {
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut cells = Vec::new();
        for &bt in &self.b_theta {
            for &r in &self.r {
                for &a in &self.alpha {
                    cells.push((bt, r, a));
                }
            }
        }
        cells.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.total_cmp(&y.2)));
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub b_theta: f64,
    pub r: f64,
    pub alpha: f64,
    pub val: Option<EvalReport>,
    pub test: Option<EvalReport>,
    pub error: Option<String>,
}

/// One independent run per `(b_θ, r, α)` cell on up to `jobs` threads.
/// Failed cells keep their error and the sweep continues.
pub fn ablate(grid: &AblationGrid, base: &TrainConfig, ds: &Dataset, jobs: usize) -> Result<Vec<AblationRow>, TrainError> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(TrainError::Config("empty ablation grid".into()));
    }
    let run = |&(bt, r, alpha): &(f64, f64, f64)| {
        let mut cfg = base.clone();
        cfg.loss.r = r;
        cfg.loss.alpha = alpha;
        if cfg.loss.similarity.kind == SimilarityFn::GeneralizedInner {
            cfg.loss.similarity.b_theta = bt;
        }
        let mut row = AblationRow { b_theta: bt, r, alpha, val: None, test: None, error: None };
        match train(&cfg, ds) {
            Ok(out) => {
                row.val = out.log.final_report().cloned();
                row.test = Some(out.log.test_report);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(run).collect()))
}

/// Table layout: grid columns, then validation EER and TPR@FAR, then test EER.
pub fn ablation_csv(rows: &[AblationRow], far_targets: &[f64]) -> String {
    let mut out = String::from("b_theta,r,alpha,eer");
    for t in far_targets {
        out.push_str(&format!(",tpr@far={t:e}"));
    }
    out.push_str(",test_eer,error\n");
    for row in rows {
        out.push_str(&format!("{},{},{}", row.b_theta, row.r, row.alpha));
        match &row.val {
            Some(rep) => {
                out.push_str(&format!(",{}", rep.eer));
                for t in &rep.tpr_at_far {
                    out.push_str(&format!(",{}", t.tpr));
                }
            }
            None => out.push_str(&",".repeat(1 + far_targets.len())),
        }
        match &row.test {
            Some(rep) => out.push_str(&format!(",{}", rep.eer)),
            None => out.push(','),
        }
        out.push_str(&format!(",{}\n", row.error.as_deref().unwrap_or("").replace(',', ";")));
    }
    out
}
