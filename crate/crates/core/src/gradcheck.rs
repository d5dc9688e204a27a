//! Finite-difference checks of every analytic gradient, from the scalar
//! score and loss kernels up to the full encoder → pairs → loss chain.

use serde::{Deserialize, Serialize};

use crate::baselines::ProxyBank;
use crate::encoder::{Activation, EncoderNet};
use crate::losses::{pair_loss, pair_loss_grad, LossConfig, LossVariant};
use crate::numkit::{Matrix, Rng};
use crate::pair_queue::FeatureQueue;
use crate::similarity::{SimilarityFn, SimilarityKind};
use crate::trainer::{compute_objective, Method, TrainConfig, TrainError};

pub const COMPOSITION_TOLERANCE: f64 = 1e-4;
pub const SCALAR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Component {
    Simple(LossVariant, SimilarityFn),
    Contrastive(SimilarityFn),
    Triplet(SimilarityFn),
    SoftmaxCe { normalized: bool },
    ProxyGipCe { margin: f64 },
}

impl Component {
    pub fn label(&self) -> String {
        match self {
            Component::Simple(v, s) => format!("simple/{v}/{s}"),
            Component::Contrastive(s) => format!("contrastive/{s}"),
            Component::Triplet(s) => format!("triplet/{s}"),
            Component::SoftmaxCe { normalized: false } => "softmax_ce".into(),
            Component::SoftmaxCe { normalized: true } => "softmax_ce/normalized".into(),
            Component::ProxyGipCe { margin } if *margin == 0.0 => "proxy_gip_ce".into(),
            Component::ProxyGipCe { margin } => format!("proxy_gip_ce/margin={margin}"),
        }
    }

    /// Twenty components covering every loss variant, score and baseline.
    pub fn standard_set() -> Vec<Component> {
        let mut out = Vec::new();
        for v in [LossVariant::Naive, LossVariant::Balanced, LossVariant::SimpleFinal] {
            for s in SimilarityFn::ALL {
                out.push(Component::Simple(v, s));
            }
        }
        out.extend([
            Component::Contrastive(SimilarityFn::GeneralizedInner),
            Component::Contrastive(SimilarityFn::Cosine),
            Component::Triplet(SimilarityFn::GeneralizedInner),
            Component::Triplet(SimilarityFn::Angular),
            Component::SoftmaxCe { normalized: false },
            Component::SoftmaxCe { normalized: true },
            Component::ProxyGipCe { margin: 0.0 },
            Component::ProxyGipCe { margin: 0.2 },
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(floor)
}

struct Fixture {
    cfg: TrainConfig,
    net: EncoderNet,
    queue: FeatureQueue,
    bank: ProxyBank,
    b: f64,
    b_theta: f64,
    x: Matrix,
    labels: Vec<usize>,
}

const CLASSES: usize = 3;
const DIMS: [usize; 3] = [4, 6, 3];

fn build_fixture(component: Component, rng: &mut Rng) -> Result<Fixture, TrainError> {
    let mut cfg = TrainConfig::default();
    let (method, sim_fn) = match component {
        Component::Simple(v, s) => {
            cfg.loss.variant = v;
            cfg.loss.alpha = rng.uniform_range(0.05, 0.95);
            cfg.loss.r = rng.uniform_range(1.0, 4.0);
            (Method::Simple, s)
        }
        Component::Contrastive(s) => (Method::Contrastive, s),
        Component::Triplet(s) => (Method::Triplet, s),
        Component::SoftmaxCe { normalized } => {
            cfg.baseline.normalize_features = normalized;
            cfg.baseline.normalize_proxies = normalized;
            cfg.baseline.logit_scale = if normalized { 4.0 } else { 1.0 };
            (Method::SoftmaxCe, SimilarityFn::Inner)
        }
        Component::ProxyGipCe { margin } => {
            cfg.baseline.proxy_margin = margin;
            (Method::ProxyGipCe, SimilarityFn::GeneralizedInner)
        }
    };
    cfg.method = method;
    let b_theta = rng.uniform_range(0.1, 0.6);
    cfg.loss.similarity = SimilarityKind::of(sim_fn, b_theta);
    cfg.loss.similarity.b_theta_learnable = sim_fn == SimilarityFn::GeneralizedInner;
    let net = EncoderNet::new(&DIMS, Activation::Tanh, rng)?;
    let mut random = |r: usize, c: usize, scale: f64| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).expect("finite")
    };
    let x = random(4, DIMS[0], 1.0);
    let qf = random(6, DIMS[2], 1.0);
    let proxies = random(CLASSES, DIMS[2], 1.0);
    let labels: Vec<usize> = (0..4).map(|i| i % CLASSES).collect();
    let qlabels: Vec<usize> = (0..6).map(|i| i % CLASSES).collect();
    let mut queue = FeatureQueue::new(6, DIMS[2])?;
    queue.enqueue_batch(&qf, &qlabels)?;
    let mut bank = ProxyBank::new(proxies)?;
    bank.normalize_proxies = cfg.baseline.normalize_proxies;
    bank.scale = cfg.baseline.logit_scale;
    bank.margin = cfg.baseline.proxy_margin;
    let b = rng.uniform_range(-0.5, 0.5);
    Ok(Fixture { cfg, net, queue, bank, b, b_theta, x, labels })
}

impl Fixture {
    fn loss(&self, net: &EncoderNet, bank: &ProxyBank, b: f64, b_theta: f64) -> Result<f64, TrainError> {
        Ok(compute_objective(&self.cfg, net, Some(&self.queue), Some(bank), b, b_theta, &self.x, &self.labels)?
            .loss)
    }

    /// Distance of the nearest non-smooth point of the objective from the
    /// current state, for the hinge-based baselines.
    fn kink_distance(&self) -> f64 {
        let sim = SimilarityKind { b_theta: self.b_theta, ..self.cfg.loss.similarity };
        let feats = self.net.encode(&self.x).expect("fixture encodes");
        let entries: Vec<_> = self.queue.entries().collect();
        let mut dist = f64::INFINITY;
        let score = |a: &[f64], b: &[f64]| sim.score(a, b).unwrap_or(f64::NAN);
        match self.cfg.method {
            Method::Contrastive => {
                let m = self.cfg.baseline.contrastive_margin;
                for a in feats.row_iter() {
                    for e in &entries {
                        let s = score(a, &e.feature);
                        dist = dist.min((s - m).abs()).min((s + m).abs());
                    }
                }
            }
            Method::Triplet => {
                for (a, &y) in feats.row_iter().zip(&self.labels) {
                    let mut pos: Vec<f64> = Vec::new();
                    let mut neg: Vec<f64> = Vec::new();
                    for e in &entries {
                        let s = score(a, &e.feature);
                        if e.label == y {
                            pos.push(s);
                        } else {
                            neg.push(s);
                        }
                    }
                    pos.sort_by(f64::total_cmp);
                    neg.sort_by(|p, q| q.total_cmp(p));
                    if pos.len() > 1 {
                        dist = dist.min(pos[1] - pos[0]);
                    }
                    if neg.len() > 1 {
                        dist = dist.min(neg[0] - neg[1]);
                    }
                    if let (Some(p), Some(n)) = (pos.first(), neg.first()) {
                        dist = dist.min((self.cfg.baseline.triplet_margin + n - p).abs());
                    }
                }
            }
            _ => {}
        }
        dist
    }
}

/// Central differences over every encoder parameter, `b`, `b_θ` and the
/// proxies, compared against [`compute_objective`].
pub fn check_composition(component: Component, seed: u64) -> Result<CheckResult, TrainError> {
    let mut rng = Rng::new(seed).stream("gradcheck.fixture");
    let mut fx = build_fixture(component, &mut rng)?;
    while fx.kink_distance() < 1e-3 {
        fx = build_fixture(component, &mut rng)?;
    }
    let obj = compute_objective(&fx.cfg, &fx.net, Some(&fx.queue), Some(&fx.bank), fx.b, fx.b_theta, &fx.x, &fx.labels)?;
    let h = 1e-5;
    let floor = 1e-7;
    let mut worst: f64 = 0.0;
    let theta = fx.net.flat_params();
    let analytic = obj.grads.flat();
    for (k, &g) in analytic.iter().enumerate() {
        let eval = |delta: f64| -> Result<f64, TrainError> {
            let mut p = theta.clone();
            p[k] += delta;
            let mut net = fx.net.clone();
            net.set_flat_params(&p)?;
            fx.loss(&net, &fx.bank, fx.b, fx.b_theta)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(rel_error(g, fd, floor));
    }
    if fx.cfg.method == Method::Simple {
        let fd = (fx.loss(&fx.net, &fx.bank, fx.b + h, fx.b_theta)? - fx.loss(&fx.net, &fx.bank, fx.b - h, fx.b_theta)?)
            / (2.0 * h);
        worst = worst.max(rel_error(obj.d_b, fd, floor));
    }
    if fx.cfg.learns_b_theta() {
        let fd = (fx.loss(&fx.net, &fx.bank, fx.b, fx.b_theta + h)? - fx.loss(&fx.net, &fx.bank, fx.b, fx.b_theta - h)?)
            / (2.0 * h);
        worst = worst.max(rel_error(obj.d_btheta, fd, floor));
    }
    if let Some(dp) = &obj.d_proxies {
        for k in 0..dp.data().len() {
            let eval = |delta: f64| -> Result<f64, TrainError> {
                let mut bank = fx.bank.clone();
                bank.proxies.data_mut()[k] += delta;
                fx.loss(&fx.net, &bank, fx.b, fx.b_theta)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max(rel_error(dp.data()[k], fd, floor));
        }
    }
    Ok(CheckResult {
        name: component.label(),
        max_rel_error: worst,
        tolerance: COMPOSITION_TOLERANCE,
        passed: worst < COMPOSITION_TOLERANCE,
    })
}

fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Score gradients of one similarity kind on random vector pairs.
pub fn check_score(kind: SimilarityFn, seed: u64, trials: usize) -> CheckResult {
    let mut rng = Rng::new(seed).stream("gradcheck.score");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = 2 + rng.below(5);
        let mut sim = SimilarityKind::of(kind, rng.uniform_range(0.0, 0.9));
        sim.b_theta_learnable = kind == SimilarityFn::GeneralizedInner;
        let x1: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let x2: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let g = sim.score_grad(&x1, &x2).expect("random vectors are non-zero");
        for (which, grad) in [(0, &g.d_x1), (1, &g.d_x2)] {
            for (k, &a) in grad.iter().enumerate() {
                let fd = five_point(
                    |h| {
                        let (mut p, mut q) = (x1.clone(), x2.clone());
                        if which == 0 {
                            p[k] += h;
                        } else {
                            q[k] += h;
                        }
                        sim.score(&p, &q).expect("non-zero")
                    },
                    1e-4,
                );
                worst = worst.max(rel_error(a, fd, 1e-4));
            }
        }
        if sim.b_theta_learnable {
            let fd = five_point(
                |h| SimilarityKind { b_theta: sim.b_theta + h, ..sim }.score(&x1, &x2).expect("non-zero"),
                1e-4,
            );
            worst = worst.max(rel_error(g.d_btheta, fd, 1e-4));
        }
    }
    CheckResult {
        name: format!("score/{kind}"),
        max_rel_error: worst,
        tolerance: SCALAR_TOLERANCE,
        passed: worst < SCALAR_TOLERANCE,
    }
}

/// `∂ℓ/∂s` and `∂ℓ/∂b` of one loss variant on random scores.
pub fn check_pair_loss(variant: LossVariant, seed: u64, trials: usize) -> CheckResult {
    let mut rng = Rng::new(seed).stream("gradcheck.loss");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let cfg = LossConfig {
            variant,
            r: rng.uniform_range(0.5, 5.0),
            alpha: rng.uniform_range(0.01, 0.99),
            b: rng.uniform_range(-1.0, 1.0),
            ..LossConfig::default()
        };
        let s = rng.uniform_range(-6.0, 6.0);
        let y = rng.below(2) == 1;
        let (ds, db) = pair_loss_grad(&cfg, s, y);
        let fd_s = five_point(|h| pair_loss(&cfg, s + h, y), 1e-4);
        let fd_b = five_point(|h| pair_loss(&LossConfig { b: cfg.b + h, ..cfg }, s, y), 1e-4);
        worst = worst.max(rel_error(ds, fd_s, 1e-4)).max(rel_error(db, fd_b, 1e-4));
    }
    CheckResult {
        name: format!("loss/{variant}"),
        max_rel_error: worst,
        tolerance: SCALAR_TOLERANCE,
        passed: worst < SCALAR_TOLERANCE,
    }
}

/// Scalar kernels first, then one composition fixture per standard
/// component, seeded `seed, seed+1, ...`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>, TrainError> {
    let mut out = Vec::new();
    for kind in SimilarityFn::ALL {
        out.push(check_score(kind, seed, 200));
    }
    for v in [LossVariant::Naive, LossVariant::Balanced, LossVariant::SimpleFinal] {
        out.push(check_pair_loss(v, seed, 500));
    }
    for (i, c) in Component::standard_set().into_iter().enumerate() {
        out.push(check_composition(c, seed + i as u64)?);
    }
    Ok(out)
}
