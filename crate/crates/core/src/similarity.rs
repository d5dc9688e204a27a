//! Pairwise score functions `S(x̃₁, x̃₂)` and their gradients.
//!
//! The generalized inner product `‖x₁‖‖x₂‖(cos θ − b_θ)` is evaluated as
//! `⟨x₁, x₂⟩ − b_θ‖x₁‖‖x₂‖`, which has no derivative singularity at
//! θ ∈ {0, π}.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{dot, norm2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("zero-norm vector is undefined under {0}")]
    Degenerate(SimilarityFn),
    #[error("angular bias b_theta must lie in [0, 1), got {0}")]
    BThetaRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityFn {
    GeneralizedInner,
    Inner,
    Cosine,
    Angular,
}

impl SimilarityFn {
    pub const ALL: [SimilarityFn; 4] =
        [SimilarityFn::GeneralizedInner, SimilarityFn::Inner, SimilarityFn::Cosine, SimilarityFn::Angular];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityFn::GeneralizedInner => "generalized_inner",
            SimilarityFn::Inner => "inner",
            SimilarityFn::Cosine => "cosine",
            SimilarityFn::Angular => "angular",
        }
    }
}

impl std::fmt::Display for SimilarityFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SimilarityFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown similarity `{s}`"))
    }
}

/// Which score to use, plus the angular bias for the generalized inner product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityKind {
    pub kind: SimilarityFn,
    pub b_theta: f64,
    pub b_theta_learnable: bool,
}

impl Default for SimilarityKind {
    fn default() -> Self {
        Self::generalized_inner(0.3)
    }
}

/// Gradient of one score with respect to both arguments and `b_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrad {
    pub d_x1: Vec<f64>,
    pub d_x2: Vec<f64>,
    pub d_btheta: f64,
}

/// `∂S/∂x₁ = along_other·x₂ + self_1·x₁` and `∂S/∂x₂ = along_other·x₁ + self_2·x₂`.
/// Lets batched code accumulate gradients without allocating per pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCoeffs {
    pub along_other: f64,
    pub self_1: f64,
    pub self_2: f64,
    pub d_btheta: f64,
}

impl SimilarityKind {
    pub fn generalized_inner(b_theta: f64) -> Self {
        Self { kind: SimilarityFn::GeneralizedInner, b_theta, b_theta_learnable: false }
    }

    pub fn inner() -> Self {
        Self { kind: SimilarityFn::Inner, b_theta: 0.0, b_theta_learnable: false }
    }

    pub fn cosine() -> Self {
        Self { kind: SimilarityFn::Cosine, b_theta: 0.0, b_theta_learnable: false }
    }

    pub fn angular() -> Self {
        Self { kind: SimilarityFn::Angular, b_theta: 0.0, b_theta_learnable: false }
    }

    pub fn of(kind: SimilarityFn, b_theta: f64) -> Self {
        match kind {
            SimilarityFn::GeneralizedInner => Self::generalized_inner(b_theta),
            SimilarityFn::Inner => Self::inner(),
            SimilarityFn::Cosine => Self::cosine(),
            SimilarityFn::Angular => Self::angular(),
        }
    }

    pub fn validate(&self) -> Result<(), SimilarityError> {
        if self.kind == SimilarityFn::GeneralizedInner && !(0.0..1.0).contains(&self.b_theta) {
            return Err(SimilarityError::BThetaRange(self.b_theta));
        }
        Ok(())
    }

    /// True when `b_θ` is a trainable parameter of this score.
    pub fn learns_b_theta(&self) -> bool {
        self.kind == SimilarityFn::GeneralizedInner && self.b_theta_learnable
    }

    fn needs_nonzero(&self) -> bool {
        matches!(self.kind, SimilarityFn::Cosine | SimilarityFn::Angular)
    }

    fn check(&self, x1: &[f64], x2: &[f64]) -> Result<(f64, f64, f64), SimilarityError> {
        if x1.len() != x2.len() {
            return Err(SimilarityError::Dimension(x1.len(), x2.len()));
        }
        let n1 = norm2(x1);
        let n2 = norm2(x2);
        if self.needs_nonzero() && (n1 == 0.0 || n2 == 0.0) {
            return Err(SimilarityError::Degenerate(self.kind));
        }
        Ok((dot(x1, x2), n1, n2))
    }

    /// Score from a precomputed inner product and norms. Callers guarantee
    /// non-zero norms for cosine/angular.
    #[inline]
    pub fn score_from_parts(&self, dot12: f64, n1: f64, n2: f64) -> f64 {
        match self.kind {
            SimilarityFn::GeneralizedInner => dot12 - self.b_theta * (n1 * n2),
            SimilarityFn::Inner => dot12,
            SimilarityFn::Cosine => dot12 / (n1 * n2),
            SimilarityFn::Angular => 1.0 - clamp_cos(dot12 / (n1 * n2)).acos() / PI,
        }
    }

    /// Gradient coefficients from precomputed parts; see [`GradCoeffs`].
    #[inline]
    pub fn coeffs_from_parts(&self, dot12: f64, n1: f64, n2: f64) -> GradCoeffs {
        match self.kind {
            SimilarityFn::GeneralizedInner => {
                let (self_1, self_2) = if n1 == 0.0 || n2 == 0.0 {
                    (0.0, 0.0)
                } else {
                    (-self.b_theta * n2 / n1, -self.b_theta * n1 / n2)
                };
                GradCoeffs { along_other: 1.0, self_1, self_2, d_btheta: -n1 * n2 }
            }
            SimilarityFn::Inner => GradCoeffs { along_other: 1.0, self_1: 0.0, self_2: 0.0, d_btheta: 0.0 },
            SimilarityFn::Cosine => {
                let c = dot12 / (n1 * n2);
                GradCoeffs {
                    along_other: 1.0 / (n1 * n2),
                    self_1: -c / (n1 * n1),
                    self_2: -c / (n2 * n2),
                    d_btheta: 0.0,
                }
            }
            SimilarityFn::Angular => {
                let c = clamp_cos(dot12 / (n1 * n2));
                let s = 1.0 - c * c;
                // d/dc of -acos(c)/π; taken as 0 at the endpoints where it diverges
                let k = if s > 0.0 { 1.0 / (PI * s.sqrt()) } else { 0.0 };
                GradCoeffs {
                    along_other: k / (n1 * n2),
                    self_1: -k * c / (n1 * n1),
                    self_2: -k * c / (n2 * n2),
                    d_btheta: 0.0,
                }
            }
        }
    }

    pub fn score(&self, x1: &[f64], x2: &[f64]) -> Result<f64, SimilarityError> {
        let (d, n1, n2) = self.check(x1, x2)?;
        Ok(self.score_from_parts(d, n1, n2))
    }

    pub fn score_grad(&self, x1: &[f64], x2: &[f64]) -> Result<ScoreGrad, SimilarityError> {
        let (d, n1, n2) = self.check(x1, x2)?;
        let c = self.coeffs_from_parts(d, n1, n2);
        let d_x1 = x1.iter().zip(x2).map(|(a, b)| c.along_other * b + c.self_1 * a).collect();
        let d_x2 = x1.iter().zip(x2).map(|(a, b)| c.along_other * a + c.self_2 * b).collect();
        Ok(ScoreGrad { d_x1, d_x2, d_btheta: c.d_btheta })
    }

    /// `S(x₁, x₂) + b`; positive means "same class".
    pub fn decision_boundary(&self, b: f64, x1: &[f64], x2: &[f64]) -> Result<f64, SimilarityError> {
        Ok(self.score(x1, x2)? + b)
    }
}

#[inline]
fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

/// Angular distance `arccos(cos)/π ∈ [0, 1]`, a metric on directions.
pub fn angular_distance(x1: &[f64], x2: &[f64]) -> Result<f64, SimilarityError> {
    SimilarityKind::angular().score(x1, x2).map(|s| 1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, d)
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm2(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn generalized_inner_reference_points() {
        let g = SimilarityKind::generalized_inner(0.3);
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        assert!((g.score(&e1, &e1).unwrap() - 0.7).abs() < 1e-15);
        assert!((g.score(&e1, &e2).unwrap() + 0.3).abs() < 1e-15);
    }

    #[test]
    fn angular_endpoints() {
        let a = SimilarityKind::angular();
        let u = [0.6, 0.8];
        let v = [-0.6, -0.8];
        let w = [0.8, -0.6];
        assert!(a.score(&u, &v).unwrap().abs() < 1e-15);
        assert!((a.score(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((a.score(&u, &w).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_dimension_errors() {
        let z = [0.0, 0.0];
        let u = [1.0, 0.0];
        assert!(matches!(SimilarityKind::cosine().score(&z, &u), Err(SimilarityError::Degenerate(_))));
        assert!(SimilarityKind::angular().score_grad(&u, &z).is_err());
        assert!(matches!(SimilarityKind::inner().score(&u, &[1.0]), Err(SimilarityError::Dimension(2, 1))));
        // inner-product family is defined at zero
        assert_eq!(SimilarityKind::generalized_inner(0.3).score(&z, &u).unwrap(), 0.0);
    }

    #[test]
    fn b_theta_range_is_enforced() {
        assert!(SimilarityKind::generalized_inner(1.0).validate().is_err());
        assert!(SimilarityKind::generalized_inner(-0.1).validate().is_err());
        assert!(SimilarityKind::generalized_inner(0.0).validate().is_ok());
        // irrelevant for the other kinds
        let mut c = SimilarityKind::cosine();
        c.b_theta = 5.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_b_theta_gradient_is_the_other_vector() {
        let g = SimilarityKind::generalized_inner(0.0);
        let x1 = [0.3, -1.2, 2.0];
        let x2 = [1.5, 0.25, -0.75];
        let gr = g.score_grad(&x1, &x2).unwrap();
        assert_eq!(gr.d_x1, x2.to_vec());
        assert_eq!(gr.d_x2, x1.to_vec());
    }

    #[test]
    fn identical_unit_vectors_gradient() {
        let u = unit(&[1.0, 2.0, 2.0]);
        let gr = SimilarityKind::generalized_inner(0.3).score_grad(&u, &u).unwrap();
        for (g, x) in gr.d_x1.iter().zip(&u) {
            assert!((g - 0.7 * x).abs() < 1e-15);
        }
        assert!((gr.d_btheta + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_first_argument_gradient_convention() {
        let z = [0.0, 0.0];
        let x2 = [1.0, 3.0];
        let gr = SimilarityKind::generalized_inner(0.3).score_grad(&z, &x2).unwrap();
        assert_eq!(gr.d_x1, x2.to_vec());
    }

    #[test]
    fn decision_boundary_examples() {
        let g = SimilarityKind::generalized_inner(0.3);
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let s = g.score(&e1, &e2).unwrap();
        assert_eq!(g.decision_boundary(-s, &e1, &e2).unwrap(), 0.0);
        assert!((g.decision_boundary(-0.5, &e1, &e1).unwrap() - 0.2).abs() < 1e-15);
        assert!((g.decision_boundary(0.0, &e1, &e2).unwrap() + 0.3).abs() < 1e-15);
    }

    #[test]
    fn generalized_inner_matches_arccos_path() {
        let mut rng = Rng::new(17);
        for _ in 0..500 {
            let d = 1 + rng.below(10);
            let x1: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let x2: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let bt = rng.uniform();
            let n1 = norm2(&x1);
            let n2 = norm2(&x2);
            let theta = (dot(&x1, &x2) / (n1 * n2)).clamp(-1.0, 1.0).acos();
            let oracle = n1 * n2 * (theta.cos() - bt);
            let got = SimilarityKind::generalized_inner(bt).score(&x1, &x2).unwrap();
            assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        }
    }

    /// Five-point central difference.
    fn central_diff(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
    }

    fn fd_check(kind: SimilarityKind, x1: &[f64], x2: &[f64]) -> Result<(), TestCaseError> {
        let h = 1e-4;
        let gr = kind.score_grad(x1, x2).unwrap();
        let rel = |fd: f64, an: f64| (fd - an).abs() / (fd.abs() + an.abs()).max(1e-4);
        for i in 0..x1.len() {
            for (which, an) in [(0usize, gr.d_x1[i]), (1, gr.d_x2[i])] {
                let fd = central_diff(
                    |dh| {
                        let mut p = [x1.to_vec(), x2.to_vec()];
                        p[which][i] += dh;
                        kind.score(&p[0], &p[1]).unwrap()
                    },
                    h,
                );
                prop_assert!(rel(fd, an) < 1e-6, "{:?} arg {which} idx {i}: fd {fd} an {an}", kind.kind);
            }
        }
        if kind.kind == SimilarityFn::GeneralizedInner {
            let fd = central_diff(
                |dh| {
                    let mut k = kind;
                    k.b_theta += dh;
                    k.score(x1, x2).unwrap()
                },
                h,
            );
            prop_assert!(rel(fd, gr.d_btheta) < 1e-6);
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn scores_are_symmetric(x1 in vec_strategy(5), x2 in vec_strategy(5), bt in 0.0f64..0.99) {
            prop_assume!(norm2(&x1) > 1e-3 && norm2(&x2) > 1e-3);
            for k in SimilarityFn::ALL {
                let s = SimilarityKind::of(k, bt);
                prop_assert_eq!(s.score(&x1, &x2).unwrap().to_bits(), s.score(&x2, &x1).unwrap().to_bits());
            }
        }

        #[test]
        fn scaling_behaviour(x1 in vec_strategy(4), x2 in vec_strategy(4), c in 0.1f64..10.0, bt in 0.0f64..0.99) {
            prop_assume!(norm2(&x1) > 1e-2 && norm2(&x2) > 1e-2);
            let scaled: Vec<f64> = x1.iter().map(|v| v * c).collect();
            let g = SimilarityKind::generalized_inner(bt);
            let lhs = g.score(&scaled, &x2).unwrap();
            let rhs = c * g.score(&x1, &x2).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            for s in [SimilarityKind::cosine(), SimilarityKind::angular()] {
                let a = s.score(&scaled, &x2).unwrap();
                let b = s.score(&x1, &x2).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn angular_bias_collapses_to_constant_on_unit_vectors(x1 in vec_strategy(6), x2 in vec_strategy(6), bt in 0.0f64..0.99) {
            prop_assume!(norm2(&x1) > 1e-2 && norm2(&x2) > 1e-2);
            let u1 = unit(&x1);
            let u2 = unit(&x2);
            let g = SimilarityKind::generalized_inner(bt).score(&u1, &u2).unwrap();
            let c = SimilarityKind::cosine().score(&u1, &u2).unwrap();
            prop_assert!((g - (c - bt)).abs() < 1e-12);
        }

        #[test]
        fn angular_distance_triangle_inequality(a in vec_strategy(3), b in vec_strategy(3), c in vec_strategy(3)) {
            prop_assume!(norm2(&a) > 1e-2 && norm2(&b) > 1e-2 && norm2(&c) > 1e-2);
            let (a, b, c) = (unit(&a), unit(&b), unit(&c));
            let d12 = angular_distance(&a, &b).unwrap();
            let d13 = angular_distance(&a, &c).unwrap();
            let d23 = angular_distance(&b, &c).unwrap();
            prop_assert!(d12 <= d13 + d23 + 1e-12);
        }

        #[test]
        fn gradients_match_finite_differences(x1 in vec_strategy(4), x2 in vec_strategy(4), bt in 0.0f64..0.99) {
            prop_assume!(norm2(&x1) > 0.1 && norm2(&x2) > 0.1);
            let c = dot(&x1, &x2) / (norm2(&x1) * norm2(&x2));
            // keep away from the arccos endpoints
            prop_assume!(c.abs() < 0.99);
            for k in SimilarityFn::ALL {
                fd_check(SimilarityKind::of(k, bt), &x1, &x2)?;
            }
        }
    }
}
