//! Training objective: symmetry, distance and direction terms.
//!
//! Every term is a mean over points and comes with an analytic gradient
//! with respect to the external and internal force heads. At exact zeros
//! (vanishing norms, ties in the L1 sign) the gradient uses the zero
//! subgradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::net::ForcePrediction;

/// How the stored displacement field is turned into a regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSign {
    /// Target is `-displacement`: the force that undoes the damage.
    Corrective,
    /// Target is `+displacement`.
    Damage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub target_sign: TargetSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            target_sign: TargetSign::Corrective,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        Ok(())
    }

    /// Regression target for a stored displacement field.
    pub fn target(&self, displacement: &[Vec3]) -> Vec<Vec3> {
        match self.target_sign {
            TargetSign::Corrective => displacement.iter().map(|d| -d).collect(),
            TargetSign::Damage => displacement.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub dist: f64,
    pub dir: f64,
    pub sym: f64,
    pub total: f64,
}

/// Gradients of a loss with respect to the two force heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceGradient {
    pub external: Vec<Vec3>,
    pub internal: Vec<Vec3>,
}

fn unit_or_zero(v: &Vec3) -> Vec3 {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vec3::zeros()
    }
}

fn sign(v: &Vec3) -> Vec3 {
    v.map(|c| {
        if c > 0.0 {
            1.0
        } else if c < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn l1(v: &Vec3) -> f64 {
    v.x.abs() + v.y.abs() + v.z.abs()
}

fn check_rows(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Symmetry term for one point: `|a - b|_1 / (|a| + |b| + eps) - cos_eps(a, b)`
/// with `a` the internal and `b` the external force. Returns the value and
/// the gradients with respect to `a` and `b`.
pub fn sym_point(internal: &Vec3, external: &Vec3, eps: f64) -> (f64, Vec3, Vec3) {
    let (a, b) = (internal, external);
    let (na, nb) = (a.norm(), b.norm());
    let diff = a - b;
    let denom = na + nb + eps;
    let ratio = l1(&diff) / denom;
    let (ua, ub) = (unit_or_zero(a), unit_or_zero(b));
    let s = sign(&diff);
    let ga_ratio = s / denom - ua * (ratio / denom);
    let gb_ratio = -s / denom - ub * (ratio / denom);

    let (aa, bb) = (na + eps, nb + eps);
    let dot = a.dot(b);
    let cos = dot / (aa * bb);
    let ga_cos = b / (aa * bb) - ua * (dot / (aa * aa * bb));
    let gb_cos = a / (aa * bb) - ub * (dot / (aa * bb * bb));
    (ratio - cos, ga_ratio - ga_cos, gb_ratio - gb_cos)
}

pub fn sym_loss(pred: &ForcePrediction) -> f64 {
    sym_loss_eps(pred, LossConfig::default().epsilon)
}

pub fn sym_loss_eps(pred: &ForcePrediction, eps: f64) -> f64 {
    let n = pred.len() as f64;
    pred.internal
        .iter()
        .zip(&pred.external)
        .map(|(a, b)| sym_point(a, b, eps).0)
        .sum::<f64>()
        / n
}

/// Mean L2 distance between target and resultant rows.
pub fn dist_loss(resultant: &[Vec3], target: &[Vec3]) -> Result<f64> {
    check_rows("distance loss", target.len(), resultant.len())?;
    Ok(resultant
        .iter()
        .zip(target)
        .map(|(c, t)| (t - c).norm())
        .sum::<f64>()
        / resultant.len() as f64)
}

/// Negative mean of epsilon-regularized cosine similarities.
pub fn dir_loss(resultant: &[Vec3], target: &[Vec3], eps: f64) -> Result<f64> {
    check_rows("direction loss", target.len(), resultant.len())?;
    Ok(-resultant
        .iter()
        .zip(target)
        .map(|(c, t)| (t / (t.norm() + eps)).dot(&(c / (c.norm() + eps))))
        .sum::<f64>()
        / resultant.len() as f64)
}

/// One of the three loss terms, or their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Sym,
    Dist,
    Dir,
    Combined,
}

struct PointTerms {
    sym: f64,
    dist: f64,
    dir: f64,
    // Gradients w.r.t. internal / external heads (sym) and resultant (dist, dir).
    g_sym_int: Vec3,
    g_sym_ext: Vec3,
    g_dist: Vec3,
    g_dir: Vec3,
}

fn point_terms(a: &Vec3, b: &Vec3, c: &Vec3, t: &Vec3, eps: f64) -> PointTerms {
    let (sym, g_sym_int, g_sym_ext) = sym_point(a, b, eps);
    let r = t - c;
    let tt = t / (t.norm() + eps);
    let cc = c.norm() + eps;
    let cos = tt.dot(c) / cc;
    PointTerms {
        sym,
        dist: r.norm(),
        dir: -cos,
        g_sym_int,
        g_sym_ext,
        g_dist: -unit_or_zero(&r),
        g_dir: -(tt / cc - unit_or_zero(c) * (tt.dot(c) / (cc * cc))),
    }
}

fn loss_with_gradient(
    pred: &ForcePrediction,
    target: &[Vec3],
    cfg: &LossConfig,
    term: Term,
) -> Result<(LossBreakdown, ForceGradient)> {
    let n = pred.len();
    check_rows("loss", target.len(), n)?;
    if n == 0 {
        return Err(Error::invalid("loss over an empty prediction"));
    }
    let inv_n = 1.0 / n as f64;
    let mut out = LossBreakdown::default();
    let mut g_ext = Vec::with_capacity(n);
    let mut g_int = Vec::with_capacity(n);
    for i in 0..n {
        let p = point_terms(
            &pred.internal[i],
            &pred.external[i],
            &pred.resultant[i],
            &target[i],
            cfg.epsilon,
        );
        out.sym += p.sym;
        out.dist += p.dist;
        out.dir += p.dir;
        let (gi, ge) = match term {
            Term::Sym => (p.g_sym_int, p.g_sym_ext),
            Term::Dist => (p.g_dist, p.g_dist),
            Term::Dir => (p.g_dir, p.g_dir),
            Term::Combined => {
                let g_c = p.g_dist + p.g_dir;
                (p.g_sym_int + g_c, p.g_sym_ext + g_c)
            }
        };
        g_int.push(gi * inv_n);
        g_ext.push(ge * inv_n);
    }
    out.sym *= inv_n;
    out.dist *= inv_n;
    out.dir *= inv_n;
    out.total = out.dist + out.dir + out.sym;
    Ok((
        out,
        ForceGradient {
            external: g_ext,
            internal: g_int,
        },
    ))
}

/// Sum of the three terms and its gradient with respect to both heads.
pub fn combined_loss(
    pred: &ForcePrediction,
    target: &[Vec3],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ForceGradient)> {
    loss_with_gradient(pred, target, cfg, Term::Combined)
}

/// Gradient of a single term with respect to both heads. The resultant is
/// treated as `external + internal`.
pub fn term_gradient(
    pred: &ForcePrediction,
    target: &[Vec3],
    cfg: &LossConfig,
    term: Term,
) -> Result<ForceGradient> {
    loss_with_gradient(pred, target, cfg, term).map(|(_, g)| g)
}

/// Value of a single term (or the sum).
pub fn term_value(breakdown: &LossBreakdown, term: Term) -> f64 {
    match term {
        Term::Sym => breakdown.sym,
        Term::Dist => breakdown.dist,
        Term::Dir => breakdown.dir,
        Term::Combined => breakdown.total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(ext: &[[f64; 3]], int: &[[f64; 3]]) -> ForcePrediction {
        let v = |r: &[[f64; 3]]| r.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
        ForcePrediction::new(v(ext), v(int)).unwrap()
    }

    #[test]
    fn symmetry_fixed_points() {
        let p = pred(&[[1.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]);
        assert!((sym_loss(&p) + 1.0).abs() < 1e-7);
        let p = pred(&[[-1.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]);
        assert!((sym_loss(&p) - 2.0).abs() < 1e-7);
        let p = pred(&[[0.0, 0.0, 0.0]], &[[2.0, 0.0, 0.0]]);
        assert!((sym_loss(&p) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn distance_cases() {
        let c = vec![Vec3::new(0.3, -1.0, 2.0)];
        assert_eq!(dist_loss(&c, &c).unwrap(), 0.0);
        assert_eq!(dist_loss(&[Vec3::zeros()], &[Vec3::x()]).unwrap(), 1.0);
        assert!(dist_loss(&c, &[]).is_err());
    }

    #[test]
    fn direction_cases() {
        let x = vec![Vec3::x()];
        assert!((dir_loss(&x, &x, 1e-8).unwrap() + 1.0).abs() < 1e-7);
        assert_eq!(dir_loss(&[Vec3::y()], &x, 1e-8).unwrap(), 0.0);
        let c = vec![Vec3::new(3.0, -2.0, 1.0); 4];
        assert!(dir_loss(&c, &[Vec3::zeros(); 4], 1e-8).unwrap().abs() < 1e-12);
        assert!(dir_loss(&c, &x, 1e-8).is_err());
    }

    #[test]
    fn all_zero_prediction_and_target() {
        let p = ForcePrediction::zeros(5);
        let (l, g) = combined_loss(&p, &[Vec3::zeros(); 5], &LossConfig::default()).unwrap();
        assert_eq!(l.dist, 0.0);
        assert!(l.dir.abs() < 1e-12 && l.sym.abs() < 1e-12 && l.total.abs() < 1e-12);
        assert!(g.external.iter().all(|v| v.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn terms_compose_additively() {
        let p = pred(
            &[[0.2, -0.1, 0.4], [1.0, 0.0, 0.0]],
            &[[0.0, 0.3, 0.1], [0.5, 0.5, 0.0]],
        );
        let t = vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.0, -0.2)];
        let (l, _) = combined_loss(&p, &t, &LossConfig::default()).unwrap();
        assert!((l.sym - sym_loss(&p)).abs() < 1e-15);
        assert!((l.dist - dist_loss(&p.resultant, &t).unwrap()).abs() < 1e-15);
        assert!((l.dir - dir_loss(&p.resultant, &t, 1e-8).unwrap()).abs() < 1e-15);
        assert_eq!(l.total, l.dist + l.dir + l.sym);
    }

    #[test]
    fn target_sign_convention() {
        let d = vec![Vec3::new(1.0, 2.0, 3.0)];
        assert_eq!(LossConfig::default().target(&d)[0], -d[0]);
        let cfg = LossConfig {
            target_sign: TargetSign::Damage,
            ..Default::default()
        };
        assert_eq!(cfg.target(&d)[0], d[0]);
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (ForcePrediction, Vec<Vec3>) {
        let mut v = || -> Vec<Vec3> {
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect()
        };
        let (e, i, t) = (v(), v(), v());
        (ForcePrediction::new(e, i).unwrap(), t)
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..20 {
            let (p, t) = random_instance(&mut rng, 16);
            for term in [Term::Sym, Term::Dist, Term::Dir, Term::Combined] {
                let g = term_gradient(&p, &t, &cfg, term).unwrap();
                let eval =
                    |p: &ForcePrediction| term_value(&combined_loss(p, &t, &cfg).unwrap().0, term);
                for row in 0..16 {
                    for axis in 0..3 {
                        for head in 0..2 {
                            let shift = |d: f64| {
                                let (mut e, mut i) = (p.external.clone(), p.internal.clone());
                                if head == 0 {
                                    e[row][axis] += d
                                } else {
                                    i[row][axis] += d
                                }
                                ForcePrediction::new(e, i).unwrap()
                            };
                            let fd = (eval(&shift(h)) - eval(&shift(-h))) / (2.0 * h);
                            let an = if head == 0 {
                                g.external[row][axis]
                            } else {
                                g.internal[row][axis]
                            };
                            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                            assert!(rel < 1e-4, "{term:?} row {row}: fd {fd} analytic {an}");
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn sym_is_bounded_and_scale_invariant(
            a in prop::array::uniform3(-10.0f64..10.0),
            b in prop::array::uniform3(-10.0f64..10.0),
            s in 0.1f64..10.0,
        ) {
            let (a, b) = (Vec3::from(a), Vec3::from(b));
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let v = sym_point(&a, &b, 1e-8).0;
            prop_assert!(v >= -1.0 - 1e-9 && v <= 3f64.sqrt() + 1.0 + 1e-9);
            let w = sym_point(&(a * s), &(b * s), 1e-8).0;
            prop_assert!((v - w).abs() < 1e-6);
        }

        #[test]
        fn dist_nonnegative_and_dir_bounded(seed in 0u64..1000, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = random_instance(&mut rng, n);
            prop_assert!(dist_loss(&p.resultant, &t).unwrap() >= 0.0);
            let d = dir_loss(&p.resultant, &t, 1e-8).unwrap();
            prop_assert!((-1.0..=1.0).contains(&d));
        }

        #[test]
        fn permutation_invariant(seed in 0u64..1000, n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = random_instance(&mut rng, n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let pick = |v: &[Vec3]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let q = ForcePrediction::new(pick(&p.external), pick(&p.internal)).unwrap();
            let cfg = LossConfig::default();
            let a = combined_loss(&p, &t, &cfg).unwrap().0;
            let b = combined_loss(&q, &pick(&t), &cfg).unwrap().0;
            prop_assert!((a.total - b.total).abs() < 1e-12);
        }
    }
}
