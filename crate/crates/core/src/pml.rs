//! Polygon matching loss and the ordered L1 baseline.
//!
//! The matching loss treats the predicted and reference vertices as two
//! uniform discrete distributions and charges the optimal transport cost
//! between them under Euclidean ground cost. Any reordering of either
//! vertex list leaves it unchanged.
//!
//! Two numbers come out of every evaluation: the *sharp* value `<C, P>`,
//! which is the transport objective itself, and the *entropic* value, the
//! regularized objective the plan actually optimizes. Only the entropic
//! value has the plan as its exact gradient with respect to the costs, so
//! [`pml_gradient`] is the gradient of that value at fixed `ε`:
//!
//! ```text
//!     ∂L/∂ŷ_i = Σ_j P_ij (ŷ_i − y_j) / ‖ŷ_i − y_j‖
//! ```
//!
//! with a zero contribution wherever `ŷ_i = y_j` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polygon::{Point, Polygon};
use crate::scalar::Scalar;
use crate::transport::{
    cost_between, sharp_value, sinkhorn_with_epsilon, uniform_marginals, SinkhornConfig,
    TransportPlan,
};

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T: Scalar> {
    /// `Σ C_ij P_ij`
    pub sharp: T,
    /// `Σ C_ij P_ij + ε Σ P_ij (log P_ij − 1)` at the solved plan.
    pub entropic: T,
    pub epsilon_used: T,
    pub plan: TransportPlan<T>,
}

impl<T: Scalar> LossValue<T> {
    pub fn record(&self) -> LossRecord {
        LossRecord {
            sharp: self.sharp.as_f64(),
            entropic: self.entropic.as_f64(),
            epsilon_used: self.epsilon_used.as_f64(),
            converged: self.plan.converged,
        }
    }
}

/// JSON export of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub sharp: f64,
    pub entropic: f64,
    pub epsilon_used: f64,
    pub converged: bool,
}

/// Per predicted vertex `(∂L/∂x, ∂L/∂y)` in loss per normalized coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct LossGradient<T: Scalar> {
    pub per_vertex: Vec<[T; 2]>,
}

impl<T: Scalar> LossGradient<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            per_vertex: vec![[T::zero(); 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.per_vertex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_vertex.is_empty()
    }

    /// Euclidean norm over all coordinates.
    pub fn norm(&self) -> T {
        self.per_vertex
            .iter()
            .map(|g| g[0] * g[0] + g[1] * g[1])
            .sum::<T>()
            .sqrt()
    }

    /// Largest per-vertex Euclidean norm.
    pub fn max_vertex_norm(&self) -> T {
        self.per_vertex
            .iter()
            .map(|g| g[0].hypot(g[1]))
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.per_vertex
            .iter()
            .all(|g| g[0].is_finite() && g[1].is_finite())
    }
}

/// Matching loss between the vertex sets of `pred` and `reference`.
pub fn pml_loss<T: Scalar>(
    pred: &Polygon<T>,
    reference: &Polygon<T>,
    cfg: &SinkhornConfig<T>,
) -> Result<LossValue<T>> {
    matching_loss(pred.vertices(), reference.vertices(), cfg, None)
}

/// As [`pml_loss`] but with an explicit absolute regularization `epsilon`.
pub fn pml_loss_with_epsilon<T: Scalar>(
    pred: &Polygon<T>,
    reference: &Polygon<T>,
    epsilon: T,
    cfg: &SinkhornConfig<T>,
) -> Result<LossValue<T>> {
    matching_loss(pred.vertices(), reference.vertices(), cfg, Some(epsilon))
}

pub(crate) fn matching_loss<T: Scalar>(
    pred: &[Point<T>],
    reference: &[Point<T>],
    cfg: &SinkhornConfig<T>,
    epsilon: Option<T>,
) -> Result<LossValue<T>> {
    cfg.validate()?;
    let cost = cost_between(pred, reference);
    let marginals = uniform_marginals(pred.len(), reference.len())?;
    let eps = epsilon.unwrap_or_else(|| cfg.epsilon_for(&cost));
    let plan = sinkhorn_with_epsilon(&cost, &marginals, eps, cfg)?;
    Ok(LossValue {
        sharp: sharp_value(&cost, &plan)?,
        entropic: plan.entropic_value,
        epsilon_used: eps,
        plan,
    })
}

/// Envelope gradient of the entropic matching loss with respect to the
/// predicted vertices. Fails if the plan did not converge.
pub fn pml_gradient<T: Scalar>(
    pred: &Polygon<T>,
    reference: &Polygon<T>,
    cfg: &SinkhornConfig<T>,
) -> Result<LossGradient<T>> {
    pml_value_and_gradient(pred, reference, cfg).map(|(_, g)| g)
}

pub fn pml_value_and_gradient<T: Scalar>(
    pred: &Polygon<T>,
    reference: &Polygon<T>,
    cfg: &SinkhornConfig<T>,
) -> Result<(LossValue<T>, LossGradient<T>)> {
    matching_value_and_gradient(pred.vertices(), reference.vertices(), cfg)
}

pub(crate) fn matching_value_and_gradient<T: Scalar>(
    pred: &[Point<T>],
    reference: &[Point<T>],
    cfg: &SinkhornConfig<T>,
) -> Result<(LossValue<T>, LossGradient<T>)> {
    let value = matching_loss(pred, reference, cfg, None)?;
    let grad = gradient_from_plan(pred, reference, &value.plan)?;
    Ok((value, grad))
}

/// `Σ_j P_ij (ŷ_i − y_j) / ‖ŷ_i − y_j‖` for every predicted vertex `i`.
pub fn gradient_from_plan<T: Scalar>(
    pred: &[Point<T>],
    reference: &[Point<T>],
    plan: &TransportPlan<T>,
) -> Result<LossGradient<T>> {
    if !plan.converged {
        return Err(Error::NotConverged {
            iterations: plan.iterations_used,
            residual: plan.max_residual().as_f64(),
        });
    }
    if plan.entries.shape() != (pred.len(), reference.len()) {
        return Err(Error::Shape(format!(
            "plan {:?} for {} predicted and {} reference vertices",
            plan.entries.shape(),
            pred.len(),
            reference.len()
        )));
    }
    let per_vertex = pred
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = [T::zero(); 2];
            for (j, r) in reference.iter().enumerate() {
                let (dx, dy) = (p[0] - r[0], p[1] - r[1]);
                let d = dx.hypot(dy);
                if d > T::zero() {
                    let w = plan.get(i, j) / d;
                    g[0] += w * dx;
                    g[1] += w * dy;
                }
            }
            g
        })
        .collect();
    Ok(LossGradient { per_vertex })
}

fn ensure_same_count(n_pred: usize, n_ref: usize) -> Result<()> {
    if n_pred != n_ref {
        return Err(Error::Shape(format!(
            "ordered L1 needs equal vertex counts, got {n_pred} and {n_ref}"
        )));
    }
    if n_pred == 0 {
        return Err(Error::Empty("no vertices".into()));
    }
    Ok(())
}

/// Mean absolute coordinate difference, vertices compared in listed order.
pub fn l1_loss<T: Scalar>(pred: &Polygon<T>, reference: &Polygon<T>) -> Result<T> {
    ordered_l1(pred.vertices(), reference.vertices())
}

pub(crate) fn ordered_l1<T: Scalar>(pred: &[Point<T>], reference: &[Point<T>]) -> Result<T> {
    ensure_same_count(pred.len(), reference.len())?;
    let total: T = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p[0] - r[0]).abs() + (p[1] - r[1]).abs())
        .sum();
    Ok(total / T::from_count(2 * pred.len()))
}

/// `sign(pred − ref) / (2N')` per coordinate, zero where they are equal.
pub fn l1_gradient<T: Scalar>(
    pred: &Polygon<T>,
    reference: &Polygon<T>,
) -> Result<LossGradient<T>> {
    ordered_l1_gradient(pred.vertices(), reference.vertices())
}

pub(crate) fn ordered_l1_gradient<T: Scalar>(
    pred: &[Point<T>],
    reference: &[Point<T>],
) -> Result<LossGradient<T>> {
    ensure_same_count(pred.len(), reference.len())?;
    let scale = T::one() / T::from_count(2 * pred.len());
    let sign = |d: T| {
        if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        }
    };
    Ok(LossGradient {
        per_vertex: pred
            .iter()
            .zip(reference)
            .map(|(p, r)| [sign(p[0] - r[0]), sign(p[1] - r[1])])
            .collect(),
    })
}

/// Which loss a step of a [`LossSchedule`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPhase {
    L1,
    Matching,
}

/// Ordered L1 for the first `⌈warmup_fraction · total_steps⌉` steps
/// (zero-based), the matching loss afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSchedule {
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

/// 79 of 90 epochs on L1, the rest on the matching loss.
pub const DEFAULT_WARMUP_FRACTION: f64 = 79.0 / 90.0;

impl LossSchedule {
    pub fn new(warmup_fraction: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            warmup_fraction,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn pure_matching(total_steps: usize) -> Self {
        Self {
            warmup_fraction: 0.0,
            total_steps,
        }
    }

    pub fn pure_l1(total_steps: usize) -> Self {
        Self {
            warmup_fraction: 1.0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig(
                "total_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Number of leading L1 steps.
    pub fn warmup_steps(&self) -> usize {
        let raw = self.warmup_fraction * self.total_steps as f64;
        // 79/90 · 90 must give 79, not 80.
        let nearest = raw.round();
        let steps = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
            nearest
        } else {
            raw.ceil()
        };
        (steps as usize).min(self.total_steps)
    }

    pub fn phase(&self, step: usize) -> Result<LossPhase> {
        if step >= self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        Ok(if step < self.warmup_steps() {
            LossPhase::L1
        } else {
            LossPhase::Matching
        })
    }
}

/// Loss value and gradient for `step` under `schedule`: ordered L1 during
/// warmup, the entropic matching value afterwards.
pub fn scheduled_loss<T: Scalar>(
    step: usize,
    schedule: &LossSchedule,
    pred: &Polygon<T>,
    reference: &Polygon<T>,
    cfg: &SinkhornConfig<T>,
) -> Result<(T, LossGradient<T>)> {
    let (value, grad, _) =
        scheduled_points(step, schedule, pred.vertices(), reference.vertices(), cfg)?;
    Ok((value, grad))
}

pub(crate) fn scheduled_points<T: Scalar>(
    step: usize,
    schedule: &LossSchedule,
    pred: &[Point<T>],
    reference: &[Point<T>],
    cfg: &SinkhornConfig<T>,
) -> Result<(T, LossGradient<T>, Option<LossValue<T>>)> {
    match schedule.phase(step)? {
        LossPhase::L1 => Ok((
            ordered_l1(pred, reference)?,
            ordered_l1_gradient(pred, reference)?,
            None,
        )),
        LossPhase::Matching => {
            let (value, grad) = matching_value_and_gradient(pred, reference, cfg)?;
            Ok((value.entropic, grad, Some(value)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polygon::VertexPermutation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decagon() -> Polygon<f64> {
        // Unit-diameter regular decagon.
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 10.0;
                (0.5 + 0.5 * t.cos(), 0.5 + 0.5 * t.sin())
            })
            .collect();
        Polygon::from_xy(&pts).unwrap()
    }

    fn pair() -> (Polygon<f64>, Polygon<f64>) {
        (
            Polygon::from_xy(&[(0.0, 0.0), (1.0, 0.0)]).unwrap(),
            Polygon::from_xy(&[(1.0, 0.0), (0.0, 0.0)]).unwrap(),
        )
    }

    #[test]
    fn identical_decagon_is_nearly_free() {
        let d = decagon();
        let v = pml_loss(&d, &d, &SinkhornConfig::default()).unwrap();
        assert!(v.plan.converged);
        assert!(v.sharp >= 0.0 && v.sharp <= 1e-3, "{}", v.sharp);
        for k in 0..10 {
            let r = pml_loss(&d.rotate_vertices(k), &d, &SinkhornConfig::default()).unwrap();
            assert!((r.sharp - v.sharp).abs() <= 1e-9);
        }
    }

    #[test]
    fn swapped_pair_costs_nothing() {
        let (p, r) = pair();
        let cfg = SinkhornConfig::default().with_epsilon_rel(1e-3);
        assert!(pml_loss(&p, &r, &cfg).unwrap().sharp <= 1e-6);
        assert_eq!(l1_loss(&p, &r).unwrap(), 0.5);
    }

    #[test]
    fn single_vertex_gradient() {
        let p = Polygon::from_xy(&[(0.0, 0.0)]).unwrap();
        let r = Polygon::from_xy(&[(1.0, 0.0)]).unwrap();
        let g = pml_gradient(&p, &r, &SinkhornConfig::default()).unwrap();
        assert_eq!(g.per_vertex, vec![[-1.0, 0.0]]);
    }

    #[test]
    fn permuted_reference_has_small_gradient() {
        let d = decagon();
        let perm = VertexPermutation::new(vec![3, 7, 1, 0, 9, 2, 8, 5, 4, 6]).unwrap();
        let cfg = SinkhornConfig::default().with_epsilon_rel(1e-3);
        let g = pml_gradient(&d.apply_permutation(&perm).unwrap(), &d, &cfg).unwrap();
        assert!(g.max_vertex_norm() <= 1e-3);
    }

    #[test]
    fn unconverged_gradient_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = || {
            let pts: Vec<(f64, f64)> = (0..6).map(|_| (rng.random(), rng.random())).collect();
            Polygon::from_xy(&pts).unwrap()
        };
        let (p, r) = (cloud(), cloud());
        let cfg = SinkhornConfig::default()
            .with_epsilon_rel(1e-4)
            .with_max_iterations(1);
        assert!(matches!(
            pml_gradient(&p, &r, &cfg),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn l1_examples() {
        let d = decagon();
        assert_eq!(l1_loss(&d, &d).unwrap(), 0.0);
        let mut moved = d.clone().into_vertices();
        moved[4][0] += 0.2;
        moved[4][1] -= 0.2;
        let moved = Polygon::new(moved).unwrap();
        assert!((l1_loss(&moved, &d).unwrap() - 0.02).abs() < 1e-15);
        assert!(l1_loss(&d, &pair().0).is_err());

        assert!(l1_gradient(&d, &d)
            .unwrap()
            .per_vertex
            .iter()
            .all(|g| *g == [0.0, 0.0]));
        let p = Polygon::from_xy(&[(1.0, 0.0)]).unwrap();
        let r = Polygon::from_xy(&[(0.0, 0.0)]).unwrap();
        assert_eq!(l1_gradient(&p, &r).unwrap().per_vertex, vec![[0.5, 0.0]]);
    }

    #[test]
    fn schedule_boundaries() {
        let s = LossSchedule::new(0.878, 90).unwrap();
        assert_eq!(s.phase(79).unwrap(), LossPhase::L1);
        assert_eq!(s.phase(80).unwrap(), LossPhase::Matching);

        let default = LossSchedule::new(DEFAULT_WARMUP_FRACTION, 90).unwrap();
        assert_eq!(default.warmup_steps(), 79);
        assert_eq!(default.phase(78).unwrap(), LossPhase::L1);
        assert_eq!(default.phase(79).unwrap(), LossPhase::Matching);
        assert_eq!(default.phase(89).unwrap(), LossPhase::Matching);
        assert!(matches!(
            default.phase(90),
            Err(Error::StepOutOfRange { .. })
        ));

        assert_eq!(
            LossSchedule::pure_matching(5).phase(0).unwrap(),
            LossPhase::Matching
        );
        assert_eq!(LossSchedule::pure_l1(5).phase(4).unwrap(), LossPhase::L1);
        assert!(LossSchedule::new(1.5, 10).is_err());
        assert!(LossSchedule::new(0.5, 0).is_err());
    }

    #[test]
    fn scheduled_loss_dispatches() {
        let d = decagon();
        let pred = d.rotate_vertices(5);
        let cfg = SinkhornConfig::default();
        let s = LossSchedule::new(0.5, 4).unwrap();
        let (l1, g1) = scheduled_loss(0, &s, &pred, &d, &cfg).unwrap();
        assert_eq!(l1, l1_loss(&pred, &d).unwrap());
        assert_eq!(g1, l1_gradient(&pred, &d).unwrap());
        let (v, g) = scheduled_loss(3, &s, &pred, &d, &cfg).unwrap();
        let (lv, lg) = pml_value_and_gradient(&pred, &d, &cfg).unwrap();
        assert_eq!(v, lv.entropic);
        assert_eq!(g, lg);
    }

    #[test]
    fn record_json_fields() {
        let d = decagon();
        let rec = pml_loss(&d, &d, &SinkhornConfig::default())
            .unwrap()
            .record();
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        for key in ["sharp", "entropic", "epsilon_used", "converged"] {
            assert!(v.get(key).is_some());
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Polygon<f64> {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        Polygon::from_xy(&pts).unwrap()
    }

    fn nudge(p: &Polygon<f64>, i: usize, axis: usize, h: f64) -> Polygon<f64> {
        let mut v = p.clone().into_vertices();
        v[i][axis] += h;
        Polygon::new(v).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = SinkhornConfig::default();
        let h = 1e-6;
        for _ in 0..10 {
            let (p, r) = (cloud(&mut rng, 8), cloud(&mut rng, 8));
            let base = pml_loss(&p, &r, &cfg).unwrap();
            let eps = base.epsilon_used;
            let g = gradient_from_plan(p.vertices(), r.vertices(), &base.plan).unwrap();
            let (mut err, mut scale) = (0.0f64, 0.0f64);
            for i in 0..p.len() {
                for axis in 0..2 {
                    let up = pml_loss_with_epsilon(&nudge(&p, i, axis, h), &r, eps, &cfg).unwrap();
                    let down =
                        pml_loss_with_epsilon(&nudge(&p, i, axis, -h), &r, eps, &cfg).unwrap();
                    let fd = (up.entropic - down.entropic) / (2.0 * h);
                    err = err.max((fd - g.per_vertex[i][axis]).abs());
                    scale = scale.max(fd.abs());
                }
            }
            assert!(err <= 1e-4 * scale, "err {err} scale {scale}");
        }
    }

    #[test]
    fn l1_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let (p, r) = (cloud(&mut rng, 7), cloud(&mut rng, 7));
        let g = l1_gradient(&p, &r).unwrap();
        let h = 1e-7;
        for i in 0..p.len() {
            for axis in 0..2 {
                let fd = (l1_loss(&nudge(&p, i, axis, h), &r).unwrap()
                    - l1_loss(&nudge(&p, i, axis, -h), &r).unwrap())
                    / (2.0 * h);
                assert!((fd - g.per_vertex[i][axis]).abs() <= 1e-6);
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn loss_is_order_free_translation_free_and_nonnegative(
            seed in 0u64..10_000,
            n in 2usize..9,
            shift in 0usize..9,
            dx in -2.0f64..2.0,
            dy in -2.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, r) = (cloud(&mut rng, n), cloud(&mut rng, n));
            let cfg = SinkhornConfig::default();
            let base = pml_loss(&p, &r, &cfg).unwrap();
            proptest::prop_assert!(base.sharp >= 0.0);

            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left(shift % n);
            order.swap(0, n - 1);
            let perm = VertexPermutation::new(order).unwrap();
            let permuted = pml_loss(&p.apply_permutation(&perm).unwrap(), &r, &cfg).unwrap();
            proptest::prop_assert!((permuted.sharp - base.sharp).abs() <= 1e-9);
            proptest::prop_assert!((permuted.entropic - base.entropic).abs() <= 1e-9);

            let moved = pml_loss(&p.translated(dx, dy), &r.translated(dx, dy), &cfg).unwrap();
            proptest::prop_assert!((moved.sharp - base.sharp).abs() <= 1e-9);
        }
    }
}
