//! Fitting a polygon's vertices to a reference by first-order descent.
//!
//! This is the single-sample analog of training a vertex predictor: the
//! predicted vertices are the parameters, the scheduled loss supplies the
//! gradient, and an Adam-style update (bias-corrected first and second
//! moments, no weight decay) moves them. Coordinates are clamped to the
//! unit square after every step.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pml::{scheduled_points, LossPhase, LossSchedule, DEFAULT_WARMUP_FRACTION};
use crate::polygon::{Point, Polygon};
use crate::raster::{mask_iou, rasterize};
use crate::scalar::Scalar;
use crate::transport::SinkhornConfig;

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
pub const DEFAULT_IOU_RESOLUTION: (u32, u32) = (256, 256);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct FitConfig<T: Scalar> {
    pub steps: usize,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    /// Added to the root of the second-moment estimate.
    pub adam_epsilon: T,
    pub seed: u64,
    pub loss_schedule: LossSchedule,
    pub sinkhorn: SinkhornConfig<T>,
    /// Standard deviation of the initial per-coordinate perturbation.
    pub init_noise_sigma: T,
    /// Raster size for the final IoU.
    pub iou_resolution: (u32, u32),
}

impl<T: Scalar> Default for FitConfig<T> {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            learning_rate: T::lit(5e-4),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            adam_epsilon: T::lit(1e-8),
            seed: 0,
            loss_schedule: LossSchedule {
                warmup_fraction: DEFAULT_WARMUP_FRACTION,
                total_steps: DEFAULT_STEPS,
            },
            sinkhorn: SinkhornConfig::default(),
            init_noise_sigma: T::lit(DEFAULT_NOISE_SIGMA),
            iou_resolution: DEFAULT_IOU_RESOLUTION,
        }
    }
}

impl<T: Scalar> FitConfig<T> {
    /// Sets the step count and stretches the schedule to match.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self.loss_schedule.total_steps = steps;
        self
    }

    pub fn with_warmup_fraction(mut self, warmup_fraction: f64) -> Self {
        self.loss_schedule.warmup_fraction = warmup_fraction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.learning_rate > T::zero() && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= T::zero() && b < T::one()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.adam_epsilon > T::zero()) {
            return Err(Error::InvalidConfig("adam_epsilon must be positive".into()));
        }
        if !(self.init_noise_sigma >= T::zero() && self.init_noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(
                "init_noise_sigma must be nonnegative".into(),
            ));
        }
        if self.iou_resolution.0 == 0 || self.iou_resolution.1 == 0 {
            return Err(Error::InvalidConfig(
                "iou_resolution must be positive".into(),
            ));
        }
        self.loss_schedule.validate()?;
        if self.loss_schedule.total_steps != self.steps {
            return Err(Error::InvalidConfig(format!(
                "schedule covers {} steps but the fit runs {}",
                self.loss_schedule.total_steps, self.steps
            )));
        }
        self.sinkhorn.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: LossPhase,
    /// Value being minimized at this step: ordered L1, or the entropic
    /// matching value.
    pub loss: f64,
    /// Unregularized matching value, on matching steps.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sharp: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct FitTrace<T: Scalar> {
    pub records: Vec<StepRecord>,
    pub final_polygon: Polygon<T>,
    /// IoU of the rasterized result against the rasterized reference, when
    /// both have at least three vertices.
    pub final_iou: Option<f64>,
    pub iou_resolution: (u32, u32),
}

impl<T: Scalar> FitTrace<T> {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,phase,loss,sharp,grad_norm")?;
        for r in &self.records {
            let phase = match r.phase {
                LossPhase::L1 => "l1",
                LossPhase::Matching => "matching",
            };
            let sharp = r.sharp.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step, phase, r.loss, sharp, r.grad_norm
            )?;
        }
        Ok(())
    }
}

/// Runs `cfg.steps` scheduled-loss updates starting from `init`.
pub fn fit_polygon<T: Scalar>(
    reference: &Polygon<T>,
    init: &Polygon<T>,
    cfg: &FitConfig<T>,
) -> Result<FitTrace<T>> {
    cfg.validate()?;
    if cfg.loss_schedule.warmup_steps() > 0 && init.len() != reference.len() {
        return Err(Error::Shape(format!(
            "L1 phase needs equal vertex counts, got {} and {}",
            init.len(),
            reference.len()
        )));
    }
    let target = reference.vertices();
    let mut x: Vec<Point<T>> = init.vertices().to_vec();
    let mut m = vec![[T::zero(); 2]; x.len()];
    let mut v = vec![[T::zero(); 2]; x.len()];
    let (mut beta1_t, mut beta2_t) = (T::one(), T::one());
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (loss, grad, matching) =
            scheduled_points(step, &cfg.loss_schedule, &x, target, &cfg.sinkhorn)?;
        records.push(StepRecord {
            step,
            phase: if matching.is_some() {
                LossPhase::Matching
            } else {
                LossPhase::L1
            },
            loss: loss.as_f64(),
            sharp: matching.map(|lv| lv.sharp.as_f64()),
            grad_norm: grad.norm().as_f64(),
        });

        beta1_t *= cfg.beta1;
        beta2_t *= cfg.beta2;
        for ((p, g), (m, v)) in x
            .iter_mut()
            .zip(&grad.per_vertex)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            for k in 0..2 {
                m[k] = cfg.beta1 * m[k] + (T::one() - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (T::one() - cfg.beta2) * g[k] * g[k];
                let v_hat = v[k] / (T::one() - beta2_t);
                let step = cfg.learning_rate * (m[k] / (T::one() - beta1_t))
                    / (v_hat.sqrt() + cfg.adam_epsilon);
                p[k] = (p[k] - step).max(T::zero()).min(T::one());
            }
        }
    }

    let final_polygon = Polygon::new(x)?;
    let (w, h) = cfg.iou_resolution;
    let final_iou = match (rasterize(&final_polygon, w, h), rasterize(reference, w, h)) {
        (Ok(a), Ok(b)) => Some(mask_iou(&a, &b)?),
        _ => None,
    };
    Ok(FitTrace {
        records,
        final_polygon,
        final_iou,
        iou_resolution: cfg.iou_resolution,
    })
}

/// One synthetic fitting problem.
#[derive(Clone, Debug, PartialEq)]
pub struct SuitePair<T: Scalar> {
    pub reference: Polygon<T>,
    /// Reference plus Gaussian noise, cyclically rotated by `rotation`.
    pub init: Polygon<T>,
    pub rotation: usize,
}

/// `count` random convex polygons with `n_vertices` vertices each, paired
/// with noisy, rotated initializations (σ = [`DEFAULT_NOISE_SIGMA`]).
pub fn make_perturbed_suite<T: Scalar>(
    seed: u64,
    count: usize,
    n_vertices: usize,
) -> Result<Vec<SuitePair<T>>> {
    make_perturbed_suite_with(seed, count, n_vertices, DEFAULT_NOISE_SIGMA)
}

pub fn make_perturbed_suite_with<T: Scalar>(
    seed: u64,
    count: usize,
    n_vertices: usize,
    sigma: f64,
) -> Result<Vec<SuitePair<T>>> {
    if count == 0 {
        return Err(Error::InvalidConfig(
            "suite count must be at least 1".into(),
        ));
    }
    if n_vertices < 3 {
        return Err(Error::InvalidConfig(format!(
            "polygons need at least 3 vertices, got {n_vertices}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    (0..count)
        .map(|_| {
            let reference = random_convex_polygon(&mut rng, n_vertices);
            let perturbed: Vec<Point<f64>> = reference
                .iter()
                .map(|p| {
                    [
                        (p[0] + noise.sample(&mut rng)).clamp(0.0, 1.0),
                        (p[1] + noise.sample(&mut rng)).clamp(0.0, 1.0),
                    ]
                })
                .collect();
            let rotation = rng.random_range(0..n_vertices);
            let convert = |pts: &[Point<f64>]| {
                Polygon::new(pts.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect())
            };
            Ok(SuitePair {
                reference: convert(&reference)?,
                init: convert(&perturbed)?.rotate_vertices(rotation),
                rotation,
            })
        })
        .collect()
}

/// Star-shaped sample around a random centre (jittered angles, radii within
/// 15% of a common radius), kept only if its convex hull retains every
/// point with a clear turn at each vertex.
fn random_convex_polygon(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point<f64>> {
    use std::f64::consts::TAU;
    loop {
        let (cx, cy) = (rng.random_range(0.35..0.65), rng.random_range(0.35..0.65));
        let radius = rng.random_range(0.15..0.3);
        let phase = rng.random_range(0.0..TAU);
        let points: Vec<Point<f64>> = (0..n)
            .map(|k| {
                let t = phase + (k as f64 + rng.random_range(-0.3..0.3)) * TAU / n as f64;
                let r = radius * rng.random_range(0.85..1.0);
                [cx + r * t.cos(), cy + r * t.sin()]
            })
            .collect();
        let hull = convex_hull(&points);
        let min_gap = hull
            .iter()
            .enumerate()
            .map(|(i, p)| crate::polygon::distance(*p, hull[(i + 1) % hull.len()]))
            .fold(f64::INFINITY, f64::min);
        if hull.len() == n && min_gap > 0.01 && min_turn(&hull) > 1e-4 {
            return hull;
        }
    }
}

fn cross(o: Point<f64>, a: Point<f64>, b: Point<f64>) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn min_turn(poly: &[Point<f64>]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| cross(poly[i], poly[(i + 1) % n], poly[(i + 2) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Andrew's monotone chain; counter-clockwise in a y-up frame, collinear
/// points dropped.
fn convex_hull(points: &[Point<f64>]) -> Vec<Point<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Reference plus independent Gaussian noise on every coordinate, clamped
/// to the unit square.
pub fn perturb<T: Scalar>(reference: &Polygon<T>, sigma: f64, seed: u64) -> Result<Polygon<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Polygon::new(
        reference
            .vertices()
            .iter()
            .map(|p| {
                let jitter = |c: T, rng: &mut ChaCha8Rng| {
                    T::lit((c.as_f64() + noise.sample(rng)).clamp(0.0, 1.0))
                };
                let x = jitter(p[0], &mut rng);
                let y = jitter(p[1], &mut rng);
                [x, y]
            })
            .collect(),
    )
}
