//! Polygons as ordered vertex lists in normalized image coordinates.
//!
//! Coordinates live in `[0, 1]²` with `x` pointing right and `y` pointing
//! down, the raster convention. Conversion to pixel units happens only in
//! [`crate::raster`]. Polygons may self-intersect; only rasterization gives
//! them an interior (even-odd rule).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One vertex `[x, y]`.
pub type Point<T> = [T; 2];

/// Ordered vertex list. Serializes as a JSON array of `[x, y]` pairs.
///
/// Construction rejects empty or non-finite input and collapses repeated
/// consecutive vertices, including a closing vertex equal to the first, so
/// no boundary segment has zero length unless the whole polygon is a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[T; 2]>", into = "Vec<[T; 2]>")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct Polygon<T: Scalar> {
    vertices: Vec<Point<T>>,
}

impl<T: Scalar> Polygon<T> {
    pub fn new(vertices: Vec<Point<T>>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::DegeneratePolygon("polygon has no vertices".into()));
        }
        if let Some(i) = vertices
            .iter()
            .position(|v| !(v[0].is_finite() && v[1].is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "vertex {i} has a non-finite coordinate"
            )));
        }
        let mut out: Vec<Point<T>> = Vec::with_capacity(vertices.len());
        for v in vertices {
            if out.last() != Some(&v) {
                out.push(v);
            }
        }
        while out.len() > 1 && out.first() == out.last() {
            out.pop();
        }
        Ok(Self { vertices: out })
    }

    /// Builds a polygon from `(x, y)` tuples.
    pub fn from_xy(points: &[(T, T)]) -> Result<Self> {
        Self::new(points.iter().map(|&(x, y)| [x, y]).collect())
    }

    #[inline]
    pub fn vertices(&self) -> &[Point<T>] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point<T>> {
        self.vertices
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Fails unless the polygon has at least three vertices.
    pub fn ensure_ring(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::DegeneratePolygon(format!(
                "need at least 3 vertices, got {}",
                self.vertices.len()
            )));
        }
        Ok(())
    }

    /// Boundary segments `(v[i], v[i+1])` of the closed polygon.
    pub fn edges(&self) -> impl Iterator<Item = (Point<T>, Point<T>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Length of the closed boundary.
    pub fn perimeter(&self) -> T {
        if self.vertices.len() < 2 {
            return T::zero();
        }
        self.edges().map(|(a, b)| distance(a, b)).sum()
    }

    /// Shoelace area `½ Σ (x_i y_{i+1} − x_{i+1} y_i)`.
    ///
    /// Positive for counter-clockwise traversal in a y-up frame. Because
    /// these coordinates are y-down, a positive value means the vertices run
    /// clockwise as seen on screen.
    pub fn signed_area(&self) -> Result<T> {
        self.ensure_ring()?;
        let twice: T = self.edges().map(|(a, b)| a[0] * b[1] - b[0] * a[1]).sum();
        Ok(twice * T::lit(0.5))
    }

    /// `n` points spaced uniformly by arc length along the closed boundary,
    /// starting at the first vertex.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidConfig(format!(
                "resample count must be at least 3, got {n}"
            )));
        }
        let lengths: Vec<T> = self.edges().map(|(a, b)| distance(a, b)).collect();
        let perimeter: T = lengths.iter().copied().sum();
        if !(perimeter > T::zero()) {
            return Err(Error::DegeneratePolygon("zero perimeter".into()));
        }
        let mut out = Vec::with_capacity(n);
        let mut edge = 0;
        let mut edge_start = T::zero();
        for k in 0..n {
            let target = T::from_count(k) * perimeter / T::from_count(n);
            while edge + 1 < lengths.len() && target >= edge_start + lengths[edge] {
                edge_start += lengths[edge];
                edge += 1;
            }
            let (a, b) = (
                self.vertices[edge],
                self.vertices[(edge + 1) % self.vertices.len()],
            );
            let len = lengths[edge];
            let t = if len > T::zero() {
                ((target - edge_start) / len).max(T::zero()).min(T::one())
            } else {
                T::zero()
            };
            out.push([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]);
        }
        Ok(Self { vertices: out })
    }

    /// Cyclic left rotation: vertex `i` of the result is vertex `(i + k) mod n`.
    pub fn rotate_vertices(&self, k: usize) -> Self {
        let mut vertices = self.vertices.clone();
        if !vertices.is_empty() {
            let k = k % vertices.len();
            vertices.rotate_left(k);
        }
        Self { vertices }
    }

    pub fn apply_permutation(&self, perm: &VertexPermutation) -> Result<Self> {
        if perm.len() != self.vertices.len() {
            return Err(Error::InvalidPermutation(format!(
                "permutation of length {} applied to {} vertices",
                perm.len(),
                self.vertices.len()
            )));
        }
        Ok(Self {
            vertices: perm.mapping().iter().map(|&i| self.vertices[i]).collect(),
        })
    }

    /// Same vertices in reverse order.
    pub fn reversed(&self) -> Self {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        Self { vertices }
    }

    pub fn translated(&self, dx: T, dy: T) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|v| [v[0] + dx, v[1] + dy])
                .collect(),
        }
    }

    /// Distance from `p` to the nearest boundary segment.
    pub fn distance_to_boundary(&self, p: Point<T>) -> T {
        if self.vertices.len() == 1 {
            return distance(p, self.vertices[0]);
        }
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(T::infinity(), T::min)
    }
}

impl<T: Scalar> TryFrom<Vec<Point<T>>> for Polygon<T> {
    type Error = Error;

    fn try_from(v: Vec<Point<T>>) -> Result<Self> {
        Self::new(v)
    }
}

impl<T: Scalar> From<Polygon<T>> for Vec<Point<T>> {
    fn from(p: Polygon<T>) -> Self {
        p.vertices
    }
}

#[inline]
pub fn distance<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn point_segment_distance<T: Scalar>(p: Point<T>, a: Point<T>, b: Point<T>) -> T {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == T::zero() {
        return distance(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2)
        .max(T::zero())
        .min(T::one());
    distance(p, [a[0] + t * dx, a[1] + t * dy])
}

/// A bijection on `0..n`; `mapping[i]` is the source index of output slot `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct VertexPermutation {
    mapping: Vec<usize>,
}

impl VertexPermutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &i in &mapping {
            if i >= n {
                return Err(Error::InvalidPermutation(format!(
                    "index {i} out of range for length {n}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidPermutation(format!("index {i} repeated")));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &j) in self.mapping.iter().enumerate() {
            inv[j] = i;
        }
        Self { mapping: inv }
    }

    #[inline]
    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }
}

impl TryFrom<Vec<usize>> for VertexPermutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<VertexPermutation> for Vec<usize> {
    fn from(p: VertexPermutation) -> Self {
        p.mapping
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> Polygon<f64> {
        Polygon::from_xy(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).unwrap()
    }

    #[test]
    fn unit_square_and_triangle_area() {
        assert_eq!(square().signed_area().unwrap().abs(), 1.0);
        let tri = Polygon::<f64>::from_xy(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(tri.signed_area().unwrap().abs(), 0.5);
    }

    #[test]
    fn area_sign_convention() {
        // (0,0) -> (1,0) -> (1,1) is counter-clockwise with y up.
        assert!(square().signed_area().unwrap() > 0.0);
        assert!(square().reversed().signed_area().unwrap() < 0.0);
    }

    #[test]
    fn area_needs_three_vertices() {
        let seg = Polygon::from_xy(&[(0.0, 0.0), (1.0, 0.0)]).unwrap();
        assert!(matches!(
            seg.signed_area(),
            Err(Error::DegeneratePolygon(_))
        ));
    }

    fn even_odd_contains(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
        let mut inside = false;
        let n = poly.len();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    #[test]
    fn area_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            // Star-shaped, hence simple.
            let n = 12;
            let mut angles: Vec<f64> = (0..n)
                .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                .collect();
            angles.sort_by(f64::total_cmp);
            let verts: Vec<[f64; 2]> = angles
                .iter()
                .map(|&t| {
                    let r = 0.15 + 0.3 * rng.random::<f64>();
                    [0.5 + r * t.cos(), 0.5 + r * t.sin()]
                })
                .collect();
            let poly = Polygon::new(verts.clone()).unwrap();
            let area = poly.signed_area().unwrap().abs();
            let samples = 1_000_000;
            let hits = (0..samples)
                .filter(|_| even_odd_contains(&verts, [rng.random(), rng.random()]))
                .count();
            let estimate = hits as f64 / samples as f64;
            assert!(
                (estimate - area).abs() <= 0.01 * area,
                "area {area} vs monte carlo {estimate}"
            );
        }
    }

    #[test]
    fn resample_square_to_eight() {
        let r = square().resample(8).unwrap();
        let expected = [
            [0.0, 0.0],
            [0.5, 0.0],
            [1.0, 0.0],
            [1.0, 0.5],
            [1.0, 1.0],
            [0.5, 1.0],
            [0.0, 1.0],
            [0.0, 0.5],
        ];
        for (got, want) in r.vertices().iter().zip(expected) {
            assert!((got[0] - want[0]).abs() < 1e-15 && (got[1] - want[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn resample_regular_polygon_to_own_count_keeps_perimeter() {
        let n = 10;
        let ring: Vec<[f64; 2]> = (0..n)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / n as f64;
                [0.5 + 0.3 * t.cos(), 0.5 + 0.3 * t.sin()]
            })
            .collect();
        let p = Polygon::new(ring).unwrap();
        let r = p.resample(n).unwrap();
        assert!((r.perimeter() - p.perimeter()).abs() < 1e-9);
        for (a, b) in r.vertices().iter().zip(p.vertices()) {
            assert!(distance(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn resample_repeated_point_fails() {
        let p = Polygon::from_xy(&[(0.3, 0.3), (0.3, 0.3), (0.3, 0.3)]).unwrap();
        assert_eq!(p.len(), 1);
        assert!(matches!(p.resample(5), Err(Error::DegeneratePolygon(_))));
        assert!(square().resample(2).is_err());
    }

    #[test]
    fn rotation_examples() {
        let sq = square();
        assert_eq!(sq.rotate_vertices(0), sq);
        assert_eq!(sq.rotate_vertices(4), sq);
        let r = sq.rotate_vertices(1);
        assert_eq!(
            r.vertices(),
            &[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]
        );
    }

    #[test]
    fn permutation_examples() {
        let p = Polygon::from_xy(&[(0.0, 0.0), (1.0, 0.0)]).unwrap();
        assert_eq!(
            p.apply_permutation(&VertexPermutation::identity(2))
                .unwrap(),
            p
        );
        let swap = VertexPermutation::new(vec![1, 0]).unwrap();
        assert_eq!(p.apply_permutation(&swap).unwrap(), p.reversed());
        assert!(VertexPermutation::new(vec![0, 0]).is_err());
        assert!(VertexPermutation::new(vec![0, 2]).is_err());
        assert!(matches!(
            p.apply_permutation(&VertexPermutation::identity(3)),
            Err(Error::InvalidPermutation(_))
        ));
    }

    #[test]
    fn construction_collapses_duplicates() {
        let p = Polygon::from_xy(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 0.0)])
            .unwrap();
        assert_eq!(p.len(), 3);
        assert!(Polygon::<f64>::new(vec![]).is_err());
        assert!(matches!(
            Polygon::from_xy(&[(0.0, f64::NAN)]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn json_shape() {
        let p: Polygon<f64> = serde_json::from_str("[[0,0],[1,0],[1,1]]").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            "[[0.0,0.0],[1.0,0.0],[1.0,1.0]]"
        );
        assert!(serde_json::from_str::<Polygon<f64>>("[]").is_err());
    }

    #[test]
    fn generic_over_f32() {
        let p = Polygon::<f32>::from_xy(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(p.signed_area().unwrap(), 0.5f32);
    }

    fn arb_ring() -> impl Strategy<Value = Polygon<f64>> {
        prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..16).prop_filter_map(
            "degenerate",
            |pts| {
                let p = Polygon::from_xy(&pts).ok()?;
                (p.len() >= 3).then_some(p)
            },
        )
    }

    proptest! {
        #[test]
        fn rotation_preserves_abs_area(p in arb_ring(), k in 0usize..40) {
            let a = p.signed_area().unwrap().abs();
            let b = p.rotate_vertices(k).signed_area().unwrap().abs();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn reversal_negates_area(p in arb_ring()) {
            let a = p.signed_area().unwrap();
            let b = p.reversed().signed_area().unwrap();
            prop_assert!((a + b).abs() <= 1e-12);
        }

        #[test]
        fn resample_points_lie_on_boundary(p in arb_ring(), n in 3usize..40) {
            let r = p.resample(n).unwrap();
            prop_assert_eq!(r.len(), n);
            for &v in r.vertices() {
                prop_assert!(p.distance_to_boundary(v) <= 1e-9);
            }
            prop_assert_eq!(r.vertices()[0], p.vertices()[0]);
        }

        #[test]
        fn permutation_then_inverse_is_identity(p in arb_ring(), seed in any::<u64>()) {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let perm = VertexPermutation::new(idx).unwrap();
            let back = p.apply_permutation(&perm).unwrap().apply_permutation(&perm.inverse()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
