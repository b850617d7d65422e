//! Entropy-regularized optimal transport between two vertex sets.
//!
//! The solver minimizes
//!
//! ```text
//!     <C, P> + ε Σ_ij P_ij (log P_ij − 1)   subject to  P 1 = a,  Pᵀ 1 = b,  P ≥ 0
//! ```
//!
//! with alternating dual updates carried out in the log domain:
//!
//! ```text
//!     f_i ← ε log a_i − ε LSE_j((g_j − C_ij) / ε)
//!     g_j ← ε log b_j − ε LSE_i((f_i − C_ij) / ε)
//!     P_ij = exp((f_i + g_j − C_ij) / ε)
//! ```
//!
//! The regularization is chosen relative to the mean cost so the same
//! configuration behaves alike on any coordinate scale.
//!
//! For uniform square marginals the unregularized problem is a scaled
//! assignment problem (the optimum of a linear program over the Birkhoff
//! polytope sits on a permutation matrix), which gives the exact oracles
//! [`brute_force_assignment`] and [`hungarian_assignment`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::polygon::{distance, Point, Polygon};
use crate::scalar::Scalar;

/// Smallest regularization ever used, for all-zero cost matrices.
pub const EPSILON_FLOOR: f64 = 1e-9;

/// Pairwise transport costs; entry `(i, j)` is the cost of moving predicted
/// vertex `i` onto reference vertex `j`. Entries are finite and nonnegative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix<T>", into = "Matrix<T>")]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct CostMatrix<T: Scalar>(Matrix<T>);

impl<T: Scalar> CostMatrix<T> {
    pub fn new(entries: Matrix<T>) -> Result<Self> {
        if entries.rows() == 0 || entries.cols() == 0 {
            return Err(Error::Empty("cost matrix has no entries".into()));
        }
        if let Some(x) = entries.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {x}")));
        }
        if let Some(x) = entries.iter().find(|&&x| x < T::zero()) {
            return Err(Error::InvalidConfig(format!("negative cost entry {x}")));
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn mean(&self) -> T {
        self.0.mean()
    }

    /// Same costs multiplied by `s > 0`.
    pub fn scaled(&self, s: T) -> Result<Self> {
        Self::new(self.0.map(|x| x * s))
    }

    pub fn permute_rows(&self, order: &[usize]) -> Self {
        Self(self.0.permute_rows(order))
    }
}

impl<T: Scalar> TryFrom<Matrix<T>> for CostMatrix<T> {
    type Error = Error;

    fn try_from(m: Matrix<T>) -> Result<Self> {
        Self::new(m)
    }
}

impl<T: Scalar> From<CostMatrix<T>> for Matrix<T> {
    fn from(c: CostMatrix<T>) -> Self {
        c.0
    }
}

/// Euclidean distances between every predicted and every reference vertex.
pub fn build_cost<T: Scalar>(pred: &Polygon<T>, reference: &Polygon<T>) -> CostMatrix<T> {
    cost_between(pred.vertices(), reference.vertices())
}

pub(crate) fn cost_between<T: Scalar>(pred: &[Point<T>], reference: &[Point<T>]) -> CostMatrix<T> {
    CostMatrix(Matrix::from_fn(pred.len(), reference.len(), |i, j| {
        distance(pred[i], reference[j])
    }))
}

/// Source and target weights, each summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct Marginals<T: Scalar> {
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> Marginals<T> {
    pub fn new(a: Vec<T>, b: Vec<T>) -> Result<Self> {
        for (name, w) in [("a", &a), ("b", &b)] {
            if w.is_empty() {
                return Err(Error::Empty(format!("marginal {name} is empty")));
            }
            if w.iter().any(|x| !x.is_finite() || *x < T::zero()) {
                return Err(Error::InvalidConfig(format!(
                    "marginal {name} has a negative or non-finite weight"
                )));
            }
            let sum: T = w.iter().copied().sum();
            if (sum - T::one()).abs() > T::lit(1e-12).max(T::epsilon() * T::from_count(4 * w.len()))
            {
                return Err(Error::InvalidConfig(format!(
                    "marginal {name} sums to {sum}"
                )));
            }
        }
        Ok(Self { a, b })
    }

    #[inline]
    pub fn source(&self) -> &[T] {
        &self.a
    }

    #[inline]
    pub fn target(&self) -> &[T] {
        &self.b
    }
}

/// `a_i = 1 / n_pred`, `b_j = 1 / n_ref`.
pub fn uniform_marginals<T: Scalar>(n_pred: usize, n_ref: usize) -> Result<Marginals<T>> {
    if n_pred == 0 || n_ref == 0 {
        return Err(Error::Empty(format!(
            "uniform marginals need positive counts, got ({n_pred}, {n_ref})"
        )));
    }
    Ok(Marginals {
        a: vec![T::one() / T::from_count(n_pred); n_pred],
        b: vec![T::one() / T::from_count(n_ref); n_ref],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct SinkhornConfig<T: Scalar> {
    /// Regularization as a fraction of the mean cost.
    pub epsilon_rel: T,
    pub max_iterations: usize,
    /// Stop once both marginal residuals (∞-norm) are at most this.
    pub marginal_tolerance: T,
}

impl<T: Scalar> Default for SinkhornConfig<T> {
    fn default() -> Self {
        Self {
            epsilon_rel: T::lit(0.01),
            max_iterations: 1000,
            marginal_tolerance: T::lit(1e-9),
        }
    }
}

impl<T: Scalar> SinkhornConfig<T> {
    pub fn with_epsilon_rel(mut self, epsilon_rel: T) -> Self {
        self.epsilon_rel = epsilon_rel;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_rel > T::zero() && self.epsilon_rel.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_rel must be positive, got {}",
                self.epsilon_rel
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.marginal_tolerance > T::zero()) {
            return Err(Error::InvalidConfig(format!(
                "marginal_tolerance must be positive, got {}",
                self.marginal_tolerance
            )));
        }
        Ok(())
    }

    /// Absolute regularization for `cost`: `epsilon_rel × mean(cost)`, floored.
    pub fn epsilon_for(&self, cost: &CostMatrix<T>) -> T {
        (self.epsilon_rel * cost.mean()).max(T::lit(EPSILON_FLOOR))
    }
}

/// Solution of one Sinkhorn solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct TransportPlan<T: Scalar> {
    pub entries: Matrix<T>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Absolute regularization the plan was solved with.
    pub epsilon: T,
    /// `‖P 1 − a‖∞`
    pub row_residual: T,
    /// `‖Pᵀ 1 − b‖∞`
    pub col_residual: T,
    /// Value of the regularized objective, evaluated through the dual
    /// potentials so that it is insensitive to the stopping residual.
    pub entropic_value: T,
}

impl<T: Scalar> TransportPlan<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[(i, j)]
    }

    pub fn max_residual(&self) -> T {
        self.row_residual.max(self.col_residual)
    }
}

fn log_sum_exp<T: Scalar>(len: usize, f: impl Fn(usize) -> T) -> T {
    let max = (0..len).map(&f).fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = (0..len).map(|k| (f(k) - max).exp()).sum();
    max + s.ln()
}

/// Log-domain Sinkhorn with `ε = epsilon_rel × mean(cost)`.
///
/// The potentials are first warmed up over a halving sequence of larger ε,
/// then iterated at the target ε; sweeps that stop contracting are followed
/// by a Newton step on the dual. Every sweep and Newton step counts toward
/// `max_iterations`, and convergence means both marginals are within
/// `marginal_tolerance`.
///
/// Running out of iterations is not an error: the plan comes back with
/// `converged == false` and the caller decides.
pub fn sinkhorn<T: Scalar>(
    cost: &CostMatrix<T>,
    marginals: &Marginals<T>,
    cfg: &SinkhornConfig<T>,
) -> Result<TransportPlan<T>> {
    cfg.validate()?;
    sinkhorn_with_epsilon(cost, marginals, cfg.epsilon_for(cost), cfg)
}

/// Log-domain Sinkhorn with an explicit absolute `epsilon`; `cfg.epsilon_rel`
/// is ignored.
pub fn sinkhorn_with_epsilon<T: Scalar>(
    cost: &CostMatrix<T>,
    marginals: &Marginals<T>,
    epsilon: T,
    cfg: &SinkhornConfig<T>,
) -> Result<TransportPlan<T>> {
    let c = cost.matrix();
    let (n, m) = c.shape();
    if marginals.a.len() != n || marginals.b.len() != m {
        return Err(Error::Shape(format!(
            "cost is {n}x{m} but marginals have lengths {} and {}",
            marginals.a.len(),
            marginals.b.len()
        )));
    }
    if !c.is_finite() {
        return Err(Error::NonFinite(
            "cost matrix contains NaN or infinity".into(),
        ));
    }
    if !(epsilon > T::zero() && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if cfg.max_iterations == 0 {
        return Err(Error::InvalidConfig(
            "max_iterations must be at least 1".into(),
        ));
    }

    let a = &marginals.a;
    let b = &marginals.b;
    let log_a: Vec<T> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<T> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![T::zero(); n];
    let mut g = vec![T::zero(); m];
    let mut iterations = 0;
    let sweep = |f: &mut [T], g: &mut [T], eps: T| {
        for i in 0..n {
            let row = c.row(i);
            f[i] = eps * (log_a[i] - log_sum_exp(m, |j| (g[j] - row[j]) / eps));
        }
        for j in 0..m {
            g[j] = eps * (log_b[j] - log_sum_exp(n, |i| (f[i] - c[(i, j)]) / eps));
        }
    };

    // ε-scaling: a cold start at small ε needs on the order of
    // max(C) / ε sweeps before the potentials reach the right scale, so
    // warm them up on a geometrically shrinking sequence first.
    let stage_tolerance = T::lit(1e-3) * a.iter().copied().fold(T::zero(), T::max);
    let mut stage_eps = c.iter().copied().fold(T::zero(), T::max);
    while stage_eps > epsilon * T::lit(2.0) && iterations < cfg.max_iterations {
        for _ in 0..STAGE_SWEEPS {
            if iterations == cfg.max_iterations {
                break;
            }
            iterations += 1;
            sweep(&mut f, &mut g, stage_eps);
            if marginal_residual(c, a, b, &f, &g, stage_eps) <= stage_tolerance {
                break;
            }
        }
        stage_eps *= T::lit(0.5);
    }

    let mut converged = false;
    let mut previous = T::infinity();
    let newton_allowed = n + m <= NEWTON_MAX_DIM;
    while iterations < cfg.max_iterations {
        iterations += 1;
        sweep(&mut f, &mut g, epsilon);
        let mut residual = marginal_residual(c, a, b, &f, &g, epsilon);
        if !residual.is_finite() {
            return Err(Error::NonFinite("Sinkhorn potentials diverged".into()));
        }
        // Near-tied assignments at small ε make the sweeps contract
        // arbitrarily slowly; switch to Newton steps on the dual then.
        if residual > cfg.marginal_tolerance && newton_allowed && residual > previous * T::lit(0.5)
        {
            if let Some((nf, ng)) = newton_step(c, a, b, &f, &g, epsilon) {
                f = nf;
                g = ng;
                residual = marginal_residual(c, a, b, &f, &g, epsilon);
            }
        }
        if residual <= cfg.marginal_tolerance {
            converged = true;
            break;
        }
        previous = residual;
    }

    let entries = plan_from_potentials(c, &f, &g, epsilon);
    let row_residual = max_abs_diff(&entries.row_sums(), a);
    let col_residual = max_abs_diff(&entries.col_sums(), b);
    let converged = converged
        && row_residual <= cfg.marginal_tolerance
        && col_residual <= cfg.marginal_tolerance;
    let entropic_value = dual_objective(c, a, b, &f, &g, epsilon);

    Ok(TransportPlan {
        entries,
        converged,
        iterations_used: iterations,
        epsilon,
        row_residual,
        col_residual,
        entropic_value,
    })
}

/// Sweeps spent at each intermediate ε before halving it.
const STAGE_SWEEPS: usize = 4;

/// Problems with more than this many potentials never take Newton steps.
const NEWTON_MAX_DIM: usize = 256;

fn plan_from_potentials<T: Scalar>(c: &Matrix<T>, f: &[T], g: &[T], epsilon: T) -> Matrix<T> {
    Matrix::from_fn(c.rows(), c.cols(), |i, j| {
        ((f[i] + g[j] - c[(i, j)]) / epsilon).exp()
    })
}

fn marginal_residual<T: Scalar>(
    c: &Matrix<T>,
    a: &[T],
    b: &[T],
    f: &[T],
    g: &[T],
    epsilon: T,
) -> T {
    let p = plan_from_potentials(c, f, g, epsilon);
    max_abs_diff(&p.row_sums(), a).max(max_abs_diff(&p.col_sums(), b))
}

/// `⟨f, a⟩ + ⟨g, b⟩ − ε Σ_ij exp((f_i + g_j − C_ij) / ε)`, the concave dual
/// of the regularized problem. Its maximum equals the primal minimum.
fn dual_objective<T: Scalar>(c: &Matrix<T>, a: &[T], b: &[T], f: &[T], g: &[T], epsilon: T) -> T {
    let weighted = |pot: &[T], w: &[T]| -> T {
        pot.iter()
            .zip(w)
            .filter(|(_, &w)| w > T::zero())
            .map(|(&p, &w)| p * w)
            .sum()
    };
    let mass: T = plan_from_potentials(c, f, g, epsilon).iter().copied().sum();
    weighted(f, a) + weighted(g, b) - epsilon * mass
}

/// One damped Newton ascent step on the dual, with backtracking. Returns
/// `None` when no step length improves the dual.
///
/// The negated Hessian is `(1/ε) [[diag(P1), P], [Pᵀ, diag(Pᵀ1)]]`; it is
/// singular along `(1, −1)`, but the gradient `(a − P1, b − Pᵀ1)` is
/// orthogonal to that direction, so a tiny ridge suffices.
fn newton_step<T: Scalar>(
    c: &Matrix<T>,
    a: &[T],
    b: &[T],
    f: &[T],
    g: &[T],
    epsilon: T,
) -> Option<(Vec<T>, Vec<T>)> {
    let (n, m) = c.shape();
    let dim = n + m;
    let p = plan_from_potentials(c, f, g, epsilon);
    let rows = p.row_sums();
    let cols = p.col_sums();
    let mut system = Matrix::zeros(dim, dim);
    let mut rhs = vec![T::zero(); dim];
    for i in 0..n {
        system[(i, i)] = rows[i];
        rhs[i] = (a[i] - rows[i]) * epsilon;
        for j in 0..m {
            system[(i, n + j)] = p[(i, j)];
            system[(n + j, i)] = p[(i, j)];
        }
    }
    for j in 0..m {
        system[(n + j, n + j)] = cols[j];
        rhs[n + j] = (b[j] - cols[j]) * epsilon;
    }
    let ridge = T::lit(1e-13) * rows.iter().chain(&cols).copied().fold(T::zero(), T::max)
        + T::min_positive_value();
    for k in 0..dim {
        system[(k, k)] += ridge;
    }
    let step = solve_dense(system, rhs)?;

    let base = dual_objective(c, a, b, f, g, epsilon);
    let slope: T = (0..n)
        .map(|i| (a[i] - rows[i]) * step[i])
        .chain((0..m).map(|j| (b[j] - cols[j]) * step[n + j]))
        .sum();
    if !(slope > T::zero()) {
        return None;
    }
    let mut t = T::one();
    for _ in 0..30 {
        let nf: Vec<T> = (0..n).map(|i| f[i] + t * step[i]).collect();
        let ng: Vec<T> = (0..m).map(|j| g[j] + t * step[n + j]).collect();
        let value = dual_objective(c, a, b, &nf, &ng, epsilon);
        if value.is_finite() && value >= base + T::lit(1e-4) * t * slope {
            return Some((nf, ng));
        }
        t *= T::lit(0.5);
    }
    None
}

/// Gaussian elimination with partial pivoting.
fn solve_dense<T: Scalar>(mut a: Matrix<T>, mut rhs: Vec<T>) -> Option<Vec<T>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| {
            a[(x, col)]
                .abs()
                .partial_cmp(&a[(y, col)].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if !(a[(pivot, col)].abs() > T::zero()) {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                let tmp = a[(col, k)];
                a[(col, k)] = a[(pivot, k)];
                a[(pivot, k)] = tmp;
            }
            rhs.swap(col, pivot);
        }
        let diag = a[(col, col)];
        for row in col + 1..n {
            let factor = a[(row, col)] / diag;
            if factor == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[(col, k)];
                a[(row, k)] -= factor * v;
            }
            let v = rhs[col];
            rhs[row] -= factor * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= a[(row, k)] * x[k];
        }
        x[row] = s / a[(row, row)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn max_abs_diff<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter()
        .zip(y)
        .map(|(&p, &q)| (p - q).abs())
        .fold(T::zero(), T::max)
}

/// `Σ_ij C_ij P_ij`, the unregularized transport cost of `plan`.
pub fn sharp_value<T: Scalar>(cost: &CostMatrix<T>, plan: &TransportPlan<T>) -> Result<T> {
    if cost.matrix().shape() != plan.entries.shape() {
        return Err(Error::Shape(format!(
            "cost {:?} vs plan {:?}",
            cost.matrix().shape(),
            plan.entries.shape()
        )));
    }
    Ok(cost
        .matrix()
        .iter()
        .zip(plan.entries.iter())
        .map(|(&c, &p)| c * p)
        .sum())
}

fn ensure_square<T: Scalar>(cost: &CostMatrix<T>) -> Result<usize> {
    let (n, m) = cost.matrix().shape();
    if n != m {
        return Err(Error::Shape(format!(
            "assignment needs a square matrix, got {n}x{m}"
        )));
    }
    Ok(n)
}

/// Largest size solved by enumeration in [`exact_assignment_value`].
pub const BRUTE_FORCE_MAX: usize = 8;

/// `(1/N) min_σ Σ_i C_{i,σ(i)}`: the exact transport value for uniform
/// square marginals. Enumerates permutations up to [`BRUTE_FORCE_MAX`],
/// Hungarian algorithm beyond.
pub fn exact_assignment_value<T: Scalar>(cost: &CostMatrix<T>) -> Result<T> {
    let n = ensure_square(cost)?;
    let (total, _) = if n <= BRUTE_FORCE_MAX {
        brute_force_assignment(cost)?
    } else {
        hungarian_assignment(cost)?
    };
    Ok(total / T::from_count(n))
}

/// Minimum total cost over all permutations by exhaustive enumeration
/// (Heap's algorithm). Returns `(total, assignment)` with row `i` matched
/// to column `assignment[i]`.
pub fn brute_force_assignment<T: Scalar>(cost: &CostMatrix<T>) -> Result<(T, Vec<usize>)> {
    let n = ensure_square(cost)?;
    let c = cost.matrix();
    let total = |p: &[usize]| -> T { p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum() };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (total(&perm), perm.clone());
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            let t = total(&perm);
            if t < best.0 {
                best = (t, perm.clone());
            }
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best)
}

/// Minimum-cost perfect matching by the O(n³) Hungarian method with
/// row/column potentials. Same return convention as [`brute_force_assignment`].
pub fn hungarian_assignment<T: Scalar>(cost: &CostMatrix<T>) -> Result<(T, Vec<usize>)> {
    let n = ensure_square(cost)?;
    let c = cost.matrix();
    // 1-based with a virtual column 0.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_slack = vec![T::infinity(); n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = T::infinity();
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let slack = c[(i0 - 1, j - 1)] - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = col0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
    Ok((total, assignment))
}
