//! Augmented-Lagrangian solver for box-constrained, equality-constrained
//! nonlinear programs whose Hessians are banded.
//!
//! The outer loop updates multipliers and the penalty weight. Each inner
//! subproblem `min L_A(z; λ, μ)` over the box is solved by a projected Newton
//! method: variables pinned at an active bound are frozen, the remaining block
//! of the Hessian is factored by a banded Cholesky with diagonal shifts when it
//! is indefinite, and steps are taken along the projected arc with Armijo
//! backtracking.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Symmetric band matrix, lower band stored row-wise.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    w: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        Self {
            n,
            w: half_bandwidth,
            data: vec![0.0; n * (half_bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.w
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        debug_assert!(i - j <= self.w, "entry ({i},{j}) outside band {}", self.w);
        i * (self.w + 1) + (i - j)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if j > i { (j, i) } else { (i, j) };
        if hi - lo > self.w {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.w);
            for j in lo..=i {
                let a = self.data[i * (self.w + 1) + (i - j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place banded Cholesky `A = L Lᵀ`. Returns `None` if the matrix is
    /// not numerically positive definite.
    pub fn cholesky(&self) -> Option<BandCholesky> {
        let (n, w) = (self.n, self.w);
        let stride = w + 1;
        let mut l = self.data.clone();
        for i in 0..n {
            let lo = i.saturating_sub(w);
            for j in lo..=i {
                let mut s = l[i * stride + (i - j)];
                let klo = lo.max(j.saturating_sub(w));
                for k in klo..j {
                    s -= l[i * stride + (i - k)] * l[j * stride + (j - k)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l[i * stride] = s.sqrt();
                } else {
                    l[i * stride + (i - j)] = s / l[j * stride];
                }
            }
        }
        Some(BandCholesky { n, w, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    w: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, w) = (self.n, self.w);
        let stride = w + 1;
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(w)..i {
                s -= self.l[i * stride + (i - k)] * y[k];
            }
            y[i] = s / self.l[i * stride];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..(i + w + 1).min(n) {
                s -= self.l[k * stride + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * stride];
        }
        y
    }
}

/// Sparse constraint Jacobian in row-major triplet form.
#[derive(Debug, Clone, Default)]
pub struct SparseJacobian {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseJacobian {
    pub fn transpose_mul(&self, y: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                out[c] += v * y[r];
            }
        }
        out
    }
}

/// A nonlinear program `min f(z)` s.t. `c(z) = 0`, `lower ≤ z ≤ upper`
/// whose Lagrangian Hessian has a known half-bandwidth.
pub trait BandedNlp {
    fn dim(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn half_bandwidth(&self) -> usize;
    fn lower_bounds(&self) -> &DVector<f64>;
    fn upper_bounds(&self) -> &DVector<f64>;

    fn objective(&self, z: &DVector<f64>) -> f64;
    fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Adds `∇²f(z)` into `h`.
    fn add_objective_hessian(&self, z: &DVector<f64>, h: &mut BandMatrix);

    fn constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    fn constraint_jacobian(&self, z: &DVector<f64>) -> SparseJacobian;
    /// Adds `Σ yᵢ ∇²cᵢ(z)` into `h`.
    fn add_constraint_curvature(&self, z: &DVector<f64>, y: &DVector<f64>, h: &mut BandMatrix);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub constraint_tol: f64,
    pub gradient_tol: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            constraint_tol: 1e-6,
            gradient_tol: 1e-4,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e9,
            max_outer_iterations: 60,
            max_inner_iterations: 150,
        }
    }
}

/// Augmented-Lagrangian value at the start and end of one outer iteration's
/// subproblem, both measured with that iteration's multipliers and penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeritRecord {
    pub start: f64,
    pub end: f64,
    pub penalty: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone)]
pub struct AlSolution {
    pub z: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    /// Projected gradient of the Lagrangian, infinity norm.
    pub projected_gradient: f64,
    pub merit_history: Vec<MeritRecord>,
}

pub fn project(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    z.zip_zip_map(lo, hi, |v, l, h| v.clamp(l, h))
}

fn projected_gradient_norm(z: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    (project(&(z - g), lo, hi) - z).amax()
}

struct Subproblem<'a, P: BandedNlp + ?Sized> {
    nlp: &'a P,
    lambda: &'a DVector<f64>,
    mu: f64,
}

impl<P: BandedNlp + ?Sized> Subproblem<'_, P> {
    fn value(&self, z: &DVector<f64>) -> f64 {
        let c = self.nlp.constraints(z);
        self.nlp.objective(z) + self.lambda.dot(&c) + 0.5 * self.mu * c.norm_squared()
    }

    /// Value, gradient, and multiplier estimate `λ + μ c`.
    fn evaluate(&self, z: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>, SparseJacobian) {
        let c = self.nlp.constraints(z);
        let jac = self.nlp.constraint_jacobian(z);
        let y = self.lambda + &c * self.mu;
        let value = self.nlp.objective(z) + self.lambda.dot(&c) + 0.5 * self.mu * c.norm_squared();
        let g = self.nlp.objective_gradient(z) + jac.transpose_mul(&y, z.len());
        (value, g, y, jac)
    }

    fn hessian(&self, z: &DVector<f64>, y: &DVector<f64>, jac: &SparseJacobian) -> BandMatrix {
        let mut h = BandMatrix::zeros(self.nlp.dim(), self.nlp.half_bandwidth());
        self.nlp.add_objective_hessian(z, &mut h);
        self.nlp.add_constraint_curvature(z, y, &mut h);
        for row in &jac.rows {
            for (a, &(i, vi)) in row.iter().enumerate() {
                for &(j, vj) in &row[..=a] {
                    if i == j {
                        h.add(i, i, self.mu * vi * vj);
                    } else {
                        h.add(i, j, self.mu * vi * vj);
                    }
                }
            }
        }
        h
    }

    /// Projected Newton on the subproblem. Returns (z, inner iterations, final value).
    fn minimize(&self, mut z: DVector<f64>, tol: f64, max_iter: usize) -> (DVector<f64>, usize, f64) {
        let lo = self.nlp.lower_bounds();
        let hi = self.nlp.upper_bounds();
        let n = z.len();
        let (mut value, mut g, mut y, mut jac) = self.evaluate(&z);
        let mut iters = 0;
        while iters < max_iter {
            let pg = projected_gradient_norm(&z, &g, lo, hi);
            if pg <= tol {
                break;
            }
            iters += 1;

            let eps = pg.min(1e-3);
            let active: Vec<bool> = (0..n)
                .map(|i| (z[i] <= lo[i] + eps && g[i] > 0.0) || (z[i] >= hi[i] - eps && g[i] < 0.0))
                .collect();

            let mut h = self.hessian(&z, &y, &jac);
            let mut diag_scale = vec![1.0; n];
            for i in 0..n {
                diag_scale[i] = h.get(i, i).abs().max(1e-8);
            }
            for i in 0..n {
                if active[i] {
                    let lo_j = i.saturating_sub(h.half_bandwidth());
                    let hi_j = (i + h.half_bandwidth() + 1).min(n);
                    for j in lo_j..hi_j {
                        h.set(i, j, 0.0);
                    }
                    h.set(i, i, 1.0);
                }
            }
            let rhs = DVector::from_fn(n, |i, _| if active[i] { 0.0 } else { -g[i] });
            let max_diag = (0..n).map(|i| h.get(i, i).abs()).fold(0.0, f64::max).max(1.0);
            let mut shift = 0.0;
            let mut step = None;
            for _ in 0..40 {
                let mut hs = h.clone();
                if shift > 0.0 {
                    for i in 0..n {
                        if !active[i] {
                            hs.add(i, i, shift);
                        }
                    }
                }
                if let Some(chol) = hs.cholesky() {
                    step = Some(chol.solve(&rhs));
                    break;
                }
                shift = if shift == 0.0 { 1e-10 * max_diag } else { shift * 10.0 };
            }
            let mut d = step.unwrap_or_else(|| -&g);
            for i in 0..n {
                if active[i] {
                    d[i] = -g[i] / diag_scale[i];
                }
            }
            if g.dot(&d) >= 0.0 {
                d = DVector::from_fn(n, |i, _| -g[i] / diag_scale[i]);
            }
            // Predicted decrease below rounding level of the merit value.
            if -g.dot(&d) <= 1e-13 * value.abs().max(1.0) {
                break;
            }

            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-12 {
                let trial = project(&(&z + &d * alpha), lo, hi);
                let tv = self.value(&trial);
                let decrease = g.dot(&(&trial - &z));
                if tv.is_finite() && tv <= value + 1e-4 * decrease {
                    accepted = Some((trial, tv));
                    break;
                }
                alpha *= 0.5;
            }
            log::trace!("inner {iters}: pg {pg:.3e} shift {shift:.1e} alpha {alpha:.2e} merit {value:.9e}");
            match accepted {
                Some((trial, tv)) => {
                    let stalled = value - tv <= 1e-15 * value.abs().max(1.0) && alpha < 1e-6;
                    z = trial;
                    (value, g, y, jac) = self.evaluate(&z);
                    if stalled {
                        break;
                    }
                }
                None => break,
            }
        }
        (z, iters, value)
    }
}

/// Solves `nlp` from `z0` by the augmented-Lagrangian method.
pub fn solve_augmented_lagrangian<P: BandedNlp + ?Sized>(
    nlp: &P,
    z0: &DVector<f64>,
    opts: &SolverOptions,
) -> AlSolution {
    let lo = nlp.lower_bounds();
    let hi = nlp.upper_bounds();
    let mut z = project(z0, lo, hi);
    let mut lambda = DVector::zeros(nlp.num_constraints());
    let mut mu = opts.initial_penalty;
    let mut merit_history = Vec::new();
    let mut inner_total = 0;
    let mut converged = false;
    let mut outer = 0;
    let mut prev_violation = f64::INFINITY;
    let mut stalled_at_max_penalty = 0;

    let lagrangian_gradient = |z: &DVector<f64>, lambda: &DVector<f64>| {
        let jac = nlp.constraint_jacobian(z);
        nlp.objective_gradient(z) + jac.transpose_mul(lambda, z.len())
    };
    let kkt = |z: &DVector<f64>, lambda: &DVector<f64>| {
        let viol = nlp.constraints(z).amax();
        let pg = projected_gradient_norm(z, &lagrangian_gradient(z, lambda), lo, hi);
        (viol, pg)
    };

    while outer < opts.max_outer_iterations {
        let (viol, pg) = kkt(&z, &lambda);
        if viol <= opts.constraint_tol && pg <= opts.gradient_tol {
            converged = true;
            break;
        }
        if stalled_at_max_penalty >= 3 {
            break;
        }

        outer += 1;
        let sub = Subproblem {
            nlp,
            lambda: &lambda,
            mu,
        };
        let start = sub.value(&z);
        let (z_new, inner, end) = sub.minimize(z, 0.1 * opts.gradient_tol, opts.max_inner_iterations);
        z = z_new;
        inner_total += inner;

        let c = nlp.constraints(&z);
        let viol = c.amax();
        merit_history.push(MeritRecord {
            start,
            end,
            penalty: mu,
            max_violation: viol,
        });

        lambda += &c * mu;
        if viol > opts.constraint_tol && viol > 0.25 * prev_violation {
            if mu < opts.max_penalty {
                mu = (mu * opts.penalty_growth).min(opts.max_penalty);
            } else if viol > 0.9 * prev_violation {
                stalled_at_max_penalty += 1;
            }
        } else {
            stalled_at_max_penalty = 0;
        }
        prev_violation = viol;
    }

    let (max_violation, pg) = kkt(&z, &lambda);
    if !converged {
        converged = max_violation <= opts.constraint_tol && pg <= opts.gradient_tol;
    }
    AlSolution {
        objective: nlp.objective(&z),
        z,
        multipliers: lambda,
        converged,
        outer_iterations: outer,
        inner_iterations: inner_total,
        max_violation,
        projected_gradient: pg,
        merit_history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn band_cholesky_matches_dense_solve() {
        let n = 12;
        let w = 3;
        let mut band = BandMatrix::zeros(n, w);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(w)..=i {
                let v = if i == j {
                    10.0 + i as f64
                } else {
                    ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6
                };
                band.set(i, j, v);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
        }
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let x = band.cholesky().unwrap().solve(&b);
        let xd = dense.clone().cholesky().unwrap().solve(&b);
        assert!((x - &xd).amax() < 1e-12);
        assert!((band.mul_vec(&xd) - dense * &xd).amax() < 1e-12);
    }

    #[test]
    fn band_cholesky_rejects_indefinite() {
        let mut band = BandMatrix::zeros(2, 1);
        band.set(0, 0, 1.0);
        band.set(1, 1, 1.0);
        band.set(1, 0, 2.0);
        assert!(band.cholesky().is_none());
    }

    /// min (z0 − 2)² + (z1 − 2)²  s.t. z0² + z1² = 2, 0 ≤ z ≤ 1.2 → z = (1, 1).
    struct Circle {
        lo: DVector<f64>,
        hi: DVector<f64>,
    }

    impl BandedNlp for Circle {
        fn dim(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn half_bandwidth(&self) -> usize {
            1
        }
        fn lower_bounds(&self) -> &DVector<f64> {
            &self.lo
        }
        fn upper_bounds(&self) -> &DVector<f64> {
            &self.hi
        }
        fn objective(&self, z: &DVector<f64>) -> f64 {
            (z[0] - 2.0).powi(2) + (z[1] - 2.0).powi(2)
        }
        fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * (z[0] - 2.0), 2.0 * (z[1] - 2.0)])
        }
        fn add_objective_hessian(&self, _z: &DVector<f64>, h: &mut BandMatrix) {
            h.add(0, 0, 2.0);
            h.add(1, 1, 2.0);
        }
        fn constraints(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, z[0] * z[0] + z[1] * z[1] - 2.0)
        }
        fn constraint_jacobian(&self, z: &DVector<f64>) -> SparseJacobian {
            SparseJacobian {
                rows: vec![vec![(0, 2.0 * z[0]), (1, 2.0 * z[1])]],
            }
        }
        fn add_constraint_curvature(&self, _z: &DVector<f64>, y: &DVector<f64>, h: &mut BandMatrix) {
            h.add(0, 0, 2.0 * y[0]);
            h.add(1, 1, 2.0 * y[0]);
        }
    }

    #[test]
    fn solves_small_constrained_problem() {
        let nlp = Circle {
            lo: DVector::from_element(2, 0.0),
            hi: DVector::from_element(2, 1.2),
        };
        let sol = solve_augmented_lagrangian(&nlp, &DVector::from_vec(vec![0.1, 0.9]), &SolverOptions::default());
        assert!(sol.converged);
        assert!((sol.z[0] - 1.0).abs() < 1e-6 && (sol.z[1] - 1.0).abs() < 1e-6);
        assert!((sol.multipliers[0] - 1.0).abs() < 1e-4);
        for rec in &sol.merit_history {
            assert!(rec.end <= rec.start + 1e-12);
        }
    }

    #[test]
    fn active_bound_is_respected() {
        // Unconstrained optimum (2, 2) lies outside the box; with the circle
        // radius enlarged the solution hits the upper bound.
        struct Boxed(Circle);
        impl BandedNlp for Boxed {
            fn dim(&self) -> usize {
                2
            }
            fn num_constraints(&self) -> usize {
                0
            }
            fn half_bandwidth(&self) -> usize {
                1
            }
            fn lower_bounds(&self) -> &DVector<f64> {
                &self.0.lo
            }
            fn upper_bounds(&self) -> &DVector<f64> {
                &self.0.hi
            }
            fn objective(&self, z: &DVector<f64>) -> f64 {
                self.0.objective(z)
            }
            fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
                self.0.objective_gradient(z)
            }
            fn add_objective_hessian(&self, z: &DVector<f64>, h: &mut BandMatrix) {
                self.0.add_objective_hessian(z, h)
            }
            fn constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(0)
            }
            fn constraint_jacobian(&self, _z: &DVector<f64>) -> SparseJacobian {
                SparseJacobian::default()
            }
            fn add_constraint_curvature(&self, _z: &DVector<f64>, _y: &DVector<f64>, _h: &mut BandMatrix) {}
        }
        let nlp = Boxed(Circle {
            lo: DVector::from_element(2, 0.0),
            hi: DVector::from_element(2, 1.2),
        });
        let sol = solve_augmented_lagrangian(&nlp, &DVector::from_vec(vec![0.5, 0.5]), &SolverOptions::default());
        assert!(sol.converged);
        assert_eq!(sol.z[0], 1.2);
        assert_eq!(sol.z[1], 1.2);
    }
}
