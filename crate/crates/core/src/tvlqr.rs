//! Time-varying LQR along a nominal trajectory.
//!
//! The cost-to-go `x̄ᵀ S(t) x̄` is obtained by integrating the differential
//! Riccati equation backward from `S(t_f) = Q_f` on the knot grid. Between
//! knots, `x*`, `S` and `K` are linearly interpolated while `u*` is held.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dirtran::NominalTrajectory;
use crate::dynamics::{rk4_step, Dynamics};

/// Minimum Riccati substeps per knot interval.
pub const DRE_SUBSTEPS: usize = 10;
const MAX_DRE_SUBSTEPS: usize = 1_000_000;

const BLOWUP_NORM: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("invalid controller costs: {0}")]
    InvalidCosts(String),
    #[error("Riccati solution exceeded {BLOWUP_NORM:e} at knot {knot}")]
    NumericalBlowup { knot: usize },
    #[error("Riccati flow did not settle to a stationary solution")]
    NoStationarySolution,
}

/// Diagonal cost matrices of the tracking controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerCosts {
    pub state_cost: Vec<f64>,
    pub input_cost: Vec<f64>,
    pub final_state_cost: Vec<f64>,
}

impl ControllerCosts {
    pub fn validate(&self, n: usize, p: usize) -> Result<(), RiccatiError> {
        if self.state_cost.len() != n || self.final_state_cost.len() != n || self.input_cost.len() != p {
            return Err(RiccatiError::InvalidCosts(format!(
                "expected {n} state and {p} input weights"
            )));
        }
        if self
            .state_cost
            .iter()
            .chain(&self.final_state_cost)
            .any(|&q| !(q >= 0.0))
        {
            return Err(RiccatiError::InvalidCosts("state weights must be non-negative".into()));
        }
        if self.input_cost.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(RiccatiError::InvalidCosts(
                "input weights must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    pub fn q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.state_cost))
    }

    pub fn q_final(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.final_state_cost))
    }

    pub fn r_inverse(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.input_cost.len(),
            self.input_cost.iter().map(|r| 1.0 / r),
        ))
    }
}

/// Per-knot cost-to-go matrices and feedback gains, plus their values on
/// the Riccati integrator's dense grid (`substeps` points per interval,
/// dense index `k·substeps` coinciding with knot `k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub times: Vec<f64>,
    pub cost_to_go: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub substeps: usize,
    pub dense_cost_to_go: Vec<DMatrix<f64>>,
    pub dense_gains: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    /// A schedule known only at the knots; the policy interpolates linearly
    /// between them.
    pub fn from_knots(times: Vec<f64>, cost_to_go: Vec<DMatrix<f64>>, gains: Vec<DMatrix<f64>>) -> Self {
        assert!(times.len() == cost_to_go.len() && times.len() == gains.len());
        Self {
            times,
            dense_cost_to_go: cost_to_go.clone(),
            dense_gains: gains.clone(),
            cost_to_go,
            gains,
            substeps: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `V_k(x̄) = x̄ᵀ S[k] x̄`.
    pub fn value(&self, knot: usize, err: &DVector<f64>) -> f64 {
        quadratic_form(&self.cost_to_go[knot], err)
    }

    fn dense_position(&self, k: usize, frac: f64) -> (usize, f64) {
        let pos = (k as f64 + frac) * self.substeps as f64;
        let last = self.dense_gains.len() - 1;
        let i = ((pos + 1e-9).floor() as usize).min(last);
        let w = (pos - i as f64).max(0.0);
        if i == last || w < 1e-9 {
            (i, 0.0)
        } else {
            (i, w)
        }
    }

    fn interpolate(mats: &[DMatrix<f64>], (i, w): (usize, f64)) -> DMatrix<f64> {
        if w == 0.0 {
            mats[i].clone()
        } else {
            &mats[i] * (1.0 - w) + &mats[i + 1] * w
        }
    }

    /// `K` at fraction `frac` of interval `k`, linear between dense points.
    pub fn gain_at(&self, k: usize, frac: f64) -> DMatrix<f64> {
        Self::interpolate(&self.dense_gains, self.dense_position(k, frac))
    }

    /// `S` at fraction `frac` of interval `k`, linear between dense points.
    pub fn cost_to_go_at(&self, k: usize, frac: f64) -> DMatrix<f64> {
        Self::interpolate(&self.dense_cost_to_go, self.dense_position(k, frac))
    }
}

pub fn quadratic_form(s: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(s * x))
}

/// Wraps an angle difference into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    a + 2.0 * PI * ((PI - a) / (2.0 * PI)).floor()
}

/// `x − x*` with angle components wrapped into `(−π, π]`.
pub fn error_coords(x: &DVector<f64>, reference: &DVector<f64>, angles: &[usize]) -> DVector<f64> {
    let mut e = x - reference;
    for &i in angles {
        e[i] = wrap_angle(e[i]);
    }
    e
}

fn symmetrize(s: &mut DMatrix<f64>) {
    let t = s.transpose();
    *s += t;
    *s *= 0.5;
}

/// Riccati right-hand side in reversed time, `dS/dτ = Q − S B R⁻¹ Bᵀ S + S A + Aᵀ S`.
fn riccati_rhs(
    s: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let sb = s * b;
    q - &sb * r_inv * sb.transpose() + s * a + a.transpose() * s
}

/// Substep count keeping `h` times the local Jacobian norm of the Riccati
/// flow below one, so that RK4 stays well inside its stability region.
fn riccati_substeps(s: &DMatrix<f64>, (a, b): &(DMatrix<f64>, DMatrix<f64>), r_inv: &DMatrix<f64>, dt: f64) -> usize {
    let inf_norm = |m: &DMatrix<f64>| m.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
    let closed = a - b * r_inv * b.transpose() * s;
    let rate = 2.0 * inf_norm(&closed);
    if !rate.is_finite() {
        return MAX_DRE_SUBSTEPS;
    }
    ((dt * rate).ceil() as usize).clamp(DRE_SUBSTEPS, MAX_DRE_SUBSTEPS)
}

/// Residual of the Riccati equation `Ṡ + Q − S B R⁻¹ Bᵀ S + S A + Aᵀ S` for a given `Ṡ`.
pub fn riccati_residual(
    s: &DMatrix<f64>,
    s_dot: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    costs: &ControllerCosts,
) -> DMatrix<f64> {
    s_dot + riccati_rhs(s, a, b, &costs.q(), &costs.r_inverse())
}

fn reference_state(traj: &NominalTrajectory, k: usize, frac: f64) -> DVector<f64> {
    if frac == 0.0 || k + 1 >= traj.len() {
        traj.states[k].clone()
    } else {
        &traj.states[k] + (&traj.states[k + 1] - &traj.states[k]) * frac
    }
}

/// Integrates the differential Riccati equation backward along `traj`.
///
/// Each interval takes a multiple of [`DRE_SUBSTEPS`] RK4 steps (more where
/// the flow is stiff); `S` is recorded on the `DRE_SUBSTEPS` grid.
pub fn solve_dre(
    traj: &NominalTrajectory,
    costs: &ControllerCosts,
    model: &dyn Dynamics,
) -> Result<GainSchedule, RiccatiError> {
    let (n, p) = (model.state_dim(), model.input_dim());
    costs.validate(n, p)?;
    let count = traj.len();
    let q = costs.q();
    let r_inv = costs.r_inverse();
    let dt = traj.dt();
    let m = DRE_SUBSTEPS;

    let mut dense = vec![DMatrix::zeros(n, n); (count - 1) * m + 1];
    dense[(count - 1) * m] = costs.q_final();
    let mut s = costs.q_final();

    for k in (0..count - 1).rev() {
        let u = &traj.inputs[k];
        let jac_at = |frac: f64| model.jacobians(&reference_state(traj, k, frac), u);
        let refine = riccati_substeps(&s, &jac_at(1.0), &r_inv, dt).div_ceil(m);
        let steps = m * refine;
        let h = dt / steps as f64;
        for j in (0..steps).rev() {
            // Step from fraction (j+1)/steps down to j/steps of the interval.
            let f1 = (j + 1) as f64 / steps as f64;
            let fm = (j as f64 + 0.5) / steps as f64;
            let f0 = j as f64 / steps as f64;
            let (a1, b1) = jac_at(f1);
            let (am, bm) = jac_at(fm);
            let (a0, b0) = jac_at(f0);
            let k1 = riccati_rhs(&s, &a1, &b1, &q, &r_inv);
            let k2 = riccati_rhs(&(&s + &k1 * (0.5 * h)), &am, &bm, &q, &r_inv);
            let k3 = riccati_rhs(&(&s + &k2 * (0.5 * h)), &am, &bm, &q, &r_inv);
            let k4 = riccati_rhs(&(&s + &k3 * h), &a0, &b0, &q, &r_inv);
            s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            symmetrize(&mut s);
            if !s.iter().all(|v| v.is_finite()) || s.amax() > BLOWUP_NORM {
                return Err(RiccatiError::NumericalBlowup { knot: k });
            }
            if j % refine == 0 {
                dense[k * m + j / refine] = s.clone();
            }
        }
    }

    let dense_gains: Vec<DMatrix<f64>> = dense
        .iter()
        .enumerate()
        .map(|(i, s_i)| {
            let (k, j) = (i / m, i % m);
            let (k, frac) = if k == count - 1 {
                (k, 0.0)
            } else {
                (k, j as f64 / m as f64)
            };
            let (_, b) = model.jacobians(&reference_state(traj, k, frac), &traj.inputs[k]);
            &r_inv * b.transpose() * s_i
        })
        .collect();
    Ok(GainSchedule {
        times: traj.times.clone(),
        cost_to_go: (0..count).map(|k| dense[k * m].clone()).collect(),
        gains: (0..count).map(|k| dense_gains[k * m].clone()).collect(),
        substeps: m,
        dense_cost_to_go: dense,
        dense_gains,
    })
}

/// Stationary solution of the Riccati equation linearized at a fixed point
/// `(x, u)`, reached by integrating the Riccati flow from `Q_f`. Returns
/// `(S_∞, K_∞)`.
pub fn stationary_riccati(
    model: &dyn Dynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    costs: &ControllerCosts,
) -> Result<(DMatrix<f64>, DMatrix<f64>), RiccatiError> {
    costs.validate(model.state_dim(), model.input_dim())?;
    let (a, b) = model.jacobians(x, u);
    let q = costs.q();
    let r_inv = costs.r_inverse();
    let mut s = costs.q_final();
    let mut tau = 0.0;
    while tau < 1e4 {
        let rhs = riccati_rhs(&s, &a, &b, &q, &r_inv);
        if rhs.amax() <= 1e-10 * s.amax().max(1.0) {
            let gain = &r_inv * b.transpose() * &s;
            return Ok((s, gain));
        }
        let h = 1.0 / riccati_substeps(&s, &(a.clone(), b.clone()), &r_inv, 1.0).max(1) as f64;
        let k1 = rhs;
        let k2 = riccati_rhs(&(&s + &k1 * (0.5 * h)), &a, &b, &q, &r_inv);
        let k3 = riccati_rhs(&(&s + &k2 * (0.5 * h)), &a, &b, &q, &r_inv);
        let k4 = riccati_rhs(&(&s + &k3 * h), &a, &b, &q, &r_inv);
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        symmetrize(&mut s);
        if !s.iter().all(|v| v.is_finite()) || s.amax() > BLOWUP_NORM {
            return Err(RiccatiError::NoStationarySolution);
        }
        tau += h;
    }
    Err(RiccatiError::NoStationarySolution)
}

/// The saturated tracking controller `u = sat(u* − K x̄)` together with the
/// plant, able to evaluate the policy anywhere on the grid and to roll out
/// the closed loop.
pub struct TrackingController<'a> {
    pub model: &'a dyn Dynamics,
    pub traj: &'a NominalTrajectory,
    pub schedule: &'a GainSchedule,
}

/// Closed-loop states recorded at each knot from the start knot to the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub start_knot: usize,
    pub knot_states: Vec<DVector<f64>>,
}

impl Rollout {
    pub fn final_state(&self) -> &DVector<f64> {
        self.knot_states.last().expect("rollout has at least one state")
    }
}

impl<'a> TrackingController<'a> {
    pub fn new(model: &'a dyn Dynamics, traj: &'a NominalTrajectory, schedule: &'a GainSchedule) -> Self {
        assert_eq!(traj.len(), schedule.len(), "trajectory and schedule differ in length");
        Self { model, traj, schedule }
    }

    /// Policy at interval `k`, fraction `frac ∈ [0, 1)` of the way to knot `k + 1`.
    pub fn control_on_grid(&self, x: &DVector<f64>, k: usize, frac: f64) -> DVector<f64> {
        let x_ref = reference_state(self.traj, k, frac);
        let gain = self.schedule.gain_at(k, frac);
        let err = error_coords(x, &x_ref, self.model.angle_indices());
        let limit = self.model.input_limit();
        (&self.traj.inputs[k] - gain * err).map(|u| u.clamp(-limit, limit))
    }

    /// Policy at an arbitrary time, clamped to the trajectory's time span.
    pub fn control(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let (k, frac) = self.locate(t);
        self.control_on_grid(x, k, frac)
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.traj.len() - 1;
        let pos = ((t - self.traj.times[0]) / self.traj.dt()).clamp(0.0, last as f64);
        let k = (pos.floor() as usize).min(last);
        if k == last {
            (last, 0.0)
        } else {
            (k, pos - k as f64)
        }
    }

    /// Error coordinates relative to the nominal state at time `t`.
    pub fn error_at(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let (k, frac) = self.locate(t);
        error_coords(x, &reference_state(self.traj, k, frac), self.model.angle_indices())
    }

    /// Simulates the saturated closed loop from `x0` at knot `start` to the
    /// final time, `substeps` RK4 steps per knot interval.
    pub fn rollout(&self, x0: &DVector<f64>, start: usize, substeps: usize) -> Rollout {
        let h = self.traj.dt() / substeps as f64;
        let mut x = x0.clone();
        let mut knot_states = Vec::with_capacity(self.traj.len() - start);
        knot_states.push(x.clone());
        for k in start..self.traj.len() - 1 {
            for j in 0..substeps {
                let u = self.control_on_grid(&x, k, j as f64 / substeps as f64);
                x = rk4_step(self.model, &x, &u, h);
            }
            if !x.iter().all(|v| v.is_finite()) {
                x.fill(f64::INFINITY);
            }
            knot_states.push(x.clone());
        }
        Rollout {
            start_knot: start,
            knot_states,
        }
    }

    /// Closed-loop simulation of the linearized error system
    /// `x̄̇ = A(t) x̄ + B(t) ū`, `ū = −K(t) x̄`, without saturation. Each
    /// interval takes at least `substeps` RK4 steps, more where the closed
    /// loop is stiff. Returns the error after every step.
    pub fn linear_error_rollout(&self, err0: &DVector<f64>, substeps: usize) -> Vec<(f64, DVector<f64>)> {
        let inf_norm = |m: &DMatrix<f64>| m.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
        let dt = self.traj.dt();
        let mut e = err0.clone();
        let mut out = vec![(self.traj.times[0], e.clone())];
        for k in 0..self.traj.len() - 1 {
            let u = &self.traj.inputs[k];
            let closed = |frac: f64| {
                let (a, b) = self.model.jacobians(&reference_state(self.traj, k, frac), u);
                a - b * self.schedule.gain_at(k, frac)
            };
            let dense = self.schedule.substeps;
            let rate = (0..=dense)
                .map(|j| inf_norm(&closed(j as f64 / dense as f64)))
                .fold(0.0, f64::max);
            let steps = ((2.0 * dt * rate).ceil() as usize).clamp(substeps.max(1), MAX_DRE_SUBSTEPS);
            let h = dt / steps as f64;
            for j in 0..steps {
                let f0 = j as f64 / steps as f64;
                let fm = (j as f64 + 0.5) / steps as f64;
                let f1 = (j + 1) as f64 / steps as f64;
                let (m0, mm, m1) = (closed(f0), closed(fm), closed(f1));
                let k1 = &m0 * &e;
                let k2 = &mm * (&e + &k1 * (0.5 * h));
                let k3 = &mm * (&e + &k2 * (0.5 * h));
                let k4 = &m1 * (&e + &k3 * h);
                e += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                out.push((self.traj.times[k] + f1 * dt, e.clone()));
            }
        }
        out
    }

    /// `V(x̄, t)` with `S` interpolated on the dense grid.
    pub fn cost_to_go_at(&self, err: &DVector<f64>, t: f64) -> f64 {
        let (k, frac) = self.locate(t);
        quadratic_form(&self.schedule.cost_to_go_at(k, frac), err)
    }
}
