//! Direct transcription of the swing-up optimal control problem.
//!
//! Knot `k` owns the decision block `[x_k, u_k]`; blocks are laid out in time
//! order so the Lagrangian Hessian is banded. Dynamics are enforced by one RK4
//! step per interval, the same integrator used for closed-loop rollouts.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rk4_step, rk4_step_with_jacobians, Dynamics, SystemModel};
use crate::nlp::{solve_augmented_lagrangian, BandMatrix, BandedNlp, MeritRecord, SolverOptions, SparseJacobian};

#[derive(Debug, Error)]
pub enum DirtranError {
    #[error("invalid trajectory setup: {0}")]
    InvalidSetup(String),
    #[error("infeasible bounds: {0}")]
    InfeasibleBounds(String),
    #[error("solver did not converge within {} outer iterations (max defect {:.3e})", .report.outer_iterations, .report.max_defect)]
    MaxIterations {
        best: Box<NominalTrajectory>,
        report: SolveReport,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajOptSetup {
    pub knots: usize,
    /// Final time [s]; the grid is uniform with `dt = horizon / (knots − 1)`.
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    pub goal_state: Vec<f64>,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    /// Diagonal of the running state cost `Q_T`.
    pub state_cost: Vec<f64>,
    /// Diagonal of the input cost `R_T`.
    pub input_cost: Vec<f64>,
    /// Diagonal of the final state cost `Q_Tf`.
    pub final_state_cost: Vec<f64>,
}

impl TrajOptSetup {
    /// Hanging-to-upright swing-up with the default grid and bounds for `model`.
    /// Input bounds are the model's actuator limit.
    pub fn swing_up(model: &SystemModel) -> Self {
        let u_max = model.input_limit();
        match model {
            SystemModel::Pendulum(_) => Self {
                knots: 51,
                horizon: 3.0,
                initial_state: vec![0.0, 0.0],
                goal_state: vec![PI, 0.0],
                state_lower: vec![-2.0 * PI, -20.0],
                state_upper: vec![2.0 * PI, 20.0],
                input_lower: vec![-u_max],
                input_upper: vec![u_max],
                state_cost: vec![10.0, 1.0],
                input_cost: vec![0.1],
                final_state_cost: vec![100.0; 2],
            },
            SystemModel::Cartpole(_) => Self {
                knots: 101,
                horizon: 5.0,
                initial_state: vec![0.0, 0.0, 0.0, 0.0],
                goal_state: vec![0.0, PI, 0.0, 0.0],
                state_lower: vec![-0.8, -2.0 * PI, -5.0, -20.0],
                state_upper: vec![0.8, 2.0 * PI, 5.0, 20.0],
                input_lower: vec![-u_max],
                input_upper: vec![u_max],
                state_cost: vec![10.0, 10.0, 1.0, 1.0],
                input_cost: vec![10.0],
                final_state_cost: vec![100.0; 4],
            },
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.knots - 1) as f64
    }

    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_lower.len()
    }

    pub fn validate(&self, model: &dyn Dynamics) -> Result<(), DirtranError> {
        let invalid = |m: String| Err(DirtranError::InvalidSetup(m));
        if self.knots < 2 {
            return invalid(format!("knots must be ≥ 2, got {}", self.knots));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {}", self.horizon));
        }
        let (n, p) = (model.state_dim(), model.input_dim());
        let lens = [
            ("initial_state", self.initial_state.len(), n),
            ("goal_state", self.goal_state.len(), n),
            ("state_lower", self.state_lower.len(), n),
            ("state_upper", self.state_upper.len(), n),
            ("state_cost", self.state_cost.len(), n),
            ("final_state_cost", self.final_state_cost.len(), n),
            ("input_lower", self.input_lower.len(), p),
            ("input_upper", self.input_upper.len(), p),
            ("input_cost", self.input_cost.len(), p),
        ];
        for (name, got, want) in lens {
            if got != want {
                return invalid(format!("{name} has length {got}, expected {want}"));
            }
        }
        if self
            .state_cost
            .iter()
            .chain(&self.final_state_cost)
            .any(|&q| !(q >= 0.0))
        {
            return invalid("state cost diagonals must be non-negative".into());
        }
        if self.input_cost.iter().any(|&r| !(r > 0.0)) {
            return invalid("input cost diagonal must be strictly positive".into());
        }
        let boxes = self
            .state_lower
            .iter()
            .zip(&self.state_upper)
            .chain(self.input_lower.iter().zip(&self.input_upper));
        for (i, (lo, hi)) in boxes.enumerate() {
            if !(lo <= hi) {
                return Err(DirtranError::InfeasibleBounds(format!(
                    "bound {i}: lower {lo} exceeds upper {hi}"
                )));
            }
        }
        for (name, x) in [("initial_state", &self.initial_state), ("goal_state", &self.goal_state)] {
            for i in 0..n {
                if x[i] < self.state_lower[i] || x[i] > self.state_upper[i] {
                    return Err(DirtranError::InfeasibleBounds(format!(
                        "{name}[{i}] = {} outside [{}, {}]",
                        x[i], self.state_lower[i], self.state_upper[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Knot-point arrays of an open-loop trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Largest dynamics-defect component.
    pub defect_norm: f64,
}

impl NominalTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64
    }

    pub fn final_time(&self) -> f64 {
        self.times[self.len() - 1]
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Recomputes the defect norm for `model`.
    pub fn max_defect(&self, model: &dyn Dynamics) -> f64 {
        let dt = self.dt();
        (0..self.len() - 1)
            .map(|k| (&self.states[k + 1] - rk4_step(model, &self.states[k], &self.inputs[k], dt)).amax())
            .fold(0.0, f64::max)
    }

    /// Refines the grid by inserting `factor − 1` points per interval, with
    /// states linearly interpolated and inputs held.
    pub fn refined(&self, factor: usize) -> NominalTrajectory {
        assert!(factor >= 1);
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        let dt = self.dt();
        for k in 0..self.len() - 1 {
            for j in 0..factor {
                let s = j as f64 / factor as f64;
                times.push(self.times[0] + (k as f64 + s) * dt);
                states.push(&self.states[k] * (1.0 - s) + &self.states[k + 1] * s);
                inputs.push(self.inputs[k].clone());
            }
        }
        times.push(self.final_time());
        states.push(self.states[self.len() - 1].clone());
        inputs.push(self.inputs[self.len() - 1].clone());
        NominalTrajectory {
            times,
            states,
            inputs,
            defect_norm: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub objective: f64,
    /// Augmented-Lagrangian value at the end of the last outer iteration.
    pub final_merit: f64,
    pub max_defect: f64,
    pub boundary_error: f64,
    pub projected_gradient: f64,
    pub merit_history: Vec<MeritRecord>,
}

/// The transcribed nonlinear program.
pub struct NlpProblem<'a> {
    pub setup: &'a TrajOptSetup,
    model: &'a dyn Dynamics,
    lower: DVector<f64>,
    upper: DVector<f64>,
    n: usize,
    p: usize,
    dt: f64,
}

/// Builds the NLP for `setup`; rejects inconsistent bounds.
pub fn transcribe<'a>(setup: &'a TrajOptSetup, model: &'a dyn Dynamics) -> Result<NlpProblem<'a>, DirtranError> {
    setup.validate(model)?;
    let (n, p) = (setup.state_dim(), setup.input_dim());
    let block = n + p;
    let dim = setup.knots * block;
    let mut lower = DVector::zeros(dim);
    let mut upper = DVector::zeros(dim);
    for k in 0..setup.knots {
        for i in 0..n {
            lower[k * block + i] = setup.state_lower[i];
            upper[k * block + i] = setup.state_upper[i];
        }
        for j in 0..p {
            lower[k * block + n + j] = setup.input_lower[j];
            upper[k * block + n + j] = setup.input_upper[j];
        }
    }
    Ok(NlpProblem {
        setup,
        model,
        lower,
        upper,
        n,
        p,
        dt: setup.dt(),
    })
}

impl NlpProblem<'_> {
    fn block(&self) -> usize {
        self.n + self.p
    }

    pub fn state(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(k * self.block(), self.n).into_owned()
    }

    pub fn input(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(k * self.block() + self.n, self.p).into_owned()
    }

    pub fn num_defect_constraints(&self) -> usize {
        (self.setup.knots - 1) * self.n
    }

    /// Index of the first constraint row of defect `k`.
    fn defect_row(&self, k: usize) -> usize {
        self.n + k * self.n
    }

    pub fn pack(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> DVector<f64> {
        let block = self.block();
        let mut z = DVector::zeros(self.dim());
        for k in 0..self.setup.knots {
            z.rows_mut(k * block, self.n).copy_from(&states[k]);
            z.rows_mut(k * block + self.n, self.p).copy_from(&inputs[k]);
        }
        z
    }

    /// Linear state interpolation between the boundary states, zero inputs.
    pub fn initial_guess(&self) -> DVector<f64> {
        let x0 = DVector::from_column_slice(&self.setup.initial_state);
        let xn = DVector::from_column_slice(&self.setup.goal_state);
        let last = (self.setup.knots - 1) as f64;
        let states: Vec<_> = (0..self.setup.knots)
            .map(|k| {
                let s = k as f64 / last;
                &x0 + (&xn - &x0) * s
            })
            .collect();
        let inputs = vec![DVector::zeros(self.p); self.setup.knots];
        self.pack(&states, &inputs)
    }

    /// Open-loop rollout of the model's energy-pumping feedback from the
    /// initial state, clipped to the bounds and resting at the goal from its
    /// closest approach on. Zero inputs if the model has no such feedback.
    pub fn pumping_guess(&self, model: &dyn Dynamics, kick: f64) -> DVector<f64> {
        let goal = self.goal();
        let clip = |v: DVector<f64>, lo: &[f64], hi: &[f64]| DVector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i]));
        let mut states = vec![DVector::from_column_slice(&self.setup.initial_state)];
        let mut inputs = Vec::with_capacity(self.setup.knots);
        for k in 0..self.setup.knots {
            let x = &states[k];
            let u = model
                .pumping_input(x, &goal, kick)
                .unwrap_or_else(|| DVector::zeros(self.p));
            let u = clip(u, &self.setup.input_lower, &self.setup.input_upper);
            if k + 1 < self.setup.knots {
                let next = rk4_step(model, x, &u, self.dt);
                states.push(clip(next, &self.setup.state_lower, &self.setup.state_upper));
            }
            inputs.push(u);
        }
        // Rest at the goal from the closest approach on.
        let closest = (0..states.len())
            .min_by(|&a, &b| (&states[a] - &goal).amax().total_cmp(&(&states[b] - &goal).amax()))
            .unwrap_or(0);
        for k in closest..states.len() {
            states[k] = goal.clone();
            inputs[k] = DVector::zeros(self.p);
        }
        self.pack(&states, &inputs)
    }

    pub fn unpack(&self, z: &DVector<f64>) -> NominalTrajectory {
        let knots = self.setup.knots;
        let times = (0..knots).map(|k| k as f64 * self.dt).collect();
        let states: Vec<_> = (0..knots).map(|k| self.state(z, k)).collect();
        let inputs: Vec<_> = (0..knots).map(|k| self.input(z, k)).collect();
        let mut traj = NominalTrajectory {
            times,
            states,
            inputs,
            defect_norm: 0.0,
        };
        traj.defect_norm = traj.max_defect(self.model);
        traj
    }

    fn goal(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.setup.goal_state)
    }
}

impl BandedNlp for NlpProblem<'_> {
    fn dim(&self) -> usize {
        self.setup.knots * self.block()
    }

    fn num_constraints(&self) -> usize {
        self.num_defect_constraints() + 2 * self.n
    }

    fn half_bandwidth(&self) -> usize {
        self.block() + self.n - 1
    }

    fn lower_bounds(&self) -> &DVector<f64> {
        &self.lower
    }

    fn upper_bounds(&self) -> &DVector<f64> {
        &self.upper
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let s = self.setup;
        let goal = self.goal();
        let mut total = 0.0;
        for k in 0..s.knots {
            let e = self.state(z, k) - &goal;
            let u = self.input(z, k);
            total += e.iter().zip(&s.state_cost).map(|(e, q)| q * e * e).sum::<f64>();
            total += u.iter().zip(&s.input_cost).map(|(u, r)| r * u * u).sum::<f64>();
        }
        let e = self.state(z, s.knots - 1) - &goal;
        total + e.iter().zip(&s.final_state_cost).map(|(e, q)| q * e * e).sum::<f64>()
    }

    fn objective_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let s = self.setup;
        let block = self.block();
        let mut g = DVector::zeros(self.dim());
        for k in 0..s.knots {
            for i in 0..self.n {
                let e = z[k * block + i] - s.goal_state[i];
                let mut q = s.state_cost[i];
                if k == s.knots - 1 {
                    q += s.final_state_cost[i];
                }
                g[k * block + i] = 2.0 * q * e;
            }
            for j in 0..self.p {
                g[k * block + self.n + j] = 2.0 * s.input_cost[j] * z[k * block + self.n + j];
            }
        }
        g
    }

    fn add_objective_hessian(&self, _z: &DVector<f64>, h: &mut BandMatrix) {
        let s = self.setup;
        let block = self.block();
        for k in 0..s.knots {
            for i in 0..self.n {
                let mut q = s.state_cost[i];
                if k == s.knots - 1 {
                    q += s.final_state_cost[i];
                }
                h.add(k * block + i, k * block + i, 2.0 * q);
            }
            for j in 0..self.p {
                let idx = k * block + self.n + j;
                h.add(idx, idx, 2.0 * s.input_cost[j]);
            }
        }
    }

    fn constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let s = self.setup;
        let mut c = DVector::zeros(self.num_constraints());
        let x0 = DVector::from_column_slice(&s.initial_state);
        c.rows_mut(0, self.n).copy_from(&(self.state(z, 0) - x0));
        for k in 0..s.knots - 1 {
            let next = rk4_step(self.model, &self.state(z, k), &self.input(z, k), self.dt);
            c.rows_mut(self.defect_row(k), self.n)
                .copy_from(&(self.state(z, k + 1) - next));
        }
        let last = self.defect_row(s.knots - 1);
        c.rows_mut(last, self.n)
            .copy_from(&(self.state(z, s.knots - 1) - self.goal()));
        c
    }

    fn constraint_jacobian(&self, z: &DVector<f64>) -> SparseJacobian {
        let s = self.setup;
        let (n, p, block) = (self.n, self.p, self.block());
        let mut rows = Vec::with_capacity(self.num_constraints());
        for i in 0..n {
            rows.push(vec![(i, 1.0)]);
        }
        for k in 0..s.knots - 1 {
            let (_, fx, fu) = rk4_step_with_jacobians(self.model, &self.state(z, k), &self.input(z, k), self.dt);
            for i in 0..n {
                let mut row = Vec::with_capacity(n + p + 1);
                for j in 0..n {
                    row.push((k * block + j, -fx[(i, j)]));
                }
                for j in 0..p {
                    row.push((k * block + n + j, -fu[(i, j)]));
                }
                row.push(((k + 1) * block + i, 1.0));
                rows.push(row);
            }
        }
        for i in 0..n {
            rows.push(vec![((s.knots - 1) * block + i, 1.0)]);
        }
        SparseJacobian { rows }
    }

    fn add_constraint_curvature(&self, z: &DVector<f64>, y: &DVector<f64>, h: &mut BandMatrix) {
        // c_k = x_{k+1} − F(x_k, u_k), so Σ y ∇²c = −∇²(yᵀF) on block k.
        // The Hessian of yᵀF is formed by central differences of its exact gradient.
        let s = self.setup;
        let (n, p, block) = (self.n, self.p, self.block());
        for k in 0..s.knots - 1 {
            let yk = y.rows(self.defect_row(k), n).into_owned();
            if yk.amax() == 0.0 {
                continue;
            }
            let w = z.rows(k * block, block).into_owned();
            let grad = |w: &DVector<f64>| {
                let x = w.rows(0, n).into_owned();
                let u = w.rows(n, p).into_owned();
                let (_, fx, fu) = rk4_step_with_jacobians(self.model, &x, &u, self.dt);
                let mut g = DVector::zeros(block);
                g.rows_mut(0, n).copy_from(&(fx.transpose() * &yk));
                g.rows_mut(n, p).copy_from(&(fu.transpose() * &yk));
                g
            };
            let mut hk = nalgebra::DMatrix::zeros(block, block);
            for j in 0..block {
                let step = 1e-6 * (1.0 + w[j].abs());
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += step;
                wm[j] -= step;
                hk.set_column(j, &((grad(&wp) - grad(&wm)) / (2.0 * step)));
            }
            for i in 0..block {
                for j in 0..=i {
                    let v = -0.5 * (hk[(i, j)] + hk[(j, i)]);
                    h.add(k * block + i, k * block + j, v);
                }
            }
        }
    }
}

/// Solves the transcribed problem from `initial` (or the default warm start).
pub fn solve_nlp(
    problem: &NlpProblem<'_>,
    initial: Option<&DVector<f64>>,
    opts: &SolverOptions,
) -> Result<(NominalTrajectory, SolveReport), DirtranError> {
    let z0 = match initial {
        Some(z) => z.clone(),
        None => problem.initial_guess(),
    };
    let sol = solve_augmented_lagrangian(problem, &z0, opts);
    let traj = problem.unpack(&sol.z);
    let goal = problem.goal();
    let boundary_error = (&traj.states[0] - DVector::from_column_slice(&problem.setup.initial_state))
        .amax()
        .max((&traj.states[traj.len() - 1] - goal).amax());
    let report = SolveReport {
        converged: sol.converged,
        outer_iterations: sol.outer_iterations,
        inner_iterations: sol.inner_iterations,
        objective: sol.objective,
        final_merit: sol.merit_history.last().map_or(sol.objective, |m| m.end),
        max_defect: traj.defect_norm,
        boundary_error,
        projected_gradient: sol.projected_gradient,
        merit_history: sol.merit_history,
    };
    if sol.converged {
        Ok((traj, report))
    } else {
        Err(DirtranError::MaxIterations {
            best: Box::new(traj),
            report,
        })
    }
}

/// (initial penalty, growth) schedules tried from a feasible swing-up, in order.
const WARM_START_PENALTIES: [(f64, f64); 3] = [(1e5, 10.0), (1e5, 3.0), (1e4, 10.0)];

/// Transcribes and solves in one call.
pub fn optimize_trajectory(
    setup: &TrajOptSetup,
    model: &dyn Dynamics,
    opts: &SolverOptions,
) -> Result<(NominalTrajectory, SolveReport), DirtranError> {
    let problem = transcribe(setup, model)?;
    let first = solve_nlp(&problem, None, opts);
    if !matches!(first, Err(DirtranError::MaxIterations { .. }))
        || model.pumping_input(&problem.goal(), &problem.goal(), 1.0).is_none()
    {
        return first;
    }
    // The straight-line guess leads torque-limited swing-ups into an
    // infeasible stationary point. Retry from an energy-pumping rollout: first
    // find any feasible swing-up, then optimize from it with a penalty stiff
    // enough that the cost cannot trade feasibility away.
    let mut feasibility = setup.clone();
    feasibility
        .state_cost
        .iter_mut()
        .chain(&mut feasibility.final_state_cost)
        .for_each(|q| *q = 0.0);
    feasibility.input_cost.iter_mut().for_each(|r| *r *= 1e-2);
    let feasibility = transcribe(&feasibility, model)?;
    for kick in [1.0, -1.0] {
        let Ok((feasible, _)) = solve_nlp(&feasibility, Some(&feasibility.pumping_guess(model, kick)), opts) else {
            continue;
        };
        let start = problem.pack(&feasible.states, &feasible.inputs);
        for (penalty, growth) in WARM_START_PENALTIES {
            let stiff = SolverOptions {
                initial_penalty: opts.initial_penalty.max(penalty).min(opts.max_penalty),
                penalty_growth: growth,
                ..*opts
            };
            let retry = solve_nlp(&problem, Some(&start), &stiff);
            if retry.is_ok() {
                return retry;
            }
        }
    }
    first
}
