//! Simulation-based estimation of a time-varying region of attraction.
//!
//! Each knot `k` carries a sublevel set `B_k = {x : x̄ᵀ S[k] x̄ < ρ[k]}`.
//! Estimation probes each region with samples, rolls the saturated closed
//! loop out to the final time and shrinks the probed region whenever a
//! rollout misses the goal region.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dirtran::NominalTrajectory;
use crate::dynamics::{rk4_step, Dynamics};
use crate::tvlqr::{error_coords, quadratic_form, GainSchedule, TrackingController};

/// Smallest admissible sublevel value.
pub const RHO_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunnelError {
    #[error("cost-to-go matrix is not positive definite")]
    CholeskyFailure,
    #[error("degenerate gain schedule: S[{knot}] is not positive definite")]
    DegenerateSchedule { knot: usize },
    #[error("goal region collapsed (ρ_N = {rho:e})")]
    GoalUnstabilizable { rho: f64 },
    #[error("invalid funnel options: {0}")]
    InvalidOptions(String),
}

/// Sublevel set `{x : (x − center)ᵀ S (x − center) < ρ}` around the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub rho: f64,
    pub cost_to_go: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl GoalRegion {
    pub fn value(&self, x: &DVector<f64>, angles: &[usize]) -> f64 {
        quadratic_form(&self.cost_to_go, &error_coords(x, &self.center, angles))
    }

    pub fn contains(&self, x: &DVector<f64>, angles: &[usize]) -> bool {
        self.value(x, angles) < self.rho
    }
}

/// Per-knot sublevel values together with the ellipsoids they scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Funnel {
    pub times: Vec<f64>,
    pub rho: Vec<f64>,
    pub cost_to_go: Vec<DMatrix<f64>>,
    pub centers: Vec<DVector<f64>>,
    pub goal: GoalRegion,
}

impl Funnel {
    /// A funnel with every knot at `initial_rho`.
    pub fn uniform(traj: &NominalTrajectory, sched: &GainSchedule, goal: GoalRegion, initial_rho: f64) -> Self {
        Self {
            times: traj.times.clone(),
            rho: vec![initial_rho; traj.len()],
            cost_to_go: sched.cost_to_go.clone(),
            centers: traj.states.clone(),
            goal,
        }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn value(&self, knot: usize, x: &DVector<f64>, angles: &[usize]) -> f64 {
        quadratic_form(&self.cost_to_go[knot], &error_coords(x, &self.centers[knot], angles))
    }

    /// Applies the shrink rule `ρ_new = min(V, ρ_old)` to a single knot.
    /// Returns whether the value changed.
    pub fn shrink(&mut self, knot: usize, value: f64) -> bool {
        let mut next = value.min(self.rho[knot]);
        if next < RHO_FLOOR {
            warn!("ρ[{knot}] = {next:e} floored at {RHO_FLOOR:e}");
            next = RHO_FLOOR;
        }
        let changed = next < self.rho[knot];
        self.rho[knot] = next;
        changed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunnelOptions {
    /// Probes per knot; estimation runs this many round-robin rounds.
    pub samples_per_knot: usize,
    /// Initial hypothesis `ρ[k]` for every knot.
    pub initial_rho: f64,
    /// RK4 substeps per knot interval in closed-loop rollouts.
    pub rollout_substeps: usize,
}

impl Default for FunnelOptions {
    fn default() -> Self {
        Self {
            samples_per_knot: 100,
            initial_rho: 10.0,
            rollout_substeps: 10,
        }
    }
}

impl FunnelOptions {
    pub fn validate(&self) -> Result<(), FunnelError> {
        if self.samples_per_knot == 0 {
            return Err(FunnelError::InvalidOptions("samples_per_knot must be ≥ 1".into()));
        }
        if !(self.initial_rho > 0.0 && self.initial_rho.is_finite()) {
            return Err(FunnelError::InvalidOptions("initial_rho must be positive".into()));
        }
        if self.rollout_substeps == 0 {
            return Err(FunnelError::InvalidOptions("rollout_substeps must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub simulations: usize,
    pub falsifications: Vec<usize>,
    pub rho: Vec<f64>,
    /// Successful rollouts that left a downstream region on the way.
    pub containment_exits: usize,
    #[serde(skip)]
    pub rho_history: Vec<Vec<f64>>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// A pre-drawn probe in whitened coordinates: unit direction and radius
/// fraction, mapped onto a region once its current `ρ` is known.
#[derive(Debug, Clone)]
struct Probe {
    direction: DVector<f64>,
    radius: f64,
}

impl Probe {
    fn draw<R: Rng + ?Sized>(dim: usize, interior: bool, rng: &mut R) -> Self {
        let direction = unit_direction(dim, rng);
        let radius = if interior {
            rng.random::<f64>().powf(1.0 / dim as f64)
        } else {
            1.0
        };
        Self { direction, radius }
    }

    /// Offset `x̄` with `x̄ᵀ S x̄ = ρ r²`, using `whiten = L⁻ᵀ` where `L Lᵀ = S`.
    fn offset(&self, whiten: &DMatrix<f64>, rho: f64) -> DVector<f64> {
        whiten * &self.direction * (rho.sqrt() * self.radius)
    }
}

fn unit_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = z.norm();
        if norm > 1e-300 {
            return z / norm;
        }
    }
}

/// `L⁻ᵀ` for the Cholesky factor `L Lᵀ = S`.
fn whitening(s: &DMatrix<f64>) -> Result<DMatrix<f64>, FunnelError> {
    let chol = s.clone().cholesky().ok_or(FunnelError::CholeskyFailure)?;
    let lt = chol.l().transpose();
    lt.solve_upper_triangular(&DMatrix::identity(s.nrows(), s.ncols()))
        .ok_or(FunnelError::CholeskyFailure)
}

fn whitening_all(mats: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, FunnelError> {
    mats.iter()
        .enumerate()
        .map(|(k, s)| whitening(s).map_err(|_| FunnelError::DegenerateSchedule { knot: k }))
        .collect()
}

/// A point on the boundary `{x : (x − c)ᵀ S (x − c) = ρ}`, uniformly
/// distributed in the whitened angle.
pub fn sample_on_level_set<R: Rng + ?Sized>(
    s: &DMatrix<f64>,
    rho: f64,
    center: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, FunnelError> {
    let whiten = whitening(s)?;
    Ok(center + Probe::draw(s.nrows(), false, rng).offset(&whiten, rho))
}

/// A point uniformly distributed inside `{x : (x − c)ᵀ S (x − c) < ρ}`.
pub fn sample_in_sublevel_set<R: Rng + ?Sized>(
    s: &DMatrix<f64>,
    rho: f64,
    center: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, FunnelError> {
    let whiten = whitening(s)?;
    Ok(center + Probe::draw(s.nrows(), true, rng).offset(&whiten, rho))
}

fn round_rng(seed: u64, round: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round);
    rng
}

/// Estimates the funnel by falsification.
///
/// Every round draws one interior probe per knot (backward from the last
/// knot, from a random stream derived from `seed` and the round index).
/// A probe at knot `k` whose saturated closed-loop rollout misses the goal
/// region at the final time shrinks `ρ[k]` to the probe's value `V_k(x̄)`;
/// no other knot is touched. Because each knot's probe depends only on its
/// own `ρ`, the rollouts of a round run in parallel without affecting the
/// result.
pub fn estimate_funnel(
    model: &dyn Dynamics,
    traj: &NominalTrajectory,
    sched: &GainSchedule,
    goal: GoalRegion,
    opts: &FunnelOptions,
    seed: u64,
) -> Result<(Funnel, EstimationReport), FunnelError> {
    opts.validate()?;
    let started = Instant::now();
    let whiten = whitening_all(&sched.cost_to_go)?;
    let ctl = TrackingController::new(model, traj, sched);
    let angles = model.angle_indices();
    let count = traj.len();
    let dim = model.state_dim();

    let mut funnel = Funnel::uniform(traj, sched, goal, opts.initial_rho);
    let mut falsifications = vec![0; count];
    let mut containment_exits = 0;
    let mut rho_history = Vec::with_capacity(opts.samples_per_knot);

    for round in 0..opts.samples_per_knot {
        let mut rng = round_rng(seed, round as u64);
        let probes: Vec<(usize, Probe)> = (0..count)
            .rev()
            .map(|k| (k, Probe::draw(dim, true, &mut rng)))
            .collect();

        let outcomes: Vec<(usize, f64, bool, bool)> = probes
            .par_iter()
            .map(|(k, probe)| {
                let k = *k;
                let offset = probe.offset(&whiten[k], funnel.rho[k]);
                let value = quadratic_form(&funnel.cost_to_go[k], &offset);
                let rollout = ctl.rollout(&(&traj.states[k] + offset), k, opts.rollout_substeps);
                let success = funnel.goal.contains(rollout.final_state(), angles);
                let exited = rollout
                    .knot_states
                    .iter()
                    .enumerate()
                    .skip(1)
                    .any(|(i, x)| !(funnel.value(k + i, x, angles) < funnel.rho[k + i]));
                (k, value, success, exited)
            })
            .collect();

        for (k, value, success, exited) in outcomes {
            if success {
                containment_exits += usize::from(exited);
            } else {
                falsifications[k] += 1;
                funnel.shrink(k, value);
            }
        }
        rho_history.push(funnel.rho.clone());
    }

    let report = EstimationReport {
        simulations: opts.samples_per_knot * count,
        falsifications,
        rho: funnel.rho.clone(),
        containment_exits,
        rho_history,
        wall_time: started.elapsed(),
    };
    Ok((funnel, report))
}

/// Per-knot success rates of interior samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub samples_per_knot: usize,
    pub success_rate: Vec<f64>,
    pub overall_success_rate: f64,
}

/// Samples uniformly inside each region, rolls out the saturated closed loop
/// and reports the fraction of rollouts that end in the goal region.
pub fn verify_funnel(
    model: &dyn Dynamics,
    funnel: &Funnel,
    traj: &NominalTrajectory,
    sched: &GainSchedule,
    samples_per_knot: usize,
    rollout_substeps: usize,
    seed: u64,
) -> Result<VerificationReport, FunnelError> {
    if samples_per_knot == 0 || rollout_substeps == 0 {
        return Err(FunnelError::InvalidOptions(
            "sample and substep counts must be ≥ 1".into(),
        ));
    }
    let whiten = whitening_all(&funnel.cost_to_go)?;
    let ctl = TrackingController::new(model, traj, sched);
    let angles = model.angle_indices();
    let dim = model.state_dim();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<(usize, Probe)> = (0..funnel.len())
        .flat_map(|k| std::iter::repeat_n(k, samples_per_knot))
        .map(|k| (k, Probe::draw(dim, true, &mut rng)))
        .collect();
    let hits: Vec<(usize, bool)> = probes
        .par_iter()
        .map(|(k, probe)| {
            let x0 = &funnel.centers[*k] + probe.offset(&whiten[*k], funnel.rho[*k]);
            let rollout = ctl.rollout(&x0, *k, rollout_substeps);
            (*k, funnel.goal.contains(rollout.final_state(), angles))
        })
        .collect();

    let mut successes = vec![0usize; funnel.len()];
    for (k, ok) in hits {
        successes[k] += usize::from(ok);
    }
    let total: usize = successes.iter().sum();
    Ok(VerificationReport {
        samples_per_knot,
        success_rate: successes.iter().map(|&s| s as f64 / samples_per_knot as f64).collect(),
        overall_success_rate: total as f64 / (samples_per_knot * funnel.len()) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalOptions {
    pub initial_rho: f64,
    /// Duration of each hold rollout [s].
    pub hold_time: f64,
    /// Integration step of hold rollouts [s].
    pub step: f64,
    pub samples: usize,
    /// Final error norm counted as converged.
    pub convergence_tol: f64,
}

impl Default for GoalOptions {
    fn default() -> Self {
        Self {
            initial_rho: 1.0,
            hold_time: 2.0,
            step: 0.005,
            samples: 100,
            convergence_tol: 1e-2,
        }
    }
}

impl GoalOptions {
    pub fn validate(&self) -> Result<(), FunnelError> {
        let positive = [self.initial_rho, self.hold_time, self.step, self.convergence_tol];
        if !positive.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(FunnelError::InvalidOptions(
                "goal initial_rho, hold_time, step and convergence_tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Falsifies the goal region `{x̄ᵀ S x̄ < ρ_N}` (with `S = S[N−1]`) under
/// the constant hold gain `u = sat(−K x̄)` (zero feedforward: the goal is an
/// equilibrium). A hold rollout succeeds when it stays inside the initial
/// region and ends within `convergence_tol` of the goal.
pub fn goal_region_from_samples(
    model: &dyn Dynamics,
    cost_to_go: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    goal_state: &DVector<f64>,
    opts: &GoalOptions,
    seed: u64,
) -> Result<GoalRegion, FunnelError> {
    opts.validate()?;
    let s = cost_to_go.clone();
    let whiten = whitening(&s)?;
    let angles = model.angle_indices();
    let limit = model.input_limit();
    let steps = (opts.hold_time / opts.step).ceil() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rho = opts.initial_rho;
    for _ in 0..opts.samples {
        let offset = Probe::draw(s.nrows(), true, &mut rng).offset(&whiten, rho);
        let value = quadratic_form(&s, &offset);
        let mut x = goal_state + &offset;
        let mut held = true;
        for _ in 0..steps {
            let err = error_coords(&x, goal_state, angles);
            let u = (-(gain * &err)).map(|v| v.clamp(-limit, limit));
            x = rk4_step(model, &x, &u, opts.step);
            let err = error_coords(&x, goal_state, angles);
            if !(quadratic_form(&s, &err) < opts.initial_rho) {
                held = false;
                break;
            }
        }
        let converged = held && error_coords(&x, goal_state, angles).norm() < opts.convergence_tol;
        if !converged {
            rho = rho.min(value);
            if rho < RHO_FLOOR {
                return Err(FunnelError::GoalUnstabilizable { rho });
            }
        }
    }
    Ok(GoalRegion {
        rho,
        cost_to_go: s,
        center: goal_state.clone(),
    })
}

/// Volume of the unit ball in `d` dimensions, `π^{d/2} / Γ(d/2 + 1)`.
pub fn unit_ball_volume(d: usize) -> f64 {
    // Γ(d/2 + 1) by the recurrence from Γ(1) = 1 or Γ(3/2) = √π/2.
    let (mut gamma, mut arg) = if d % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt() / 2.0, 1.5) };
    let target = d as f64 / 2.0 + 1.0;
    while arg < target - 0.25 {
        gamma *= arg;
        arg += 1.0;
    }
    PI.powf(d as f64 / 2.0) / gamma
}

/// Volume of `{x̄ : x̄ᵀ S x̄ ≤ ρ}`.
pub fn ellipsoid_volume(s: &DMatrix<f64>, rho: f64) -> f64 {
    let d = s.nrows();
    unit_ball_volume(d) * rho.powf(d as f64 / 2.0) / s.determinant().sqrt()
}

/// Sum of the per-knot ellipsoid volumes.
pub fn funnel_volume(funnel: &Funnel) -> f64 {
    funnel
        .cost_to_go
        .iter()
        .zip(&funnel.rho)
        .map(|(s, &rho)| ellipsoid_volume(s, rho))
        .sum()
}

/// Boundary points of the projection of knot `k`'s region onto the
/// coordinate pair `(a, b)`.
pub fn projected_ellipse(funnel: &Funnel, knot: usize, a: usize, b: usize, points: usize) -> Vec<(f64, f64)> {
    // The projection of {x̄ᵀ S x̄ ≤ ρ} has shape matrix ρ (S⁻¹)_{ab}.
    let shape = funnel.cost_to_go[knot]
        .clone()
        .try_inverse()
        .map(|inv| inv * funnel.rho[knot])
        .unwrap_or_else(|| DMatrix::zeros(funnel.cost_to_go[knot].nrows(), funnel.cost_to_go[knot].nrows()));
    let block = nalgebra::Matrix2::new(shape[(a, a)], shape[(a, b)], shape[(b, a)], shape[(b, b)]);
    let l = block.cholesky().map(|c| c.l()).unwrap_or_else(nalgebra::Matrix2::zeros);
    let c = &funnel.centers[knot];
    (0..points)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / points as f64;
            let p = l * nalgebra::Vector2::new(phi.cos(), phi.sin());
            (c[a] + p[0], c[b] + p[1])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearSystem;

    #[test]
    fn level_set_sample_on_unit_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = DMatrix::identity(2, 2);
        for _ in 0..100 {
            let x = sample_on_level_set(&s, 1.0, &DVector::zeros(2), &mut rng).unwrap();
            assert!((x.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn level_set_sample_has_requested_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let c = DVector::from_vec(vec![1.0, -2.0, 0.3]);
        for rho in [1e-4, 0.7, 25.0] {
            for _ in 0..50 {
                let x = sample_on_level_set(&s, rho, &c, &mut rng).unwrap();
                let v = quadratic_form(&s, &(&x - &c));
                assert!((v - rho).abs() <= 1e-9 * rho.max(1.0));
            }
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            sample_on_level_set(&s, 1.0, &DVector::zeros(2), &mut rng),
            Err(FunnelError::CholeskyFailure)
        );
    }

    #[test]
    fn shrink_takes_minimum_on_one_knot() {
        let s = DMatrix::identity(2, 2);
        let mut funnel = Funnel {
            times: vec![0.0, 1.0, 2.0],
            rho: vec![2.0, 2.0, 2.0],
            cost_to_go: vec![s.clone(); 3],
            centers: vec![DVector::zeros(2); 3],
            goal: GoalRegion {
                rho: 1.0,
                cost_to_go: s,
                center: DVector::zeros(2),
            },
        };
        assert!(funnel.shrink(1, 1.5));
        assert_eq!(funnel.rho, vec![2.0, 1.5, 2.0]);
        assert!(!funnel.shrink(1, 1.7));
        assert_eq!(funnel.rho, vec![2.0, 1.5, 2.0]);
        funnel.shrink(0, 0.0);
        assert_eq!(funnel.rho[0], RHO_FLOOR);
    }

    #[test]
    fn simple_volumes() {
        assert!((ellipsoid_volume(&DMatrix::identity(2, 2), 1.0) - PI).abs() < 1e-14);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert!((ellipsoid_volume(&s, 1.0) - PI / 2.0).abs() < 1e-14);
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-14);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-13);
        assert!((unit_ball_volume(4) - PI * PI / 2.0).abs() < 1e-13);
    }

    fn lqr_double_integrator(count: usize) -> (LinearSystem, NominalTrajectory, GainSchedule) {
        // ARE solution for Q = I, R = 1.
        let r3 = 3f64.sqrt();
        let s = DMatrix::from_row_slice(2, 2, &[r3, 1.0, 1.0, r3]);
        let k = DMatrix::from_row_slice(1, 2, &[1.0, r3]);
        let traj = NominalTrajectory {
            times: (0..count).map(|i| i as f64 * 0.1).collect(),
            states: vec![DVector::zeros(2); count],
            inputs: vec![DVector::zeros(1); count],
            defect_norm: 0.0,
        };
        let sched = GainSchedule::from_knots(traj.times.clone(), vec![s; count], vec![k; count]);
        (LinearSystem::double_integrator(), traj, sched)
    }

    #[test]
    fn stable_linear_goal_keeps_initial_guess() {
        let (plant, _, sched) = lqr_double_integrator(5);
        let opts = GoalOptions {
            hold_time: 12.0,
            samples: 50,
            ..GoalOptions::default()
        };
        let (s, k) = (&sched.cost_to_go[4], &sched.gains[4]);
        let goal = goal_region_from_samples(&plant, s, k, &DVector::zeros(2), &opts, 7).unwrap();
        assert_eq!(goal.rho, opts.initial_rho);
    }

    #[test]
    fn unactuated_goal_collapses() {
        use crate::dynamics::{PendulumParams, SystemModel};
        let model = SystemModel::Pendulum(PendulumParams {
            torque_limit: 0.0,
            ..PendulumParams::default()
        });
        let s = DMatrix::identity(2, 2) * 100.0;
        let (_, b) = model.jacobians(&DVector::from_vec(vec![PI, 0.0]), &DVector::zeros(1));
        let gain = b.transpose() * &s * 10.0;
        let goal = DVector::from_vec(vec![PI, 0.0]);
        let err = goal_region_from_samples(&model, &s, &gain, &goal, &GoalOptions::default(), 1);
        assert!(matches!(err, Err(FunnelError::GoalUnstabilizable { .. })));
    }

    #[test]
    fn stable_loop_is_never_falsified_and_is_deterministic() {
        let (plant, traj, sched) = lqr_double_integrator(11);
        let goal = GoalRegion {
            rho: 10.0,
            cost_to_go: sched.cost_to_go[10].clone(),
            center: DVector::zeros(2),
        };
        let opts = FunnelOptions {
            samples_per_knot: 5,
            initial_rho: 1.0,
            rollout_substeps: 4,
        };
        let (funnel, report) = estimate_funnel(&plant, &traj, &sched, goal.clone(), &opts, 9).unwrap();
        assert_eq!(funnel.rho, vec![1.0; 11]);
        assert_eq!(report.falsifications, vec![0; 11]);
        assert_eq!(report.simulations, 55);

        // A goal region that nothing can reach forces every knot to shrink.
        let tight = GoalRegion { rho: 1e-30, ..goal };
        let (a, ra) = estimate_funnel(&plant, &traj, &sched, tight.clone(), &opts, 9).unwrap();
        let (b, _) = estimate_funnel(&plant, &traj, &sched, tight, &opts, 9).unwrap();
        assert_eq!(a.rho, b.rho);
        assert!(a.rho.iter().all(|&r| r < 1.0));
        for w in ra.rho_history.windows(2) {
            assert!(w[1].iter().zip(&w[0]).all(|(n, o)| n <= o));
        }
    }

    #[test]
    fn projection_of_circle_is_circle() {
        let s = DMatrix::identity(2, 2) * 4.0;
        let funnel = Funnel {
            times: vec![0.0],
            rho: vec![1.0],
            cost_to_go: vec![s.clone()],
            centers: vec![DVector::from_vec(vec![1.0, 2.0])],
            goal: GoalRegion {
                rho: 1.0,
                cost_to_go: s,
                center: DVector::zeros(2),
            },
        };
        for (a, b) in projected_ellipse(&funnel, 0, 0, 1, 16) {
            assert!((((a - 1.0).powi(2) + (b - 2.0).powi(2)).sqrt() - 0.5).abs() < 1e-12);
        }
    }
}
