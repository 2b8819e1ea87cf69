//! Robust trajectory/controller co-optimization (inner layer) and design
//! optimization on top of it (outer layer).
//!
//! The inner objective runs the whole pipeline — trajectory optimization,
//! Riccati synthesis, goal region, funnel estimation — for one set of cost
//! weights and returns the negated funnel volume. Every stage failure maps
//! to `+∞`. Both layers are searched with CMA-ES; the initial point is
//! always part of the first generation, so the best volume never falls
//! below the baseline.

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmaes::{minimize, CmaesError, CmaesOptions, SearchSpace, TraceRow, Variable};
use crate::dirtran::{optimize_trajectory, DirtranError, NominalTrajectory, SolveReport, TrajOptSetup};
use crate::dynamics::{Dynamics, ModelError, SystemModel};
use crate::funnel::{
    estimate_funnel, funnel_volume, goal_region_from_samples, EstimationReport, Funnel, FunnelError, FunnelOptions,
    GoalOptions, GoalRegion,
};
use crate::nlp::SolverOptions;
use crate::tvlqr::{solve_dre, stationary_riccati, ControllerCosts, GainSchedule, RiccatiError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trajectory(#[from] DirtranError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Funnel(#[from] FunnelError),
    #[error("invalid decision: {0}")]
    Decision(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodesignError {
    #[error(transparent)]
    Search(#[from] CmaesError),
    #[error("initial point is infeasible: {0}")]
    InfeasibleInitialPoint(String),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
}

/// Derives an independent sub-seed for one consumer of randomness.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

const FUNNEL_STREAM: u64 = 1;
const GOAL_STREAM: u64 = 2;
const INNER_SEARCH_STREAM: u64 = 3;
const OUTER_SEARCH_STREAM: u64 = 4;
pub const VERIFICATION_STREAM: u64 = 5;

/// Shared trajectory and controller weights (`Q_T = Q_C`, `R_T = R_C`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub state_cost: Vec<f64>,
    pub input_cost: Vec<f64>,
}

impl Hyperparameters {
    pub fn from_setup(setup: &TrajOptSetup) -> Self {
        Self {
            state_cost: setup.state_cost.clone(),
            input_cost: setup.input_cost.clone(),
        }
    }

    /// Overwrites the weights named in `space` (`q11`, `q22`, …, `r11`, …).
    pub fn with_decision(mut self, space: &SearchSpace, x: &[f64]) -> Result<Self, PipelineError> {
        for (var, &value) in space.variables.iter().zip(x) {
            let slot = diagonal_slot(&var.name)
                .and_then(|(is_state, i)| {
                    if is_state {
                        self.state_cost.get_mut(i)
                    } else {
                        self.input_cost.get_mut(i)
                    }
                })
                .ok_or_else(|| PipelineError::Decision(format!("unknown cost weight `{}`", var.name)))?;
            *slot = value;
        }
        Ok(self)
    }
}

/// Parses `qII` / `rII` into (is-state-weight, zero-based index).
fn diagonal_slot(name: &str) -> Option<(bool, usize)> {
    let (is_state, digits) = match name.split_at_checked(1)? {
        ("q", rest) => (true, rest),
        ("r", rest) => (false, rest),
        _ => return None,
    };
    let half = digits.len() / 2;
    if digits.len() % 2 != 0 || digits[..half] != digits[half..] {
        return None;
    }
    let i: usize = digits[..half].parse().ok()?;
    Some((is_state, i.checked_sub(1)?))
}

/// Applies named design parameters to a model.
pub fn design_model(base: &SystemModel, space: &SearchSpace, x: &[f64]) -> Result<SystemModel, ModelError> {
    space
        .variables
        .iter()
        .zip(x)
        .try_fold(*base, |model, (var, &value)| model.with_parameter(&var.name, value))
}

/// Fixed ingredients of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    /// Grid, boundary conditions, bounds and `Q_f`; its cost weights are the
    /// defaults replaced by the decision.
    pub trajectory: TrajOptSetup,
    pub solver: SolverOptions,
    pub goal: GoalOptions,
    pub funnel: FunnelOptions,
}

/// Every artifact of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: SystemModel,
    pub hyperparameters: Hyperparameters,
    pub trajectory: NominalTrajectory,
    pub solve_report: SolveReport,
    pub schedule: GainSchedule,
    pub goal: GoalRegion,
    pub funnel: Funnel,
    pub estimation: EstimationReport,
    pub volume: f64,
}

impl Pipeline {
    /// Trajectory setup for `model` and `hyper`; input bounds are clipped to
    /// the model's actuator limit.
    pub fn setup_for(&self, model: &SystemModel, hyper: &Hyperparameters) -> TrajOptSetup {
        let mut setup = self.trajectory.clone();
        setup.state_cost = hyper.state_cost.clone();
        setup.input_cost = hyper.input_cost.clone();
        let limit = model.input_limit();
        for lo in &mut setup.input_lower {
            *lo = lo.max(-limit);
        }
        for hi in &mut setup.input_upper {
            *hi = hi.min(limit);
        }
        setup
    }

    pub fn controller_costs(&self, hyper: &Hyperparameters) -> ControllerCosts {
        ControllerCosts {
            state_cost: hyper.state_cost.clone(),
            input_cost: hyper.input_cost.clone(),
            final_state_cost: self.trajectory.final_state_cost.clone(),
        }
    }

    /// Goal region and funnel around an existing trajectory and schedule.
    pub fn region_of_attraction(
        &self,
        model: &SystemModel,
        hyper: &Hyperparameters,
        trajectory: &NominalTrajectory,
        schedule: &GainSchedule,
        seed: u64,
    ) -> Result<(GoalRegion, Funnel, EstimationReport), PipelineError> {
        let costs = self.controller_costs(hyper);
        let last = trajectory.len() - 1;
        let goal_state = DVector::from_column_slice(&self.trajectory.goal_state);
        let (_, hold_gain) = stationary_riccati(model, &goal_state, &DVector::zeros(model.input_dim()), &costs)?;
        let goal = goal_region_from_samples(
            model,
            &schedule.cost_to_go[last],
            &hold_gain,
            &goal_state,
            &self.goal,
            derive_seed(seed, GOAL_STREAM),
        )?;
        let (funnel, estimation) = estimate_funnel(
            model,
            trajectory,
            schedule,
            goal.clone(),
            &self.funnel,
            derive_seed(seed, FUNNEL_STREAM),
        )?;
        Ok((goal, funnel, estimation))
    }

    /// Runs trajectory optimization, Riccati synthesis, goal-region and
    /// funnel estimation. `seed` drives all sampling.
    pub fn run(
        &self,
        model: &SystemModel,
        hyper: &Hyperparameters,
        seed: u64,
    ) -> Result<PipelineOutput, PipelineError> {
        model.validate()?;
        let setup = self.setup_for(model, hyper);
        let (trajectory, solve_report) = optimize_trajectory(&setup, model, &self.solver)?;
        let costs = self.controller_costs(hyper);
        let schedule = solve_dre(&trajectory, &costs, model)?;
        let (goal, funnel, estimation) = self.region_of_attraction(model, hyper, &trajectory, &schedule, seed)?;
        let volume = funnel_volume(&funnel);
        Ok(PipelineOutput {
            model: *model,
            hyperparameters: hyper.clone(),
            trajectory,
            solve_report,
            schedule,
            goal,
            funnel,
            estimation,
            volume,
        })
    }
}

/// Default RTC search space: diagonal position weights and the input weight.
pub fn default_hyper_space(model: &SystemModel) -> SearchSpace {
    let _ = model;
    SearchSpace {
        variables: vec![
            Variable::linear("q11", 0.1, 100.0),
            Variable::linear("q22", 0.1, 100.0),
            Variable::log("r11", 0.01, 100.0),
        ],
    }
}

/// Default RTC-D design space (pendulum: mass and length).
pub fn default_design_space(model: &SystemModel) -> SearchSpace {
    match model {
        SystemModel::Pendulum(_) => SearchSpace {
            variables: vec![Variable::linear("mass", 0.3, 1.0), Variable::linear("length", 0.2, 0.6)],
        },
        SystemModel::Cartpole(_) => SearchSpace {
            variables: vec![
                Variable::linear("pole_mass", 0.1, 0.5),
                Variable::linear("pole_length", 0.1, 0.4),
            ],
        },
    }
}

/// Current value of each named variable in `model` / `hyper`.
pub fn current_values(space: &SearchSpace, model: &SystemModel, hyper: &Hyperparameters) -> Option<Vec<f64>> {
    space
        .variables
        .iter()
        .map(|v| match diagonal_slot(&v.name) {
            Some((true, i)) => hyper.state_cost.get(i).copied(),
            Some((false, i)) => hyper.input_cost.get(i).copied(),
            None => model_parameter(model, &v.name),
        })
        .collect()
}

fn model_parameter(model: &SystemModel, name: &str) -> Option<f64> {
    match (model, name) {
        (SystemModel::Pendulum(p), "mass") => Some(p.mass),
        (SystemModel::Pendulum(p), "length") => Some(p.length),
        (SystemModel::Pendulum(p), "damping") => Some(p.damping),
        (SystemModel::Pendulum(p), "torque_limit") => Some(p.torque_limit),
        (SystemModel::Cartpole(p), "pole_mass") => Some(p.pole_mass),
        (SystemModel::Cartpole(p), "pole_length") => Some(p.pole_length),
        (SystemModel::Cartpole(p), "cart_mass") => Some(p.cart_mass),
        (SystemModel::Cartpole(p), "damping") => Some(p.damping),
        (SystemModel::Cartpole(p), "force_limit") => Some(p.force_limit),
        _ => None,
    }
}

/// One objective evaluation, as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    /// Outer-layer evaluation index (0 for plain RTC runs).
    pub outer: usize,
    pub index: usize,
    pub generation: usize,
    pub design: Vec<f64>,
    pub hyperparameters: Vec<f64>,
    pub fitness: f64,
    pub volume: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CodesignResult {
    pub design_space: SearchSpace,
    pub hyper_space: SearchSpace,
    pub best_design: Vec<f64>,
    pub best_hyperparameters: Vec<f64>,
    /// Objective-budget funnel volume of the best point (`ℓ*`).
    pub best_volume: f64,
    /// Objective-budget funnel volume of the initial point (`ℓ⁰`).
    pub initial_volume: f64,
    pub evaluations: Vec<EvaluationRecord>,
    pub trace: Vec<TraceRow>,
    /// Outer-layer trace (RTC-D only).
    pub outer_trace: Vec<TraceRow>,
    /// Pipeline artifacts of the best point at the objective budget.
    pub best: PipelineOutput,
}

impl CodesignResult {
    pub fn volume_ratio(&self) -> f64 {
        self.best_volume / self.initial_volume
    }

    pub fn objective_calls(&self) -> usize {
        self.evaluations.len()
    }
}

/// `−volume`, or `+∞` on failure.
pub fn rtc_objective(
    pipeline: &Pipeline,
    model: &SystemModel,
    hyper: &Hyperparameters,
    seed: u64,
) -> (f64, Result<PipelineOutput, PipelineError>) {
    match pipeline.run(model, hyper, seed) {
        Ok(out) if out.volume.is_finite() && out.volume > 0.0 => (-out.volume, Ok(out)),
        Ok(out) => (
            f64::INFINITY,
            Err(PipelineError::Decision(format!("degenerate volume {}", out.volume))),
        ),
        Err(e) => (f64::INFINITY, Err(e)),
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool, CodesignError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CodesignError::InvalidSettings(e.to_string()))
}

/// Inner layer: CMA-ES over cost weights for a fixed design.
#[allow(clippy::too_many_arguments)]
pub fn rtc_optimize(
    pipeline: &Pipeline,
    model: &SystemModel,
    hyper_space: &SearchSpace,
    hyper_initial: &[f64],
    budget: usize,
    cmaes: &CmaesOptions,
    seed: u64,
    workers: usize,
) -> Result<CodesignResult, CodesignError> {
    let pool = build_pool(workers)?;
    pool.install(|| rtc_inner(pipeline, model, hyper_space, hyper_initial, budget, cmaes, seed, 0))
}

#[allow(clippy::too_many_arguments)]
fn rtc_inner(
    pipeline: &Pipeline,
    model: &SystemModel,
    hyper_space: &SearchSpace,
    hyper_initial: &[f64],
    budget: usize,
    cmaes: &CmaesOptions,
    seed: u64,
    outer: usize,
) -> Result<CodesignResult, CodesignError> {
    let base = Hyperparameters::from_setup(&pipeline.trajectory);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INNER_SEARCH_STREAM));
    let mut log: Vec<EvaluationRecord> = Vec::new();
    let mut best: Option<PipelineOutput> = None;
    let mut initial_volume = None;
    let mut generation = 0;

    let result = minimize(
        hyper_space.clone(),
        hyper_initial,
        budget,
        cmaes,
        &mut rng,
        |candidates| {
            let outcomes: Vec<(f64, Result<PipelineOutput, PipelineError>)> = candidates
                .par_iter()
                .map(|x| match base.clone().with_decision(hyper_space, x) {
                    Ok(hyper) => rtc_objective(pipeline, model, &hyper, seed),
                    Err(e) => (f64::INFINITY, Err(e)),
                })
                .collect();
            let mut fitness = Vec::with_capacity(outcomes.len());
            for (i, (x, (f, outcome))) in candidates.iter().zip(outcomes).enumerate() {
                // The injected initial point is the first candidate of generation 0.
                if generation == 0 && i == 0 {
                    initial_volume = outcome.as_ref().map(|o| o.volume).ok();
                }
                let (volume, failure) = match &outcome {
                    Ok(o) => (Some(o.volume), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                log.push(EvaluationRecord {
                    outer,
                    index: log.len(),
                    generation,
                    design: design_vector(model),
                    hyperparameters: x.clone(),
                    fitness: f,
                    volume,
                    failure,
                });
                if let Ok(o) = outcome {
                    if best.as_ref().is_none_or(|b| o.volume > b.volume) {
                        best = Some(o);
                    }
                }
                fitness.push(f);
            }
            generation += 1;
            fitness
        },
    )?;

    let initial_volume = initial_volume.ok_or_else(|| {
        CodesignError::InfeasibleInitialPoint(log.first().and_then(|r| r.failure.clone()).unwrap_or_default())
    })?;
    let best = best.expect("initial point evaluated successfully");
    Ok(CodesignResult {
        design_space: SearchSpace { variables: Vec::new() },
        hyper_space: hyper_space.clone(),
        best_design: design_vector(model),
        best_hyperparameters: result.best_x,
        best_volume: best.volume,
        initial_volume,
        evaluations: log,
        trace: result.trace,
        outer_trace: Vec::new(),
        best,
    })
}

fn design_vector(model: &SystemModel) -> Vec<f64> {
    match model {
        SystemModel::Pendulum(p) => vec![p.mass, p.length],
        SystemModel::Cartpole(p) => vec![p.pole_mass, p.pole_length, p.cart_mass],
    }
}

/// Outer layer: CMA-ES over design parameters; each design is scored by the
/// best volume of an inner RTC run with `inner_budget` evaluations and the
/// same seed, so the initial design reproduces the standalone RTC run.
#[allow(clippy::too_many_arguments)]
pub fn rtcd_optimize(
    pipeline: &Pipeline,
    base_model: &SystemModel,
    design_space: &SearchSpace,
    design_initial: &[f64],
    hyper_space: &SearchSpace,
    hyper_initial: &[f64],
    outer_budget: usize,
    inner_budget: usize,
    cmaes: &CmaesOptions,
    seed: u64,
    workers: usize,
) -> Result<CodesignResult, CodesignError> {
    let pool = build_pool(workers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, OUTER_SEARCH_STREAM));
    let mut log = Vec::new();
    let mut best: Option<CodesignResult> = None;
    let mut initial_volume = None;
    let mut outer_index = 0;

    let result = minimize(
        design_space.clone(),
        design_initial,
        outer_budget,
        cmaes,
        &mut rng,
        |designs| {
            designs
                .iter()
                .map(|d| {
                    let outer = outer_index;
                    outer_index += 1;
                    let inner = design_model(base_model, design_space, d)
                        .map_err(|e| CodesignError::InvalidSettings(e.to_string()))
                        .and_then(|model| {
                            pool.install(|| {
                                rtc_inner(
                                    pipeline,
                                    &model,
                                    hyper_space,
                                    hyper_initial,
                                    inner_budget,
                                    cmaes,
                                    seed,
                                    outer,
                                )
                            })
                        });
                    match inner {
                        Ok(mut run) => {
                            if outer == 0 {
                                initial_volume = Some(run.initial_volume);
                            }
                            for rec in &mut run.evaluations {
                                rec.design = d.clone();
                            }
                            log.extend(run.evaluations.iter().cloned());
                            let fitness = -run.best_volume;
                            run.best_design = d.clone();
                            if best.as_ref().is_none_or(|b| run.best_volume > b.best_volume) {
                                best = Some(run);
                            }
                            fitness
                        }
                        Err(_) => f64::INFINITY,
                    }
                })
                .collect()
        },
    )?;

    let mut best = best.ok_or_else(|| CodesignError::InfeasibleInitialPoint("no design produced a funnel".into()))?;
    best.initial_volume = initial_volume
        .ok_or_else(|| CodesignError::InfeasibleInitialPoint("initial design produced no funnel".into()))?;
    best.design_space = design_space.clone();
    best.evaluations = log;
    best.outer_trace = result.trace;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PendulumParams;

    #[test]
    fn weight_names_parse() {
        assert_eq!(diagonal_slot("q11"), Some((true, 0)));
        assert_eq!(diagonal_slot("q22"), Some((true, 1)));
        assert_eq!(diagonal_slot("r11"), Some((false, 0)));
        assert_eq!(diagonal_slot("q12"), None);
        assert_eq!(diagonal_slot("q00"), None);
        assert_eq!(diagonal_slot("mass"), None);
    }

    #[test]
    fn decision_overrides_named_weights() {
        let space = default_hyper_space(&SystemModel::Pendulum(PendulumParams::default()));
        let base = Hyperparameters {
            state_cost: vec![10.0, 1.0],
            input_cost: vec![0.1],
        };
        let h = base.with_decision(&space, &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!(h.state_cost, vec![3.0, 4.0]);
        assert_eq!(h.input_cost, vec![5.0]);
    }

    #[test]
    fn design_parameters_apply_by_name() {
        let base = SystemModel::Pendulum(PendulumParams::default());
        let space = default_design_space(&base);
        let m = design_model(&base, &space, &[0.5, 0.3]).unwrap();
        assert_eq!(design_vector(&m), vec![0.5, 0.3]);
        assert!(design_model(&base, &space, &[-1.0, 0.3]).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
