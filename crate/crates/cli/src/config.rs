//! Declarative run configuration (TOML).
//!
//! Everything except the model has a default. Unknown keys are rejected and
//! every module precondition is checked when the file is loaded, so a run
//! never starts from an invalid configuration. [`RunConfig::resolved`] fills
//! all system-dependent defaults in; its TOML form is the snapshot written to
//! each run directory, and replaying it reproduces the run.

use std::path::{Path, PathBuf};

use rtcd_core::cmaes::{CmaesOptions, SearchSpace};
use rtcd_core::codesign::{current_values, default_design_space, default_hyper_space, Hyperparameters, Pipeline};
use rtcd_core::dirtran::TrajOptSetup;
use rtcd_core::dynamics::SystemModel;
use rtcd_core::funnel::{FunnelOptions, GoalOptions};
use rtcd_core::nlp::SolverOptions;
use rtcd_core::tvlqr::ControllerCosts;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.to_string(),
    }
}

/// Partial trajectory setup; missing fields come from the system's swing-up
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryOverrides {
    pub knots: Option<usize>,
    pub horizon: Option<f64>,
    pub initial_state: Option<Vec<f64>>,
    pub goal_state: Option<Vec<f64>>,
    pub state_lower: Option<Vec<f64>>,
    pub state_upper: Option<Vec<f64>>,
    pub input_lower: Option<Vec<f64>>,
    pub input_upper: Option<Vec<f64>>,
    /// Initial `Q` diagonal (shared by trajectory and controller).
    pub state_cost: Option<Vec<f64>>,
    /// Initial `R` diagonal (shared by trajectory and controller).
    pub input_cost: Option<Vec<f64>>,
    pub final_state_cost: Option<Vec<f64>>,
}

impl TrajectoryOverrides {
    pub fn apply(&self, model: &SystemModel) -> TrajOptSetup {
        let d = TrajOptSetup::swing_up(model);
        TrajOptSetup {
            knots: self.knots.unwrap_or(d.knots),
            horizon: self.horizon.unwrap_or(d.horizon),
            initial_state: self.initial_state.clone().unwrap_or(d.initial_state),
            goal_state: self.goal_state.clone().unwrap_or(d.goal_state),
            state_lower: self.state_lower.clone().unwrap_or(d.state_lower),
            state_upper: self.state_upper.clone().unwrap_or(d.state_upper),
            input_lower: self.input_lower.clone().unwrap_or(d.input_lower),
            input_upper: self.input_upper.clone().unwrap_or(d.input_upper),
            state_cost: self.state_cost.clone().unwrap_or(d.state_cost),
            input_cost: self.input_cost.clone().unwrap_or(d.input_cost),
            final_state_cost: self.final_state_cost.clone().unwrap_or(d.final_state_cost),
        }
    }

    fn from_setup(s: &TrajOptSetup) -> Self {
        Self {
            knots: Some(s.knots),
            horizon: Some(s.horizon),
            initial_state: Some(s.initial_state.clone()),
            goal_state: Some(s.goal_state.clone()),
            state_lower: Some(s.state_lower.clone()),
            state_upper: Some(s.state_upper.clone()),
            input_lower: Some(s.input_lower.clone()),
            input_upper: Some(s.input_upper.clone()),
            state_cost: Some(s.state_cost.clone()),
            input_cost: Some(s.input_cost.clone()),
            final_state_cost: Some(s.final_state_cost.clone()),
        }
    }
}

/// Final funnel estimate and its independent verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Certification {
    pub samples_per_knot: usize,
    /// Total interior samples for verification, spread evenly over knots.
    pub verification_samples: usize,
    /// Verification success rate below which a run counts as failed.
    pub min_success_rate: f64,
}

impl Default for Certification {
    fn default() -> Self {
        Self {
            samples_per_knot: 100,
            verification_samples: 1000,
            min_success_rate: 0.9,
        }
    }
}

impl Certification {
    pub fn verification_per_knot(&self, knots: usize) -> usize {
        self.verification_samples.div_ceil(knots.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtcSettings {
    /// Objective evaluations.
    pub budget: usize,
    /// Cost-weight search space; system default when absent.
    pub space: Option<SearchSpace>,
}

impl Default for RtcSettings {
    fn default() -> Self {
        Self {
            budget: 200,
            space: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtcdSettings {
    pub outer_budget: usize,
    /// Inner RTC evaluations per design.
    pub inner_budget: usize,
    /// Design-parameter search space; system default when absent.
    pub space: Option<SearchSpace>,
}

impl Default for RtcdSettings {
    fn default() -> Self {
        Self {
            outer_budget: 20,
            inner_budget: 60,
            space: None,
        }
    }
}

fn default_seed() -> u64 {
    1
}

fn default_workers() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Funnel settings used inside the optimization objective.
fn objective_funnel() -> FunnelOptions {
    FunnelOptions {
        samples_per_knot: 30,
        ..FunnelOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub model: SystemModel,
    #[serde(default)]
    pub trajectory: TrajectoryOverrides,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub goal: GoalOptions,
    #[serde(default = "objective_funnel")]
    pub funnel: FunnelOptions,
    #[serde(default)]
    pub certification: Certification,
    #[serde(default)]
    pub rtc: RtcSettings,
    #[serde(default)]
    pub rtcd: RtcdSettings,
    #[serde(default)]
    pub cmaes: CmaesOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.trajectory = TrajectoryOverrides::from_setup(&self.setup());
        cfg.rtc.space = Some(self.hyper_space());
        cfg.rtcd.space = Some(self.design_space());
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn setup(&self) -> TrajOptSetup {
        self.trajectory.apply(&self.model)
    }

    pub fn hyper_space(&self) -> SearchSpace {
        self.rtc
            .space
            .clone()
            .unwrap_or_else(|| default_hyper_space(&self.model))
    }

    pub fn design_space(&self) -> SearchSpace {
        self.rtcd
            .space
            .clone()
            .unwrap_or_else(|| default_design_space(&self.model))
    }

    pub fn initial_hyperparameters(&self) -> Hyperparameters {
        Hyperparameters::from_setup(&self.setup())
    }

    pub fn controller_costs(&self) -> ControllerCosts {
        let s = self.setup();
        ControllerCosts {
            state_cost: s.state_cost,
            input_cost: s.input_cost,
            final_state_cost: s.final_state_cost,
        }
    }

    /// Pipeline evaluated by the optimization objective.
    pub fn objective_pipeline(&self) -> Pipeline {
        Pipeline {
            trajectory: self.setup(),
            solver: self.solver,
            goal: self.goal.clone(),
            funnel: self.funnel.clone(),
        }
    }

    /// Same pipeline at the certification sample budget.
    pub fn certification_pipeline(&self) -> Pipeline {
        Pipeline {
            funnel: FunnelOptions {
                samples_per_knot: self.certification.samples_per_knot,
                ..self.funnel.clone()
            },
            ..self.objective_pipeline()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(invalid("workers", "must be ≥ 1"));
        }
        self.model.validate().map_err(|e| invalid("model", e))?;
        let pipeline = self.objective_pipeline();
        let setup = pipeline.setup_for(&self.model, &self.initial_hyperparameters());
        setup.validate(&self.model).map_err(|e| invalid("trajectory", e))?;
        let costs = self.controller_costs();
        costs
            .validate(setup.state_dim(), setup.input_dim())
            .map_err(|e| invalid("trajectory", e))?;
        validate_solver(&self.solver)?;
        self.goal.validate().map_err(|e| invalid("goal", e))?;
        self.funnel.validate().map_err(|e| invalid("funnel", e))?;

        let c = &self.certification;
        if c.samples_per_knot == 0 {
            return Err(invalid("certification.samples_per_knot", "must be ≥ 1"));
        }
        if c.verification_samples == 0 {
            return Err(invalid("certification.verification_samples", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&c.min_success_rate) {
            return Err(invalid("certification.min_success_rate", "must lie in [0, 1]"));
        }

        if self.cmaes.population.is_some_and(|p| p < 2) {
            return Err(invalid("cmaes.population", "must be ≥ 2"));
        }
        if !(self.cmaes.initial_sigma > 0.0 && self.cmaes.initial_sigma.is_finite()) {
            return Err(invalid("cmaes.initial_sigma", "must be positive"));
        }

        let hyper = self.initial_hyperparameters();
        let hyper_space = self.hyper_space();
        hyper_space.validate().map_err(|e| invalid("rtc.space", e))?;
        check_start(&hyper_space, &self.model, &hyper, "rtc.space")?;
        hyper
            .clone()
            .with_decision(&hyper_space, &vec![1.0; hyper_space.dim()])
            .map_err(|e| invalid("rtc.space", e))?;

        let design_space = self.design_space();
        design_space.validate().map_err(|e| invalid("rtcd.space", e))?;
        check_start(&design_space, &self.model, &hyper, "rtcd.space")?;

        if self.rtc.budget == 0 {
            return Err(invalid("rtc.budget", "must be ≥ 1"));
        }
        if self.rtcd.outer_budget == 0 || self.rtcd.inner_budget == 0 {
            return Err(invalid("rtcd", "budgets must be ≥ 1"));
        }
        Ok(())
    }
}

/// The configured starting point must be named and lie inside the space.
fn check_start(
    space: &SearchSpace,
    model: &SystemModel,
    hyper: &Hyperparameters,
    key: &'static str,
) -> Result<(), ConfigError> {
    let start = current_values(space, model, hyper)
        .ok_or_else(|| invalid(key, format!("a variable is not a parameter of the {}", model.name())))?;
    if !space.contains(&start) {
        return Err(invalid(key, format!("initial point {start:?} lies outside the bounds")));
    }
    Ok(())
}

fn validate_solver(s: &SolverOptions) -> Result<(), ConfigError> {
    let positive = [s.constraint_tol, s.gradient_tol, s.initial_penalty, s.max_penalty];
    if !positive.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return Err(invalid("solver", "tolerances and penalties must be positive"));
    }
    if !(s.penalty_growth > 1.0) {
        return Err(invalid("solver.penalty_growth", "must exceed 1"));
    }
    if s.max_outer_iterations == 0 || s.max_inner_iterations == 0 {
        return Err(invalid("solver", "iteration limits must be ≥ 1"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nsystem = \"pendulum\"\nmass = 0.7\nlength = 0.4\ntorque_limit = 2.5\n";

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.funnel.samples_per_knot, 30);
        assert_eq!(cfg.certification.samples_per_knot, 100);
        assert_eq!(cfg.setup().knots, 51);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse(&format!("{MINIMAL}[funnel]\nsamples = 3\n")).unwrap_err();
        assert!(err.to_string().contains("samples"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}colour = 1\n")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn non_positive_input_cost_is_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}[trajectory]\ninput_cost = [0.0]\n")).unwrap_err();
        assert!(err.to_string().contains("trajectory"), "{err}");
    }

    #[test]
    fn start_outside_space_is_rejected() {
        let text = format!("{MINIMAL}[trajectory]\nstate_cost = [500.0, 1.0]\n");
        assert!(matches!(
            RunConfig::parse(&text),
            Err(ConfigError::Invalid { key: "rtc.space", .. })
        ));
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let cfg = RunConfig::parse(MINIMAL).unwrap().resolved();
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.resolved(), cfg);
    }

    #[test]
    fn cartpole_config_parses() {
        let text = "[model]\nsystem = \"cartpole\"\npole_mass = 0.2\npole_length = 0.3\nforce_limit = 5.0\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.setup().state_dim(), 4);
    }
}
