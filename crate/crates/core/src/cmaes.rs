//! Covariance matrix adaptation evolution strategy (minimization) on a box.
//!
//! The search runs in the unit cube; each variable is mapped to its bounds
//! linearly or logarithmically. Samples outside the cube are reflected back
//! at the faces, so every candidate handed out is feasible.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaesError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("every candidate of generation {generation} failed")]
    AllCandidatesFailed { generation: usize },
    #[error("candidate batch does not match the population ({got} vs {expected})")]
    BatchMismatch { got: usize, expected: usize },
    #[error("budget {budget} is smaller than the population size {lambda}")]
    BudgetTooSmall { budget: usize, lambda: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Logarithmic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    #[serde(default = "default_scale")]
    pub scale: Scale,
}

fn default_scale() -> Scale {
    Scale::Linear
}

impl Variable {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Linear,
        }
    }

    pub fn log(name: &str, lower: f64, upper: f64) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Logarithmic,
        }
    }

    fn to_unit(&self, x: f64) -> f64 {
        if self.upper == self.lower {
            return 0.5;
        }
        match self.scale {
            Scale::Linear => (x - self.lower) / (self.upper - self.lower),
            Scale::Logarithmic => (x.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln()),
        }
    }

    fn from_unit(&self, u: f64) -> f64 {
        if self.upper == self.lower {
            return self.lower;
        }
        let x = match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Logarithmic => (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp(),
        };
        x.clamp(self.lower, self.upper)
    }
}

/// Named, bounded decision variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub variables: Vec<Variable>,
}

impl SearchSpace {
    pub fn new(variables: Vec<Variable>) -> Result<Self, CmaesError> {
        let space = Self { variables };
        space.validate()?;
        Ok(space)
    }

    /// Collapsed variables (`lower == upper`) are allowed and stay fixed.
    pub fn validate(&self) -> Result<(), CmaesError> {
        if self.variables.is_empty() {
            return Err(CmaesError::InvalidSpace("no decision variables".into()));
        }
        for v in &self.variables {
            if !(v.lower <= v.upper && v.lower.is_finite() && v.upper.is_finite()) {
                return Err(CmaesError::InvalidSpace(format!(
                    "{}: bounds [{}, {}] are not ordered",
                    v.name, v.lower, v.upper
                )));
            }
            if v.scale == Scale::Logarithmic && v.lower <= 0.0 {
                return Err(CmaesError::InvalidSpace(format!(
                    "{}: logarithmic scale needs a positive lower bound",
                    v.name
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && self
                .variables
                .iter()
                .zip(x)
                .all(|(v, &xi)| v.lower <= xi && xi <= v.upper)
    }

    pub fn to_unit(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.variables.iter().zip(x).map(|(v, &xi)| v.to_unit(xi)))
    }

    pub fn from_unit(&self, u: &DVector<f64>) -> Vec<f64> {
        self.variables
            .iter()
            .zip(u.iter())
            .map(|(v, &ui)| v.from_unit(ui))
            .collect()
    }
}

/// Folds a coordinate into `[0, 1]` by mirroring at the faces.
pub fn reflect(u: f64) -> f64 {
    let m = u.rem_euclid(2.0);
    if m > 1.0 {
        2.0 - m
    } else {
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmaesOptions {
    /// Population size; `None` selects `4 + ⌊3 ln d⌋`.
    pub population: Option<usize>,
    /// Initial step size in unit-cube coordinates.
    pub initial_sigma: f64,
    /// Restarts with doubled population once a run has converged (IPOP).
    pub max_restarts: usize,
}

impl Default for CmaesOptions {
    fn default() -> Self {
        Self {
            population: None,
            initial_sigma: 0.3,
            max_restarts: 9,
        }
    }
}

pub fn default_population(dim: usize) -> usize {
    4 + (3.0 * (dim as f64).ln()).floor() as usize
}

#[derive(Debug, Clone)]
pub struct CmaesState {
    space: SearchSpace,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    eig_vectors: DMatrix<f64>,
    eig_sqrt: DVector<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: usize,
    lambda: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    pending: Option<DVector<f64>>,
}

impl CmaesState {
    /// Starts the search at `x0` (in problem coordinates).
    pub fn new(space: SearchSpace, x0: &[f64], opts: &CmaesOptions) -> Result<Self, CmaesError> {
        space.validate()?;
        if !space.contains(x0) {
            return Err(CmaesError::InvalidSpace("initial point lies outside the bounds".into()));
        }
        if !(opts.initial_sigma > 0.0) {
            return Err(CmaesError::InvalidSpace("initial sigma must be positive".into()));
        }
        let d = space.dim();
        let lambda = opts.population.unwrap_or_else(|| default_population(d)).max(2);
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let df = d as f64;

        let c_sigma = (mu_eff + 2.0) / (df + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (df + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / df) / (df + 4.0 + 2.0 * mu_eff / df);
        let c_1 = 2.0 / ((df + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((df + 2.0).powi(2) + mu_eff));
        let chi_n = df.sqrt() * (1.0 - 1.0 / (4.0 * df) + 1.0 / (21.0 * df * df));

        Ok(Self {
            mean: space.to_unit(x0),
            space,
            sigma: opts.initial_sigma,
            cov: DMatrix::identity(d, d),
            eig_vectors: DMatrix::identity(d, d),
            eig_sqrt: DVector::from_element(d, 1.0),
            p_sigma: DVector::zeros(d),
            p_c: DVector::zeros(d),
            generation: 0,
            lambda,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            pending: None,
        })
    }

    /// Makes `x` the first candidate of the next `ask`.
    pub fn inject(&mut self, x: &[f64]) {
        self.pending = Some(self.space.to_unit(x));
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn population(&self) -> usize {
        self.lambda
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mean_unit(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Mean in problem coordinates.
    pub fn mean(&self) -> Vec<f64> {
        self.space.from_unit(&self.mean.map(reflect))
    }

    /// Draws `λ` feasible candidates in problem coordinates.
    pub fn ask<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.space.dim();
        let mut out = Vec::with_capacity(self.lambda);
        if let Some(u) = self.pending.take() {
            out.push(self.space.from_unit(&u.map(reflect)));
        }
        while out.len() < self.lambda {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &self.eig_vectors * z.component_mul(&self.eig_sqrt);
            let u = &self.mean + y * self.sigma;
            out.push(self.space.from_unit(&u.map(reflect)));
        }
        out
    }

    /// Updates the distribution from evaluated candidates (lower is better;
    /// failures are `+∞`).
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitness: &[f64]) -> Result<(), CmaesError> {
        if candidates.len() != self.lambda || fitness.len() != self.lambda {
            return Err(CmaesError::BatchMismatch {
                got: candidates.len().min(fitness.len()),
                expected: self.lambda,
            });
        }
        if fitness.iter().all(|f| !f.is_finite()) {
            return Err(CmaesError::AllCandidatesFailed {
                generation: self.generation,
            });
        }
        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| rank_key(fitness[a]).total_cmp(&rank_key(fitness[b])));

        let d = self.space.dim();
        let old_mean = self.mean.clone();
        let units: Vec<DVector<f64>> = order
            .iter()
            .take(self.weights.len())
            .map(|&i| self.space.to_unit(&candidates[i]))
            .collect();
        let mut mean = DVector::zeros(d);
        for (w, u) in self.weights.iter().zip(&units) {
            mean += u * *w;
        }
        self.mean = mean;

        let y_w = (&self.mean - &old_mean) / self.sigma;
        let inv_sqrt_c =
            &self.eig_vectors * DMatrix::from_diagonal(&self.eig_sqrt.map(|v| 1.0 / v)) * self.eig_vectors.transpose();
        let gain_sigma = (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt();
        self.p_sigma = &self.p_sigma * (1.0 - self.c_sigma) + inv_sqrt_c * &y_w * gain_sigma;

        let g = (self.generation + 1) as f64;
        let norm_ps = self.p_sigma.norm();
        let h_sigma =
            norm_ps / (1.0 - (1.0 - self.c_sigma).powf(2.0 * g)).sqrt() < (1.4 + 2.0 / (d as f64 + 1.0)) * self.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        let gain_c = (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt();
        self.p_c = &self.p_c * (1.0 - self.c_c) + &y_w * (h * gain_c);

        let mut rank_mu = DMatrix::zeros(d, d);
        for (w, u) in self.weights.iter().zip(&units) {
            let y = (u - &old_mean) / self.sigma;
            rank_mu += &y * y.transpose() * *w;
        }
        let decay = 1.0 - self.c_1 - self.c_mu + (1.0 - h) * self.c_1 * self.c_c * (2.0 - self.c_c);
        self.cov = &self.cov * decay + &self.p_c * self.p_c.transpose() * self.c_1 + rank_mu * self.c_mu;
        let t = self.cov.transpose();
        self.cov = (&self.cov + t) * 0.5;

        self.sigma *= ((self.c_sigma / self.d_sigma) * (norm_ps / self.chi_n - 1.0)).exp();
        self.generation += 1;
        self.decompose();
        Ok(())
    }

    fn decompose(&mut self) {
        let eig = SymmetricEigen::new(self.cov.clone());
        let floor = 1e-20 * eig.eigenvalues.amax().max(1e-300);
        self.eig_sqrt = eig.eigenvalues.map(|v| v.max(floor).sqrt());
        self.eig_vectors = eig.eigenvectors;
    }
}

fn rank_key(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

/// One row of the optimizer trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub generation: usize,
    pub evaluations: usize,
    pub best_fitness: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub best_x: Vec<f64>,
    pub best_fitness: f64,
    pub evaluations: usize,
    pub trace: Vec<TraceRow>,
}

/// Fitness spread below which a run counts as converged.
const TOL_FUN: f64 = 1e-12;
/// Step size (unit-cube coordinates) below which a run counts as converged.
const TOL_X: f64 = 1e-12;

/// Runs whole generations while the evaluation budget allows. `evaluate`
/// receives a generation's candidates and returns their fitness values; the
/// initial point is evaluated as part of the first generation.
///
/// A run that has converged — all recent fitness values within `TOL_FUN`,
/// or the step size below `TOL_X` — restarts from a uniform random point
/// with twice the population, up to `max_restarts` times.
pub fn minimize<R, F>(
    space: SearchSpace,
    x0: &[f64],
    budget: usize,
    opts: &CmaesOptions,
    rng: &mut R,
    mut evaluate: F,
) -> Result<MinimizeResult, CmaesError>
where
    R: Rng + ?Sized,
    F: FnMut(&[Vec<f64>]) -> Vec<f64>,
{
    let mut state = CmaesState::new(space.clone(), x0, opts)?;
    if budget < state.population() {
        return Err(CmaesError::BudgetTooSmall {
            budget,
            lambda: state.population(),
        });
    }
    state.inject(x0);
    let mut best_x = x0.to_vec();
    let mut best_fitness = f64::INFINITY;
    let mut evaluations = 0;
    let mut generation = 0;
    let mut restarts = 0;
    let mut recent_best: Vec<f64> = Vec::new();
    let mut trace = Vec::new();
    while evaluations + state.population() <= budget {
        let candidates = state.ask(rng);
        let fitness = evaluate(&candidates);
        evaluations += candidates.len();
        generation += 1;
        for (x, &f) in candidates.iter().zip(&fitness) {
            if f < best_fitness {
                best_fitness = f;
                best_x = x.clone();
            }
        }
        state.tell(&candidates, &fitness)?;
        trace.push(TraceRow {
            generation,
            evaluations,
            best_fitness,
            mean: state.mean(),
            sigma: state.sigma(),
        });

        recent_best.push(fitness.iter().copied().fold(f64::INFINITY, f64::min));
        let window = 10 + (30 * space.dim()).div_ceil(state.population());
        if recent_best.len() > window {
            recent_best.remove(0);
        }
        let spread = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f), hi.max(f)));
            hi - lo
        };
        let flat = recent_best.len() == window && spread(&mut recent_best.iter().chain(&fitness).copied()) < TOL_FUN;
        let collapsed = state.sigma() * state.eig_sqrt.max() < TOL_X;
        if (flat || collapsed) && restarts < opts.max_restarts {
            restarts += 1;
            let unit = DVector::from_fn(space.dim(), |_, _| rng.random::<f64>());
            let restart = CmaesOptions {
                population: Some(2 * state.population()),
                ..opts.clone()
            };
            state = CmaesState::new(space.clone(), &space.from_unit(&unit), &restart)?;
            recent_best.clear();
        }
    }
    Ok(MinimizeResult {
        best_x,
        best_fitness,
        evaluations,
        trace,
    })
}
