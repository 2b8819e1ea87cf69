//! Continuous-time models of the torque-limited simple pendulum and the
//! cart-pole, plus the integrator and Jacobians shared by every layer above.
//!
//! States are ordered positions first, then velocities. Angles are measured
//! from the hanging-down configuration, so the upright equilibrium sits at
//! `θ = π`. Angle wrapping never happens here; see [`crate::tvlqr::error_coords`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("unknown parameter `{name}` for the {system}")]
    UnknownParameter { name: String, system: &'static str },
}

fn check(name: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<(), ModelError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { name, value, reason })
    }
}

/// Anything that can be integrated and linearized by the trajectory,
/// controller and funnel layers.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// `ẋ = f(x, u)`. No saturation is applied.
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(∂f/∂x, ∂f/∂u)` at `(x, u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    /// State components that are angles and must be wrapped when measuring errors.
    fn angle_indices(&self) -> &[usize];

    /// Symmetric actuator limit applied by closed-loop rollouts.
    fn input_limit(&self) -> f64;

    /// Saturated feedback that pumps energy toward that of `target`, used to
    /// warm-start trajectory optimization; `kick` (±1) picks the direction
    /// from rest. `None` when the model has none.
    fn pumping_input(&self, _x: &DVector<f64>, _target: &DVector<f64>, _kick: f64) -> Option<DVector<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    /// Point mass at the tip [kg].
    pub mass: f64,
    /// Link length [m].
    pub length: f64,
    /// Viscous joint damping [N·m·s/rad].
    #[serde(default = "PendulumParams::default_damping")]
    pub damping: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Torque limit [N·m].
    pub torque_limit: f64,
}

fn default_gravity() -> f64 {
    9.81
}

impl PendulumParams {
    fn default_damping() -> f64 {
        0.1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check("mass", self.mass, self.mass > 0.0, "must be positive")?;
        check("length", self.length, self.length > 0.0, "must be positive")?;
        check("damping", self.damping, self.damping >= 0.0, "must be non-negative")?;
        check("gravity", self.gravity, self.gravity > 0.0, "must be positive")?;
        check(
            "torque_limit",
            self.torque_limit,
            self.torque_limit >= 0.0,
            "must be non-negative",
        )
    }

    /// Inertia about the pivot, `m l²`.
    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }

    /// Total mechanical energy, zero potential at the pivot height.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.inertia() * x[1] * x[1] - self.mass * self.gravity * self.length * x[0].cos()
    }
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 0.7,
            length: 0.4,
            damping: Self::default_damping(),
            gravity: default_gravity(),
            torque_limit: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartpoleParams {
    /// Pole point mass [kg].
    pub pole_mass: f64,
    /// Pole length, pivot to point mass [m].
    pub pole_length: f64,
    /// Cart mass [kg]. The default is a placeholder, not a measured value.
    #[serde(default = "CartpoleParams::default_cart_mass")]
    pub cart_mass: f64,
    /// Viscous damping at the pole joint [N·m·s/rad].
    #[serde(default)]
    pub damping: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// Cart force limit [N].
    pub force_limit: f64,
}

impl CartpoleParams {
    fn default_cart_mass() -> f64 {
        0.57
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check("pole_mass", self.pole_mass, self.pole_mass > 0.0, "must be positive")?;
        check(
            "pole_length",
            self.pole_length,
            self.pole_length > 0.0,
            "must be positive",
        )?;
        check("cart_mass", self.cart_mass, self.cart_mass > 0.0, "must be positive")?;
        check("damping", self.damping, self.damping >= 0.0, "must be non-negative")?;
        check("gravity", self.gravity, self.gravity > 0.0, "must be positive")?;
        check(
            "force_limit",
            self.force_limit,
            self.force_limit >= 0.0,
            "must be non-negative",
        )
    }
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            pole_mass: 0.23,
            pole_length: 0.18,
            cart_mass: Self::default_cart_mass(),
            damping: 0.0,
            gravity: default_gravity(),
            force_limit: 5.0,
        }
    }
}

/// Pendulum EOM: `m l² θ̈ = u − b θ̇ − m g l sin θ`.
pub fn pendulum_f(x: &DVector<f64>, u: &DVector<f64>, p: &PendulumParams) -> DVector<f64> {
    let (theta, omega) = (x[0], x[1]);
    let alpha = (u[0] - p.damping * omega - p.mass * p.gravity * p.length * theta.sin()) / p.inertia();
    DVector::from_vec(vec![omega, alpha])
}

/// Frictionless-cart, damped-joint cart-pole with a point mass on a massless pole.
///
/// State is `(x_cart, θ, ẋ_cart, θ̇)`.
pub fn cartpole_f(x: &DVector<f64>, u: &DVector<f64>, p: &CartpoleParams) -> DVector<f64> {
    let (theta, xd, thd) = (x[1], x[2], x[3]);
    let (s, c) = theta.sin_cos();
    let (m, l, mc, b, g) = (p.pole_mass, p.pole_length, p.cart_mass, p.damping, p.gravity);
    let den = mc + m * s * s;
    let xdd = (u[0] + m * s * (l * thd * thd + g * c) + b * c * thd / l) / den;
    let thdd = -((mc + m) * (b * thd + m * g * l * s) + m * l * c * (u[0] + m * l * thd * thd * s)) / (m * l * l * den);
    DVector::from_vec(vec![xd, thd, xdd, thdd])
}

fn pendulum_jacobians(x: &DVector<f64>, p: &PendulumParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let inertia = p.inertia();
    let a = DMatrix::from_row_slice(
        2,
        2,
        &[0.0, 1.0, -p.gravity * x[0].cos() / p.length, -p.damping / inertia],
    );
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / inertia]);
    (a, b)
}

fn cartpole_jacobians(x: &DVector<f64>, u: &DVector<f64>, p: &CartpoleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let (theta, thd) = (x[1], x[3]);
    let f = u[0];
    let (s, c) = theta.sin_cos();
    let (m, l, mc, b, g) = (p.pole_mass, p.pole_length, p.cart_mass, p.damping, p.gravity);
    let den = mc + m * s * s;
    let dden = 2.0 * m * s * c;

    // ẍ = nx / den
    let nx = f + m * s * (l * thd * thd + g * c) + b * c * thd / l;
    let dnx_dth = m * c * (l * thd * thd + g * c) - m * g * s * s - b * s * thd / l;
    let dnx_dthd = 2.0 * m * s * l * thd + b * c / l;
    let dxdd_dth = (dnx_dth * den - nx * dden) / (den * den);

    // θ̈ = nt / (m l² den)
    let nt = -((mc + m) * (b * thd + m * g * l * s) + m * l * c * (f + m * l * thd * thd * s));
    let dnt_dth =
        -((mc + m) * m * g * l * c - m * l * s * (f + m * l * thd * thd * s) + m * l * c * (m * l * thd * thd * c));
    let dnt_dthd = -((mc + m) * b + 2.0 * m * m * l * l * c * s * thd);
    let ml2 = m * l * l;
    let dthdd_dth = (dnt_dth * den - nt * dden) / (ml2 * den * den);

    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            0.0,
            0.0,
            1.0,
            0.0, //
            0.0,
            0.0,
            0.0,
            1.0, //
            0.0,
            dxdd_dth,
            0.0,
            dnx_dthd / den, //
            0.0,
            dthdd_dth,
            0.0,
            dnt_dthd / (ml2 * den),
        ],
    );
    let b_mat = DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 1.0 / den, -c / (l * den)]);
    (a, b_mat)
}

/// One of the two mechanical systems, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "lowercase")]
pub enum SystemModel {
    Pendulum(PendulumParams),
    Cartpole(CartpoleParams),
}

impl SystemModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            SystemModel::Pendulum(p) => p.validate(),
            SystemModel::Cartpole(p) => p.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemModel::Pendulum(_) => "pendulum",
            SystemModel::Cartpole(_) => "cartpole",
        }
    }

    /// Copy of the model with the parameter `name` set to `value`.
    pub fn with_parameter(mut self, name: &str, value: f64) -> Result<Self, ModelError> {
        let slot = match (&mut self, name) {
            (SystemModel::Pendulum(p), "mass") => &mut p.mass,
            (SystemModel::Pendulum(p), "length") => &mut p.length,
            (SystemModel::Pendulum(p), "damping") => &mut p.damping,
            (SystemModel::Pendulum(p), "torque_limit") => &mut p.torque_limit,
            (SystemModel::Cartpole(p), "pole_mass") => &mut p.pole_mass,
            (SystemModel::Cartpole(p), "pole_length") => &mut p.pole_length,
            (SystemModel::Cartpole(p), "cart_mass") => &mut p.cart_mass,
            (SystemModel::Cartpole(p), "damping") => &mut p.damping,
            (SystemModel::Cartpole(p), "force_limit") => &mut p.force_limit,
            (model, _) => {
                return Err(ModelError::UnknownParameter {
                    name: name.into(),
                    system: model.name(),
                })
            }
        };
        *slot = value;
        self.validate()?;
        Ok(self)
    }

    /// Copy of the model with a different actuator limit.
    pub fn with_input_limit(mut self, limit: f64) -> Self {
        match &mut self {
            SystemModel::Pendulum(p) => p.torque_limit = limit,
            SystemModel::Cartpole(p) => p.force_limit = limit,
        }
        self
    }
}

impl Dynamics for SystemModel {
    fn state_dim(&self) -> usize {
        match self {
            SystemModel::Pendulum(_) => 2,
            SystemModel::Cartpole(_) => 4,
        }
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            SystemModel::Pendulum(p) => pendulum_f(x, u, p),
            SystemModel::Cartpole(p) => cartpole_f(x, u, p),
        }
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        match self {
            SystemModel::Pendulum(p) => pendulum_jacobians(x, p),
            SystemModel::Cartpole(p) => cartpole_jacobians(x, u, p),
        }
    }

    fn angle_indices(&self) -> &[usize] {
        match self {
            SystemModel::Pendulum(_) => &[0],
            SystemModel::Cartpole(_) => &[1],
        }
    }

    fn input_limit(&self) -> f64 {
        match self {
            SystemModel::Pendulum(p) => p.torque_limit,
            SystemModel::Cartpole(p) => p.force_limit,
        }
    }

    fn pumping_input(&self, x: &DVector<f64>, target: &DVector<f64>, kick: f64) -> Option<DVector<f64>> {
        let SystemModel::Pendulum(p) = self else {
            return None;
        };
        // Saturated energy shaping plus damping compensation.
        let deficit = p.energy(target) - p.energy(x);
        let push = if x[1].abs() < 1e-9 {
            kick
        } else {
            deficit * x[1] / (0.05 * p.mass * p.gravity * p.length)
        };
        let u = p.damping * x[1] + p.torque_limit * push.clamp(-1.0, 1.0);
        Some(DVector::from_element(1, u.clamp(-p.torque_limit, p.torque_limit)))
    }
}

/// Linear time-invariant system `ẋ = A x + B u`, used as a reference plant.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub input_limit: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        assert_eq!(a.nrows(), b.nrows());
        Self {
            a,
            b,
            input_limit: f64::INFINITY,
        }
    }

    pub fn double_integrator() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
    }
}

impl Dynamics for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }

    fn angle_indices(&self) -> &[usize] {
        &[]
    }

    fn input_limit(&self) -> f64 {
        self.input_limit
    }
}

/// `(∂f/∂x, ∂f/∂u)` of any model.
pub fn linearize<D: Dynamics + ?Sized>(model: &D, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    model.jacobians(x, u)
}

/// Classical RK4 step with the input held constant over `dt`.
pub fn rk4_step<D: Dynamics + ?Sized>(model: &D, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    debug_assert!(dt > 0.0);
    let k1 = model.derivative(x, u);
    let k2 = model.derivative(&(x + &k1 * (0.5 * dt)), u);
    let k3 = model.derivative(&(x + &k2 * (0.5 * dt)), u);
    let k4 = model.derivative(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// RK4 step together with its sensitivities `(∂x⁺/∂x, ∂x⁺/∂u)`, obtained
/// by the chain rule through the four stages.
pub fn rk4_step_with_jacobians<D: Dynamics + ?Sized>(
    model: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let eye = DMatrix::<f64>::identity(n, n);
    let h = 0.5 * dt;

    let k1 = model.derivative(x, u);
    let (a1, b1) = model.jacobians(x, u);
    let dk1_dx = a1;
    let dk1_du = b1;

    let x2 = x + &k1 * h;
    let k2 = model.derivative(&x2, u);
    let (a2, b2) = model.jacobians(&x2, u);
    let dk2_dx = &a2 * (&eye + &dk1_dx * h);
    let dk2_du = &a2 * &dk1_du * h + b2;

    let x3 = x + &k2 * h;
    let k3 = model.derivative(&x3, u);
    let (a3, b3) = model.jacobians(&x3, u);
    let dk3_dx = &a3 * (&eye + &dk2_dx * h);
    let dk3_du = &a3 * &dk2_du * h + b3;

    let x4 = x + &k3 * dt;
    let k4 = model.derivative(&x4, u);
    let (a4, b4) = model.jacobians(&x4, u);
    let dk4_dx = &a4 * (&eye + &dk3_dx * dt);
    let dk4_du = &a4 * &dk3_du * dt + b4;

    let w = dt / 6.0;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w;
    let fx = eye + (dk1_dx + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * w;
    let fu = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * w;
    (next, fx, fu)
}
