use nalgebra::{DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtcd_core::dynamics::{rk4_step, CartpoleParams, Dynamics, PendulumParams, SystemModel};

/// Accelerations from the Euler–Lagrange equations of a point mass on a
/// massless pole, solved as a 2×2 linear system `M(q) q̈ = τ`.
fn cartpole_lagrange(x: &DVector<f64>, f: f64, p: &CartpoleParams) -> (f64, f64) {
    let (th, thd) = (x[1], x[3]);
    let (m, l, mc) = (p.pole_mass, p.pole_length, p.cart_mass);
    let mass = Matrix2::new(mc + m, m * l * th.cos(), m * l * th.cos(), m * l * l);
    let rhs = Vector2::new(
        f + m * l * thd * thd * th.sin(),
        -m * p.gravity * l * th.sin() - p.damping * thd,
    );
    let qdd = mass.lu().solve(&rhs).unwrap();
    (qdd[0], qdd[1])
}

#[test]
fn cartpole_matches_lagrangian_mass_matrix_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let p = CartpoleParams {
            pole_mass: rng.random_range(0.05..1.0),
            pole_length: rng.random_range(0.1..1.0),
            cart_mass: rng.random_range(0.2..2.0),
            damping: rng.random_range(0.0..0.3),
            force_limit: 10.0,
            ..CartpoleParams::default()
        };
        let x = DVector::from_fn(4, |_, _| rng.random_range(-4.0..4.0));
        let f = rng.random_range(-5.0..5.0);
        let xdot = SystemModel::Cartpole(p).derivative(&x, &DVector::from_element(1, f));
        let (xdd, thdd) = cartpole_lagrange(&x, f, &p);
        assert_eq!(xdot[0], x[2]);
        assert_eq!(xdot[1], x[3]);
        assert!(
            (xdot[2] - xdd).abs() <= 1e-9 * (1.0 + xdd.abs()),
            "{} vs {xdd}",
            xdot[2]
        );
        assert!(
            (xdot[3] - thdd).abs() <= 1e-9 * (1.0 + thdd.abs()),
            "{} vs {thdd}",
            xdot[3]
        );
    }
}

fn cartpole_energy(x: &DVector<f64>, p: &CartpoleParams) -> f64 {
    let (th, xd, thd) = (x[1], x[2], x[3]);
    let (m, l) = (p.pole_mass, p.pole_length);
    // Tip velocity (ẋ + l θ̇ cos θ, l θ̇ sin θ); height −l cos θ.
    let vx = xd + l * thd * th.cos();
    let vy = l * thd * th.sin();
    0.5 * p.cart_mass * xd * xd + 0.5 * m * (vx * vx + vy * vy) - m * p.gravity * l * th.cos()
}

#[test]
fn unforced_frictionless_cartpole_conserves_energy() {
    let p = CartpoleParams {
        damping: 0.0,
        ..CartpoleParams::default()
    };
    let model = SystemModel::Cartpole(p);
    let mut x = DVector::from_vec(vec![0.0, 2.0, 0.3, -1.0]);
    let e0 = cartpole_energy(&x, &p);
    let u = DVector::zeros(1);
    for _ in 0..5000 {
        x = rk4_step(&model, &x, &u, 1e-3);
    }
    assert!((cartpole_energy(&x, &p) - e0).abs() < 1e-8 * e0.abs().max(1.0));
}

#[test]
fn damping_dissipates_pendulum_energy() {
    let p = PendulumParams::default();
    let model = SystemModel::Pendulum(p);
    let mut x = DVector::from_vec(vec![2.0, 0.0]);
    let u = DVector::zeros(1);
    let mut e = p.energy(&x);
    for _ in 0..200 {
        x = rk4_step(&model, &x, &u, 5e-3);
        let next = p.energy(&x);
        assert!(next <= e + 1e-12);
        e = next;
    }
}

#[test]
fn small_angle_pendulum_period() {
    let p = PendulumParams {
        damping: 0.0,
        ..PendulumParams::default()
    };
    let model = SystemModel::Pendulum(p);
    let period = 2.0 * std::f64::consts::PI * (p.length / p.gravity).sqrt();
    let steps = 4000;
    let h = period / steps as f64;
    let mut x = DVector::from_vec(vec![1e-4, 0.0]);
    let u = DVector::zeros(1);
    for _ in 0..steps {
        x = rk4_step(&model, &x, &u, h);
    }
    assert!((x[0] - 1e-4).abs() < 1e-9 && x[1].abs() < 1e-8, "{x}");
}
