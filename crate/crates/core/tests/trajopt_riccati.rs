use nalgebra::{DMatrix, DVector};
use rtcd_core::dirtran::{optimize_trajectory, NominalTrajectory, TrajOptSetup};
use rtcd_core::dynamics::{rk4_step, Dynamics, PendulumParams, SystemModel};
use rtcd_core::nlp::SolverOptions;
use rtcd_core::tvlqr::{quadratic_form, solve_dre, ControllerCosts, GainSchedule, TrackingController};

fn pendulum() -> SystemModel {
    SystemModel::Pendulum(PendulumParams::default())
}

fn swing_up(model: &SystemModel) -> (TrajOptSetup, NominalTrajectory) {
    let setup = TrajOptSetup::swing_up(model);
    let (traj, _) = optimize_trajectory(&setup, model, &SolverOptions::default()).unwrap();
    (setup, traj)
}

fn costs(setup: &TrajOptSetup) -> ControllerCosts {
    ControllerCosts {
        state_cost: setup.state_cost.clone(),
        input_cost: setup.input_cost.clone(),
        final_state_cost: setup.final_state_cost.clone(),
    }
}

#[test]
fn open_loop_resimulation_reproduces_knots() {
    // Each interval re-integrated from its knot with the finer rollout
    // integrator under the held input lands on the next knot.
    let model = pendulum();
    let (_, traj) = swing_up(&model);
    let substeps = 10;
    let h = traj.dt() / substeps as f64;
    for k in 0..traj.len() - 1 {
        let mut x = traj.states[k].clone();
        for _ in 0..substeps {
            x = rk4_step(&model, &x, &traj.inputs[k], h);
        }
        assert!((&x - &traj.states[k + 1]).amax() < 1e-4, "knot {}", k + 1);
    }
}

#[test]
fn merit_decreases_within_every_outer_iteration() {
    let model = pendulum();
    let setup = TrajOptSetup::swing_up(&model);
    let (_, report) = optimize_trajectory(&setup, &model, &SolverOptions::default()).unwrap();
    assert!(report.converged);
    for (i, m) in report.merit_history.iter().enumerate() {
        assert!(
            m.end <= m.start + 1e-9 * m.start.abs().max(1.0),
            "outer iteration {i}: {m:?}"
        );
    }
}

#[test]
fn scaling_all_costs_keeps_the_solution() {
    let model = pendulum();
    let (setup, base) = swing_up(&model);
    let mut scaled = setup.clone();
    for q in scaled
        .state_cost
        .iter_mut()
        .chain(&mut scaled.input_cost)
        .chain(&mut scaled.final_state_cost)
    {
        *q *= 3.0;
    }
    let (traj, _) = optimize_trajectory(&scaled, &model, &SolverOptions::default()).unwrap();
    for k in 0..traj.len() {
        assert!((&traj.states[k] - &base.states[k]).amax() < 1e-3, "knot {k}");
    }
}

#[test]
fn coincident_boundary_states_give_a_resting_trajectory() {
    let model = pendulum();
    let mut setup = TrajOptSetup::swing_up(&model);
    setup.initial_state = vec![0.0, 0.0];
    setup.goal_state = vec![0.0, 0.0];
    let (traj, report) = optimize_trajectory(&setup, &model, &SolverOptions::default()).unwrap();
    assert!(report.converged);
    assert!(traj.states.iter().all(|x| x.amax() < 1e-8));
    assert!(traj.inputs.iter().all(|u| u.amax() < 1e-8));
}

fn symmetric_psd(s: &DMatrix<f64>) -> bool {
    (s - s.transpose()).amax() <= 1e-12 * s.amax() && s.clone().symmetric_eigenvalues().min() >= -1e-9 * s.amax()
}

/// Riccati right-hand side `−Ṡ = Q − S B R⁻¹ Bᵀ S + S A + Aᵀ S`, evaluated
/// independently of the library.
fn riccati_terms(s: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, costs: &ControllerCosts) -> (DMatrix<f64>, f64) {
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&costs.state_cost));
    let r_inv = DMatrix::from_diagonal(&DVector::from_iterator(
        costs.input_cost.len(),
        costs.input_cost.iter().map(|r| 1.0 / r),
    ));
    let quad = s * b * r_inv * b.transpose() * s;
    let lin = s * a + a.transpose() * s;
    let scale = q.norm() + quad.norm() + lin.norm();
    (q - quad + lin, scale)
}

#[test]
fn cost_to_go_satisfies_the_riccati_equation_between_knots() {
    let model = pendulum();
    let (setup, traj) = swing_up(&model);
    let c = costs(&setup);
    let sched = solve_dre(&traj, &c, &model).unwrap();
    // Linear states and held inputs make the refined grid describe the same
    // Riccati flow, sampled four times more densely.
    let fine = solve_dre(&traj.refined(4), &c, &model).unwrap();
    let h = traj.dt() / (4 * fine.substeps) as f64;
    for k in 1..traj.len() - 1 {
        assert!(symmetric_psd(&sched.cost_to_go[k]), "knot {k}");
        let s = &sched.cost_to_go[k];
        assert!((s - &fine.cost_to_go[4 * k]).norm() <= 1e-6 * s.norm(), "knot {k}");
        // Third-order one-sided difference inside the interval that starts at
        // the knot; the held input jumps at knots, so `Ṡ` is one-sided there.
        let j = 4 * k * fine.substeps;
        let d = &fine.dense_cost_to_go;
        let s_dot = (&d[j] * -11.0 + &d[j + 1] * 18.0 - &d[j + 2] * 9.0 + &d[j + 3] * 2.0) / (6.0 * h);
        let (a, b) = model.jacobians(&traj.states[k], &traj.inputs[k]);
        let (rhs, scale) = riccati_terms(s, &a, &b, &c);
        let residual = (&s_dot + &rhs).norm() / scale;
        assert!(residual <= 1e-3, "knot {k}: relative residual {residual:e}");
    }
    assert_eq!(sched.cost_to_go[traj.len() - 1], c.q_final());
}

#[test]
fn refining_the_grid_barely_changes_the_initial_cost_to_go() {
    let model = pendulum();
    let (setup, traj) = swing_up(&model);
    let c = costs(&setup);
    let coarse = solve_dre(&traj, &c, &model).unwrap();
    let fine = solve_dre(&traj.refined(2), &c, &model).unwrap();
    let change = (&fine.cost_to_go[0] - &coarse.cost_to_go[0]).norm() / coarse.cost_to_go[0].norm();
    assert!(change < 0.01, "relative change {change}");
}

fn linear_rollout_values(
    model: &SystemModel,
    traj: &NominalTrajectory,
    sched: &GainSchedule,
    err0: DVector<f64>,
) -> Vec<f64> {
    let ctl = TrackingController::new(model, traj, sched);
    ctl.linear_error_rollout(&err0, 50)
        .into_iter()
        .map(|(t, e)| ctl.cost_to_go_at(&e, t))
        .collect()
}

#[test]
fn cost_to_go_decreases_along_the_linear_closed_loop() {
    let model = pendulum();
    let (setup, traj) = swing_up(&model);
    let sched = solve_dre(&traj, &costs(&setup), &model).unwrap();
    for err0 in [[1e-2, 0.0], [0.0, 1e-2], [-5e-3, 8e-3]] {
        let v = linear_rollout_values(&model, &traj, &sched, DVector::from_column_slice(&err0));
        for w in v.windows(2) {
            assert!(w[1] <= w[0] + 1e-6 * v[0], "{} -> {}", w[0], w[1]);
        }
        assert!(v[v.len() - 1] < 1e-3 * v[0]);
    }
}

#[test]
fn perturbed_start_converges_under_tracking() {
    let model = pendulum();
    let (setup, traj) = swing_up(&model);
    let sched = solve_dre(&traj, &costs(&setup), &model).unwrap();
    let ctl = TrackingController::new(&model, &traj, &sched);
    let x0 = &traj.states[0] + DVector::from_vec(vec![1e-2, -1e-2]);
    let end = ctl.rollout(&x0, 0, 20).final_state().clone();
    let goal = DVector::from_column_slice(&setup.goal_state);
    assert!(quadratic_form(&sched.cost_to_go[traj.len() - 1], &(&end - &goal)) < 1e-2);
}

#[test]
fn weak_actuator_swing_up_pumps() {
    // Below 2·m·g·l/π a monotone swing from rest cannot gain the 2·m·g·l of
    // energy needed, so the solution must reverse direction.
    let p = PendulumParams {
        torque_limit: 1.5,
        ..PendulumParams::default()
    };
    assert!(p.torque_limit < 2.0 * p.mass * p.gravity * p.length / std::f64::consts::PI);
    let model = SystemModel::Pendulum(p);
    let (traj, report) =
        optimize_trajectory(&TrajOptSetup::swing_up(&model), &model, &SolverOptions::default()).unwrap();
    assert!(report.converged && traj.defect_norm <= 1e-6);
    assert!(traj.inputs.iter().all(|u| u.amax() <= p.torque_limit));
    let v: Vec<f64> = traj.states.iter().map(|x| x[1]).filter(|v| v.abs() > 1e-6).collect();
    let reversals = v.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
    assert!(reversals >= 2, "{reversals} reversals");
    let goal = DVector::from_column_slice(&TrajOptSetup::swing_up(&model).goal_state);
    assert!((traj.states.last().unwrap() - goal).amax() <= 1e-6);
}
