use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtcd_core::cmaes::{reflect, SearchSpace, Variable};
use rtcd_core::dirtran::NominalTrajectory;
use rtcd_core::dynamics::{CartpoleParams, SystemModel};
use rtcd_core::funnel::{sample_on_level_set, Funnel, GoalRegion};
use rtcd_core::io;
use rtcd_core::tvlqr::{quadratic_form, wrap_angle};
use std::f64::consts::PI;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3f64,
        -1e-200..1e-200f64,
        any::<f64>().prop_filter("finite", |v| v.is_finite())
    ]
}

proptest! {
    #[test]
    fn wrapped_angles_are_congruent_and_in_range(a in -1e4..1e4f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let turns = (a - w) / (2.0 * PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn reflection_stays_in_the_unit_interval(u in -50.0..50.0f64) {
        let r = reflect(u);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn unit_cube_mapping_round_trips(
        lo in -100.0..100.0f64, width in 1e-3..100.0f64, frac in 0.0..=1.0f64,
        log_lo in 1e-4..1.0f64, decades in 0.1..6.0f64, log_frac in 0.0..=1.0f64,
    ) {
        let space = SearchSpace::new(vec![
            Variable::linear("a", lo, lo + width),
            Variable::log("b", log_lo, log_lo * 10f64.powf(decades)),
        ]).unwrap();
        let x = vec![lo + frac * width, log_lo * 10f64.powf(decades * log_frac)];
        let back = space.from_unit(&space.to_unit(&x));
        prop_assert!((back[0] - x[0]).abs() <= 1e-12 * (1.0 + x[0].abs()));
        prop_assert!((back[1] - x[1]).abs() <= 1e-12 * x[1]);
    }

    #[test]
    fn level_set_samples_have_the_requested_value(seed in any::<u64>(), rho in 1e-6..1e3f64, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(d, d, |i, j| ((i * 7 + j * 3 + seed as usize % 11) as f64).sin());
        let s = &a * a.transpose() + DMatrix::identity(d, d);
        let center = DVector::from_fn(d, |i, _| i as f64);
        let x = sample_on_level_set(&s, rho, &center, &mut rng).unwrap();
        let v = quadratic_form(&s, &(x - center));
        prop_assert!((v - rho).abs() <= 1e-9 * rho);
    }

    #[test]
    fn trajectory_csv_round_trips(values in prop::collection::vec(finite(), 5 * 6)) {
        let model = SystemModel::Cartpole(CartpoleParams::default());
        let mut traj = NominalTrajectory {
            times: (0..6).map(|k| k as f64 * 0.05).collect(),
            states: values.chunks(5).map(|c| DVector::from_column_slice(&c[..4])).collect(),
            inputs: values.chunks(5).map(|c| DVector::from_column_slice(&c[4..])).collect(),
            defect_norm: 0.0,
        };
        traj.defect_norm = traj.max_defect(&model);
        let back = io::trajectory_from_csv(&io::trajectory_to_csv(&traj).unwrap(), &model).unwrap();
        prop_assert_eq!(back.times, traj.times);
        prop_assert_eq!(back.states, traj.states);
        prop_assert_eq!(back.inputs, traj.inputs);
        prop_assert!(back.defect_norm == traj.defect_norm || traj.defect_norm.is_nan());
    }

    #[test]
    fn funnel_json_round_trips(rho in prop::collection::vec(1e-9..1e3f64, 3), entries in prop::collection::vec(finite(), 4)) {
        let s = DMatrix::from_row_slice(2, 2, &[entries[0], entries[1], entries[1], entries[2]]);
        let f = Funnel {
            times: vec![0.0, 0.1, 0.2],
            rho: rho.clone(),
            cost_to_go: vec![s.clone(); 3],
            centers: vec![DVector::from_vec(vec![entries[3], 0.0]); 3],
            goal: GoalRegion { rho: rho[2], cost_to_go: s, center: DVector::from_vec(vec![PI, 0.0]) },
        };
        prop_assert_eq!(io::funnel_from_json(&io::funnel_to_json(&f).unwrap()).unwrap(), f);
    }
}
