use std::sync::Arc;

use hjb_core::bench;
use hjb_core::ocp::*;
use hjb_core::sampling::{self, StateBox};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn lqr_with(b: Array2<f64>, r_diag: &[f64], lo: f64, hi: f64) -> ControlProblem {
    let d = b.nrows();
    let m = b.ncols();
    let data = LqrData {
        a: Array2::zeros((d, d)),
        b,
        q: Array2::eye(d),
        r: Array2::from_diag(&ndarray::Array1::from(r_diag.to_vec())),
    };
    ControlProblem::lqr("rand", data, ControlSet::cube(m, lo, hi), 1.0, StateBox::cube(d, -1.0, 1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hamiltonian_is_below_sampled_controls(
        id in prop::sample::select(bench::IDS.to_vec()),
        seed in any::<u64>(),
        t in 0.0f64..0.5,
    ) {
        let p = bench::build(id).unwrap().problem;
        let d = p.state_dim;
        let mut rng = sampling::rng(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let costate: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let h = hamiltonian(&p, t, &x, &costate, ArgminConfig::Auto).unwrap();
        let u_star = argmin_control(&p, t, &x, &costate, ArgminConfig::Auto).unwrap();
        prop_assert!(p.control_set.contains(&u_star));
        let ub = p.control_set.as_box();
        for u in sampling::uniform_points(&ub, 1000, &mut rng) {
            prop_assert!(h <= p.hamiltonian_objective(t, &x, &costate, &u) + 1e-12);
        }
    }

    #[test]
    fn dynamics_and_cost_are_deterministic(id in prop::sample::select(bench::IDS.to_vec()), seed in any::<u64>()) {
        let p = bench::build(id).unwrap().problem;
        let mut rng = sampling::rng(seed);
        let x: Vec<f64> = (0..p.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = sampling::uniform_points(&p.control_set.as_box(), 1, &mut rng).remove(0);
        prop_assert_eq!(p.dynamics(0.2, &x, &u), p.dynamics(0.2, &x, &u));
        prop_assert_eq!(p.running_cost(0.2, &x, &u).to_bits(), p.running_cost(0.2, &x, &u).to_bits());
        let n: f64 = p.dynamics(0.2, &x, &u).iter().map(|v| v * v).sum::<f64>().sqrt();
        if id == "vehicle2d" {
            prop_assert!(n <= p.f_sup_norm + 1e-12);
        }
    }

    #[test]
    fn steering_law_attains_minus_norm(g1 in -5.0f64..5.0, g2 in -5.0f64..5.0) {
        prop_assume!(g1.hypot(g2) >= 1e-10);
        let u = vehicle_steering_law(&[g1, g2]).unwrap();
        prop_assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&u));
        prop_assert!((u.cos() * g1 + u.sin() * g2 + g1.hypot(g2)).abs() <= 1e-12 * (1.0 + g1.hypot(g2)));
    }

    #[test]
    fn projection_lands_in_the_set(u in prop::collection::vec(-10.0f64..10.0, 3)) {
        let b = ControlSet::cube(3, -1.0 / 3.0, 0.5);
        prop_assert!(b.contains(&b.project(&u)));
        let a = ControlSet::AngleSet;
        prop_assert!(a.contains(&a.project(&u[..1])));
    }
}

#[test]
fn lqr_closed_form_agrees_with_grid_scan() {
    let mut rng = sampling::rng(2024);
    let res = 201;
    for _ in 0..100 {
        let (d, m) = (3, 2);
        let b = Array2::from_shape_fn((d, m), |_| rng.random_range(-1.0..1.0));
        let r_diag: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..2.0)).collect();
        let p = lqr_with(b.clone(), &r_diag, -0.5, 0.5);
        let x = vec![0.1, -0.2, 0.3];
        let costate: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cf = lqr_closed_form_argmin(&b, &p_r(&r_diag), &costate, &p.control_set).unwrap();
        let scan = grid_scan_argmin(&p, 0.0, &x, &costate, Some(res)).unwrap();
        let spacing = 1.0 / (res - 1) as f64;
        for j in 0..m {
            assert!((cf[j] - scan[j]).abs() <= spacing, "{cf:?} vs {scan:?}");
        }
        assert!(p.hamiltonian_objective(0.0, &x, &costate, &cf) <= p.hamiltonian_objective(0.0, &x, &costate, &scan) + 1e-15);
    }
}

fn p_r(r_diag: &[f64]) -> Array2<f64> {
    Array2::from_diag(&ndarray::Array1::from(r_diag.to_vec()))
}

#[test]
fn inverted_control_bounds_are_rejected() {
    let set = ControlSet::Box {
        lo: vec![0.0, 1.0],
        hi: vec![1.0, 0.5],
    };
    assert!(set.validate().is_err());
}

#[test]
fn terminal_condition_sensor_values_are_consistent() {
    let sensors = SensorLayout::sobol(&StateBox::cube(3, -1.0, 1.0), 50, 9).unwrap();
    let g = TerminalCondition::new(TerminalFn::quadratic(0.3, 0.2), sensors.clone()).unwrap();
    assert!(g.is_consistent());
    for (pt, v) in sensors.points().iter().zip(g.sensor_values()) {
        assert_eq!(g.eval(pt).unwrap(), *v);
    }
    let custom = TerminalCondition::new(
        TerminalFn::Custom {
            label: "x0".into(),
            eval: Arc::new(|x: &[f64]| x[0]),
        },
        sensors,
    )
    .unwrap();
    assert!(custom.is_consistent());
}
