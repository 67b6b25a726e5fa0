use std::sync::Arc;

use hjb_core::bench;
use hjb_core::grid::*;
use hjb_core::ocp::*;
use hjb_core::policy::PolicyHandle;
use hjb_core::sampling::{self, StateBox};
use proptest::prelude::*;
use rand::Rng;

fn vehicle() -> ControlProblem {
    ControlProblem::vehicle(1.0, StateBox::cube(2, -1.0, 1.0)).unwrap()
}

fn sensors() -> SensorLayout {
    SensorLayout::sobol(&StateBox::cube(2, -1.0, 1.0), 8, 1).unwrap()
}

fn custom(label: &str, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> TerminalCondition {
    TerminalCondition::new(
        TerminalFn::Custom {
            label: label.into(),
            eval: Arc::new(f),
        },
        sensors(),
    )
    .unwrap()
}

fn random_policy(seed: u64) -> PolicyHandle {
    let mut rng = sampling::rng(seed);
    let c: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
    PolicyHandle::feedback(move |t, x| vec![c[0] + c[1] * x[0] + c[2] * x[1] * t + c[3] * (x[0] * x[1]).sin()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn ordered_terminal_data_give_ordered_fields(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.1f64..2.0) {
        let p = vehicle();
        let spec = GridSpec::new(&p.domain, 0.1, 1.0, p.f_sup_norm, 1.0).unwrap();
        let pol = random_policy(seed);
        let g1 = custom("g1", move |x: &[f64]| (x[0] * x[0] + x[1] * x[1]).sqrt() + a);
        let g2 = custom("g2", move |x: &[f64]| (x[0] * x[0] + x[1] * x[1]).sqrt() - b * (x[0] * 3.0).cos().powi(2));
        let v1 = solve_linear_pde(&p, &pol, &g1, &spec, 1.0).unwrap();
        let v2 = solve_linear_pde(&p, &pol, &g2, &spec, 1.0).unwrap();
        for (x, y) in v1.values().iter().zip(v2.values()) {
            prop_assert!(x + 1e-10 >= *y);
        }
    }

    #[test]
    fn constants_are_preserved(seed in any::<u64>(), c in -5.0f64..5.0) {
        let p = vehicle();
        let spec = GridSpec::new(&p.domain, 0.2, 1.0, p.f_sup_norm, 1.0).unwrap();
        let g = TerminalCondition::new(TerminalFn::constant(c), sensors()).unwrap();
        let v = solve_linear_pde(&p, &random_policy(seed), &g, &spec, 1.0).unwrap();
        prop_assert!(v.values().iter().all(|x| *x == c));
    }

    #[test]
    fn fields_are_bounded_by_data(seed in any::<u64>()) {
        let p = vehicle();
        let spec = GridSpec::new(&p.domain, 0.1, 1.0, p.f_sup_norm, 1.0).unwrap();
        let g = TerminalCondition::new(TerminalFn::norm(), sensors()).unwrap();
        let v = solve_linear_pde(&p, &random_policy(seed), &g, &spec, 1.0).unwrap();
        prop_assert_eq!(v.values().len(), spec.node_count() * (spec.steps + 1));
        let gmax = spec.nodes().iter().map(|x| g.eval(x).unwrap().abs()).fold(0.0, f64::max);
        prop_assert!(v.max_abs() <= gmax + 1e-8);
        prop_assert!(v.values().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn spec_is_stable_and_hits_corners(h in prop::sample::select(vec![0.05, 0.1, 0.125, 0.25]), n in 0.5f64..3.0) {
        let bx = StateBox::cube(2, -2.0, 2.0);
        let spec = GridSpec::new(&bx, h, 1.0, 1.0, n).unwrap();
        prop_assert!(spec.dt <= stability_bound(h, 2, 1.0, n));
        prop_assert!((spec.steps as f64 * spec.dt - 1.0).abs() < 1e-12);
        prop_assert_eq!(spec.node(0), vec![-2.0, -2.0]);
        prop_assert_eq!(spec.node(spec.node_count() - 1), vec![2.0, 2.0]);
    }
}

#[test]
fn grid_iterates_decrease_monotonically() {
    let bp = bench::build("vehicle2d").unwrap();
    let p = &bp.problem;
    let spec = GridSpec::new(&p.domain, 0.1, 1.0, p.f_sup_norm, 1.0).unwrap();
    let g = TerminalCondition::new(TerminalFn::norm(), sensors()).unwrap();
    let fields = grid_policy_iteration(p, &g, &spec, 1.0, 4, ArgminConfig::Auto).unwrap();
    assert_eq!(fields.len(), 4);
    for w in fields.windows(2) {
        for (a, b) in w[0].values().iter().zip(w[1].values()) {
            assert!(*a + 1e-8 >= *b, "{a} < {b}");
        }
    }
}

#[test]
fn unstable_step_is_rejected() {
    let bx = StateBox::cube(1, -1.0, 1.0);
    let err = GridSpec::with_steps(&bx, 0.1, 1.0, 2, 1.0, 1.0).unwrap_err();
    assert!(matches!(err, hjb_core::Error::UnstableSpec { .. }));
}
