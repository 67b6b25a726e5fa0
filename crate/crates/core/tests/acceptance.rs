//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Accuracy criteria (A1-A4, A6, A9, 10-D) are reported without failing
//! the process; invariant criteria (A5 grid part, A7, A8) exit non-zero.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use hjb_core::bench;
use hjb_core::config::RunConfig;
use hjb_core::field::ValueField;
use hjb_core::grid::{
    grid_policy_iteration, hopf_lax_vehicle, solve_linear_pde, sqrt_h_convergence_study, GridField, GridSpec,
};
use hjb_core::nn::{adam_step, Activation, AdamConfig, AdamState, Mlp, ParamGrad};
use hjb_core::ocp::*;
use hjb_core::policy::*;
use hjb_core::sampling::{self, StateBox};
use hjb_core::stencil::{laplace_h, nabla_h, StencilConfig};
use hjb_core::transcription::*;
use rand::Rng;

// pinned tolerances
const A1_MAX_ERR: f64 = 0.12;
const A2_SLACK: f64 = 0.10;
const A2_MIN_EXPONENT: f64 = 0.4;
const A3_ABS: f64 = 0.15;
const A3_MIN_FRACTION: f64 = 0.9;
const A4_REL: f64 = 0.15;
const A4_FLOOR: f64 = 0.05;
const A5_GRID_TOL: f64 = 1e-8;
const A5_MAX_VIOLATION: f64 = 0.05;
const A6_RAD: f64 = 0.1;
const A7_STENCIL: f64 = 1e-12;
const A7_REVERSE: f64 = 1e-5;
const A7_DUAL: f64 = 1e-6;
const A7_ADJOINT: f64 = 1e-6;
const A8_TOL: f64 = 1e-10;
const A9_EXAMPLE: f64 = 1.99316;
const A9_EXAMPLE_TOL: f64 = 1e-5;
const D10_REL: f64 = 0.25;

struct Report {
    invariant_failed: bool,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, invariant: bool, detail: String) {
        println!("{id:<5} {}  {detail}", if pass { "PASS" } else { "FAIL" });
        if invariant && !pass {
            self.invariant_failed = true;
        }
    }
}

fn vehicle_probes() -> Vec<Vec<f64>> {
    let mut rng = sampling::rng(200);
    (0..200)
        .map(|_| vec![rng.random_range(-1.5..=1.5), rng.random_range(-1.5..=1.5)])
        .collect()
}

fn grid_criteria(r: &mut Report) {
    let b = bench::build("vehicle2d").unwrap();
    let p = &b.problem;
    let sensors = SensorLayout::sobol(&p.domain, 100, 1).unwrap();
    let g = TerminalCondition::new(TerminalFn::norm(), sensors).unwrap();
    let probes = vehicle_probes();

    let t0 = Instant::now();
    let spec = GridSpec::new(&p.domain, 0.05, p.horizon, p.f_sup_norm, 1.0).unwrap();
    let fields = grid_policy_iteration(p, &g, &spec, 1.0, 5, ArgminConfig::Auto).unwrap();
    let last = fields.last().unwrap();
    let err = probes
        .iter()
        .map(|x| (last.value(0.0, x).unwrap() - hopf_lax_vehicle(0.0, x, p.horizon)).abs())
        .fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    r.line(
        "A1",
        err <= A1_MAX_ERR && secs <= 120.0,
        false,
        format!("grid vehicle h=0.05 N=1 M=5: max |V-HopfLax| = {err:.4} (tol {A1_MAX_ERR}) over 200 probes, {secs:.1}s"),
    );

    let t0 = Instant::now();
    let table = sqrt_h_convergence_study(
        p,
        &g,
        &[0.2, 0.1, 0.05],
        1.0,
        5,
        &probes,
        |x| hopf_lax_vehicle(0.0, x, p.horizon),
        ArgminConfig::Auto,
    )
    .unwrap();
    let alpha = table.exponent.unwrap_or(f64::NAN);
    let errs: Vec<String> = table.rows.iter().map(|row| format!("{}:{:.4}", row.h, row.max_error)).collect();
    r.line(
        "A2",
        table.is_monotone(A2_SLACK) && alpha >= A2_MIN_EXPONENT,
        false,
        format!(
            "errors {} monotone={} exponent {alpha:.3} (min {A2_MIN_EXPONENT}), {:.1}s",
            errs.join(" "),
            table.is_monotone(A2_SLACK),
            t0.elapsed().as_secs_f64()
        ),
    );

    let mut worst = f64::NEG_INFINITY;
    for w in fields.windows(2) {
        for (a, b) in GridField::values(&w[0]).iter().zip(GridField::values(&w[1])) {
            worst = worst.max(b - a);
        }
    }
    r.line(
        "A5g",
        worst <= A5_GRID_TOL,
        true,
        format!("grid iterates: max (V_n+1 - V_n) = {worst:.2e} (tol {A5_GRID_TOL:e})"),
    );
}

fn operator_vehicle(r: &mut Report) {
    let t0 = Instant::now();
    let cfg = RunConfig::desk_scale("vehicle2d").unwrap();
    let p = cfg.build_problem().unwrap();
    let family = cfg.terminal_family().unwrap();
    let ic = cfg.iteration_config();
    let led = run_policy_iteration(&p, &family, &ic).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let g = led.terminal(TerminalFn::norm()).unwrap();

    let ok = (0..50)
        .filter(|i| {
            let x = [-1.5 + 3.0 * *i as f64 / 49.0, -0.5];
            let v = infer_value(&led, &g, 0.0, &x).unwrap();
            (v - hopf_lax_vehicle(0.0, &x, p.horizon)).abs() <= A3_ABS
        })
        .count();
    r.line(
        "A3",
        ok as f64 >= A3_MIN_FRACTION * 50.0 && train_secs <= 1200.0,
        false,
        format!("operator vehicle on x2=-0.5: {ok}/50 within {A3_ABS} (need 45), training {train_secs:.0}s"),
    );

    let mut rng = sampling::rng(1000);
    let ts: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..=p.horizon)).collect();
    let xs = sampling::uniform_points(&p.domain, 1000, &mut rng);
    let mono = monotonicity_check(&led, &ts, &xs).unwrap();
    let frac = mono.worst_violation_fraction();
    r.line(
        "A5o",
        frac <= A5_MAX_VIOLATION,
        false,
        format!("operator iterates: worst violation fraction {frac:.3} under eps-slack (max {A5_MAX_VIOLATION})"),
    );

    let mut worst: f64 = 0.0;
    let mut means = vec![];
    for (x0, target) in [([-1.5, -0.5], (1.0f64 / 3.0).atan()), ([-1.0, -0.5], 0.5f64.atan())] {
        let tr = synthesize_trajectory(&led, &p, &g, &x0, 0.01).unwrap();
        let m = tr.controls.iter().map(|u| u[0]).sum::<f64>() / tr.controls.len() as f64;
        worst = worst.max((m - target).abs());
        means.push(format!("{m:.4} vs {target:.4}"));
    }
    r.line(
        "A6",
        worst <= A6_RAD,
        false,
        format!("mean controls {} (tol {A6_RAD} rad)", means.join(", ")),
    );

    let (e1, e2) = (led.eps1(), led.eps2());
    let reported = e1.len() == ic.iterations && e2.len() == ic.iterations && e1.iter().chain(&e2).all(|e| e.is_finite());
    let ex1: Vec<f64> = (0..=10).map(|n| 2f64.powi(-n)).collect();
    let example = epsilon_bound(&ex1, &[0.0; 11], 0.0, 1.0, false).unwrap();
    let decreases = (ic.iterations.saturating_sub(3)..ic.iterations)
        .filter(|&n| n > 0 && (e1[n] < e1[n - 1] || e2[n] < e2[n - 1]))
        .count();
    let example_ok = (example - A9_EXAMPLE).abs() <= A9_EXAMPLE_TOL;
    r.line(
        "A9",
        reported && example_ok && decreases >= 2,
        false,
        format!(
            "eps reported for all {} iterations: {reported}; partial-sum example {example:.10} vs {A9_EXAMPLE} ({}); decreases in final 3: {decreases}{}",
            ic.iterations,
            if example_ok { "ok" } else { "formula gives 1 + 2(1/2 - 2^-9) + 2^-10" },
            if decreases >= 2 { "" } else { " (warn)" }
        ),
    );
}

fn oracle_value(p: &ControlProblem, g: &TerminalCondition, x0: &[f64]) -> f64 {
    let tp = TranscriptionProblem::new(p.clone(), g.clone(), x0.to_vec(), 50).unwrap();
    transcribe_and_solve(&tp, &PgdConfig::default()).unwrap().objective
}

/// Trains the desk preset for `id` and returns `(passes, total, worst rel, seconds)`.
fn lqr_generalization(id: &str, scales: &[f64], probes: usize, rel: f64) -> (usize, usize, f64, f64) {
    let t0 = Instant::now();
    let cfg = RunConfig::desk_scale(id).unwrap();
    let p = cfg.build_problem().unwrap();
    let led = run_policy_iteration(&p, &cfg.terminal_family().unwrap(), &cfg.iteration_config()).unwrap();
    let before: Arc<_> = Arc::new((*led.final_operator).clone());
    let mut rng = sampling::rng(7);
    let (mut ok, mut total, mut worst) = (0, 0, 0.0f64);
    for &s in scales {
        let g = led.terminal(TerminalFn::quadratic(0.0, s)).unwrap();
        for _ in 0..probes {
            let x0: Vec<f64> = (0..p.state_dim).map(|_| rng.random_range(-0.5..=0.5)).collect();
            let v = infer_value(&led, &g, 0.0, &x0).unwrap();
            let o = oracle_value(&p, &g, &x0);
            let e = (v - o).abs();
            worst = worst.max(e / o.abs().max(1e-12));
            total += 1;
            if e <= (rel * o.abs()).max(A4_FLOOR) {
                ok += 1;
            }
        }
    }
    assert_eq!(*led.final_operator, *before, "inference changed the operator");
    (ok, total, worst, t0.elapsed().as_secs_f64())
}

fn lqr_criteria(r: &mut Report) {
    let (ok, total, worst, secs) = lqr_generalization("lqr5x3", &[0.57, 0.45], 10, A4_REL);
    r.line(
        "A4",
        ok == total && secs <= 1800.0,
        false,
        format!("lqr5x3 unseen g=0.57|x|^2, 0.45|x|^2: {ok}/{total} within {A4_REL} rel (floor {A4_FLOOR}), worst rel {worst:.3}, {secs:.0}s"),
    );
    let (ok, total, worst, secs) = lqr_generalization("lqr10x5", &[0.58], 5, D10_REL);
    r.line(
        "D10",
        ok == total,
        false,
        format!("lqr10x5 unseen g=0.58|x|^2: {ok}/{total} within {D10_REL} rel (floor {A4_FLOOR}), worst rel {worst:.3}, {secs:.0}s"),
    );
}

fn perturbed(net: &Mlp, idx: usize, delta: f64) -> Mlp {
    let mut n = net.clone();
    let mut k = idx;
    for l in n.layers_mut() {
        if k < l.weight.len() {
            l.weight[k] += delta;
            return n;
        }
        k -= l.weight.len();
        if k < l.bias.len() {
            l.bias[k] += delta;
            return n;
        }
        k -= l.bias.len();
    }
    unreachable!()
}

fn kernel_criteria(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = sampling::rng(77);
    let mut fails = vec![];

    // dyadic spacing and points keep the difference quotients exact up to roundoff
    let mut stencil_err: f64 = 0.0;
    for _ in 0..20 {
        let a: Vec<f64> = (0..9).map(|_| rng.random_range(-4i32..=4) as f64).collect();
        let f = |x: &[f64]| (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| 0.5 * a[i * 3 + j] * x[i] * x[j]).sum::<f64>();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-8i32..=8) as f64 / 8.0).collect();
        let cfg = StencilConfig::new(0.125, 3).unwrap();
        let g = nabla_h(f, &x, &cfg);
        for i in 0..3 {
            let exact: f64 = (0..3).map(|j| 0.5 * (a[i * 3 + j] + a[j * 3 + i]) * x[j]).sum();
            stencil_err = stencil_err.max((g[i] - exact).abs());
        }
        stencil_err = stencil_err.max((laplace_h(f, &x, &cfg) - (a[0] + a[4] + a[8])).abs());
    }
    if stencil_err > A7_STENCIL {
        fails.push(format!("stencil {stencil_err:.1e}"));
    }

    let net = Mlp::init(&[3, 6, 5, 2], Activation::Tanh, 5).unwrap();
    let x = [0.3, -0.7, 0.2];
    let up = [0.6, -1.1];
    let grad = net.backward_params(&x, &up).unwrap().flatten();
    let obj = |n: &Mlp| -> f64 { n.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
    let mut rev: f64 = 0.0;
    for (i, g) in grad.iter().enumerate() {
        let fd = (obj(&perturbed(&net, i, 1e-6)) - obj(&perturbed(&net, i, -1e-6))) / 2e-6;
        rev = rev.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3));
    }
    if rev > A7_REVERSE {
        fails.push(format!("reverse-mode {rev:.1e}"));
    }

    let (_, dv) = net.forward_dual_t(&x, 0).unwrap();
    let (mut xp, mut xm) = (x, x);
    xp[0] += 1e-5;
    xm[0] -= 1e-5;
    let (fp, fm) = (net.forward(&xp).unwrap(), net.forward(&xm).unwrap());
    let dual = (0..2)
        .map(|j| {
            let fd = (fp[j] - fm[j]) / 2e-5;
            (dv[j] - fd).abs() / dv[j].abs().max(fd.abs()).max(1e-3)
        })
        .fold(0.0, f64::max);
    if dual > A7_DUAL {
        fails.push(format!("dual {dual:.1e}"));
    }

    let b = bench::build("lqr5x3").unwrap();
    let g = TerminalCondition::new(
        TerminalFn::quadratic(0.0, 0.57),
        SensorLayout::sobol(&StateBox::cube(5, -1.0, 1.0), 10, 1).unwrap(),
    )
    .unwrap();
    let tp = TranscriptionProblem::new(b.problem, g, vec![0.3, -0.2, 0.4, 0.1, -0.5], 10).unwrap();
    let u: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-0.3..0.5)).collect()).collect();
    let adj = adjoint_gradient(&tp, &u).unwrap();
    let mut adj_err: f64 = 0.0;
    for k in 0..u.len() {
        for j in 0..3 {
            let (mut p, mut m) = (u.clone(), u.clone());
            p[k][j] += 1e-6;
            m[k][j] -= 1e-6;
            let fd = (tp.objective(&p).unwrap() - tp.objective(&m).unwrap()) / 2e-6;
            adj_err = adj_err.max((adj[k][j] - fd).abs() / adj[k][j].abs().max(fd.abs()).max(1e-3));
        }
    }
    if adj_err > A7_ADJOINT {
        fails.push(format!("adjoint {adj_err:.1e}"));
    }

    // first bias-corrected step moves every parameter by lr·g/(|g| + eps)
    let small = Mlp::init(&[2, 3, 1], Activation::Tanh, 9).unwrap();
    let mut pg = ParamGrad::zeros_like(&small);
    for l in &mut pg.layers {
        for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let cfg = AdamConfig::default();
    let mut stepped = small.clone();
    let mut st = AdamState::for_mlp(cfg.clone(), &stepped);
    adam_step(&mut st, &mut stepped, &pg).unwrap();
    let mut adam_err: f64 = 0.0;
    for ((l0, l1), lg) in small.layers().iter().zip(stepped.layers()).zip(&pg.layers) {
        for ((a, b), g) in l0.weight.iter().chain(&l0.bias).zip(l1.weight.iter().chain(&l1.bias)).zip(lg.weight.iter().chain(&lg.bias)) {
            adam_err = adam_err.max((b - (a - cfg.lr * g / (g.abs() + cfg.eps))).abs());
        }
    }
    if adam_err > 1e-15 {
        fails.push(format!("adam {adam_err:.1e}"));
    }

    let mut scan_bad = 0;
    for _ in 0..100 {
        let bm = ndarray::Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let rd: Vec<f64> = (0..2).map(|_| rng.random_range(0.2..2.0)).collect();
        let rm = ndarray::Array2::from_diag(&ndarray::Array1::from(rd));
        let data = LqrData {
            a: ndarray::Array2::zeros((3, 3)),
            b: bm.clone(),
            q: ndarray::Array2::eye(3),
            r: rm.clone(),
        };
        let p = ControlProblem::lqr("rand", data, ControlSet::cube(2, -0.5, 0.5), 1.0, StateBox::cube(3, -1.0, 1.0)).unwrap();
        let x = [0.1, -0.2, 0.3];
        let costate: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cf = lqr_closed_form_argmin(&bm, &rm, &costate, &p.control_set).unwrap();
        let scan = grid_scan_argmin(&p, 0.0, &x, &costate, Some(201)).unwrap();
        if (0..2).any(|j| (cf[j] - scan[j]).abs() > 1.0 / 200.0) {
            scan_bad += 1;
        }
    }
    if scan_bad > 0 {
        fails.push(format!("lqr argmin {scan_bad}/100"));
    }

    let secs = t0.elapsed().as_secs_f64();
    r.line(
        "A7",
        fails.is_empty() && secs <= 60.0,
        true,
        format!(
            "stencil {stencil_err:.1e} (tol {A7_STENCIL:e}), reverse {rev:.1e} (tol {A7_REVERSE:e}), dual {dual:.1e} (tol {A7_DUAL:e}), adjoint {adj_err:.1e} (tol {A7_ADJOINT:e}), adam {adam_err:.1e}, lqr argmin {}/100, {secs:.1}s{}",
            100 - scan_bad,
            if fails.is_empty() { String::new() } else { format!(" failing: {}", fails.join(", ")) }
        ),
    );
}

fn comparison_criterion(r: &mut Report) {
    let p = ControlProblem::vehicle(1.0, StateBox::cube(2, -1.0, 1.0)).unwrap();
    let spec = GridSpec::new(&p.domain, 0.1, 1.0, p.f_sup_norm, 1.0).unwrap();
    let sensors = SensorLayout::sobol(&p.domain, 8, 1).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..10u64 {
        let mut rng = sampling::rng(seed);
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (a, bump) = (rng.random_range(0.0..1.0), rng.random_range(0.1..2.0));
        let pol = PolicyHandle::feedback(move |t, x| vec![c[0] + c[1] * x[0] + c[2] * x[1] * t + c[3] * (x[0] * x[1]).sin()]);
        let g1 = TerminalFn::Custom {
            label: "upper".into(),
            eval: Arc::new(move |x: &[f64]| x[0].hypot(x[1]) + a),
        };
        let g2 = TerminalFn::Custom {
            label: "lower".into(),
            eval: Arc::new(move |x: &[f64]| x[0].hypot(x[1]) - bump * (3.0 * x[0]).cos().powi(2)),
        };
        let v1 = solve_linear_pde(&p, &pol, &TerminalCondition::new(g1, sensors.clone()).unwrap(), &spec, 1.0).unwrap();
        let v2 = solve_linear_pde(&p, &pol, &TerminalCondition::new(g2, sensors.clone()).unwrap(), &spec, 1.0).unwrap();
        for (x, y) in GridField::values(&v1).iter().zip(GridField::values(&v2)) {
            worst = worst.max(y - x);
        }
    }
    r.line(
        "A8",
        worst <= A8_TOL,
        true,
        format!("g1 >= g2 on 10 random vehicle policies: max (V2 - V1) = {worst:.2e} (tol {A8_TOL:e})"),
    );
}

fn main() -> ExitCode {
    // cargo test passes harness flags; a filter that excludes us skips the run
    let mut filters = vec![];
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--skip" {
            if args.next().is_some_and(|s| "acceptance".contains(s.as_str())) {
                return ExitCode::SUCCESS;
            }
        } else if !a.starts_with('-') {
            filters.push(a);
        }
    }
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let t0 = Instant::now();
    let mut r = Report { invariant_failed: false };
    kernel_criteria(&mut r);
    comparison_criterion(&mut r);
    grid_criteria(&mut r);
    operator_vehicle(&mut r);
    lqr_criteria(&mut r);
    println!("acceptance finished in {:.0}s", t0.elapsed().as_secs_f64());
    if r.invariant_failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
