use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hjb_core::bench;
use hjb_core::config::RunConfig;
use hjb_core::deeponet::OperatorNetwork;
use hjb_core::field::ValueField;
use hjb_core::grid::{grid_policy_iteration, hopf_lax_vehicle, GridField, GridSpec};
use hjb_core::io::{self, num};
use hjb_core::ocp::{ArgminConfig, ControlProblem, SensorLayout, TerminalCondition, TerminalFn};
use hjb_core::policy::{epsilon_bound, monotonicity_check, run_policy_iteration, synthesize_with_field};
use hjb_core::sampling::{self, StateBox};
use hjb_core::transcription::{transcribe_and_solve, PgdConfig, TranscriptionProblem};
use hjb_core::{Error, Result};
use serde_json::json;

use crate::inputs;
use crate::{CompareArgs, GridSolveArgs, InferArgs, OracleArgs, OracleKind, SynthesizeArgs, TrainArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::OracleInapplicable { .. } => 4,
        Error::DivergenceDetected { .. }
        | Error::NonFiniteValue(_)
        | Error::UnstableSpec { .. }
        | Error::NoMinimizer(_)
        | Error::DegenerateGradient { .. } => 3,
        _ => 2,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::NoMinimizer(_) => "NoMinimizer",
        Error::NonDiagonalR => "NonDiagonalR",
        Error::DegenerateGradient { .. } => "DegenerateGradient",
        Error::ShapeMismatch(_) => "ShapeMismatch",
        Error::SensorMismatch => "SensorMismatch",
        Error::EmptyCollocation => "EmptyCollocation",
        Error::DivergenceDetected { .. } => "DivergenceDetected",
        Error::NViolatesMonotonicityBound { .. } => "NViolatesMonotonicityBound",
        Error::EmptySequence => "EmptySequence",
        Error::UnstableSpec { .. } => "UnstableSpec",
        Error::NonFiniteValue(_) => "NonFiniteValue",
        Error::UnknownProblem(_) => "UnknownProblem",
        Error::OracleInapplicable { .. } => "OracleInapplicable",
        Error::InvalidProblem(_) => "InvalidProblem",
        Error::InvalidArgument(_) => "InvalidArgument",
        Error::Config { .. } => "Config",
        Error::Format(_) => "Format",
        Error::Io(_) => "Io",
    }
}

/// One-line JSON error record for stderr.
pub fn error_record(e: &Error, code: u8) -> String {
    let mut rec = json!({ "error": kind(e), "message": e.to_string(), "exit_code": code });
    if let Error::Config { path, .. } = e {
        rec["path"] = json!(path);
    }
    rec.to_string()
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

struct Run {
    dir: PathBuf,
    config: RunConfig,
    problem: ControlProblem,
    network: Arc<OperatorNetwork>,
    hash: String,
}

fn load_run(dir: &Path) -> Result<Run> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    let problem = config.build_problem()?;
    let network = Arc::new(OperatorNetwork::load(&dir.join("final_operator.json"))?);
    if network.state_dim() != problem.state_dim {
        return Err(Error::ShapeMismatch("stored operator does not match the run's problem".into()));
    }
    let hash = io::config_hash(&config)?;
    Ok(Run {
        dir: dir.to_path_buf(),
        config,
        problem,
        network,
        hash,
    })
}

fn ensure_absent(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::Io(format!("{} already exists; run directories are write-once", dir.display())));
    }
    Ok(())
}

pub fn train(root: &Path, a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, &a.problem) {
        (Some(path), problem) => {
            let cfg = RunConfig::load(path)?;
            if let Some(p) = problem {
                if *p != cfg.problem {
                    return Err(config_error("problem", format!("--problem {p} contradicts the config file ({})", cfg.problem)));
                }
            }
            cfg
        }
        (None, Some(p)) if a.paper_scale => RunConfig::paper_scale(p)?,
        (None, Some(p)) => RunConfig::desk_scale(p)?,
        (None, None) => return Err(config_error("problem", "give --problem or --config")),
    };
    if let Some(s) = a.seed {
        cfg.network.seed = s;
        cfg.training.seed = s;
    }
    if let Some(m) = a.iterations {
        cfg.scheme.iterations = m;
    }
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        // no-op when --threads already sized the pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let hash = io::config_hash(&cfg)?;
    let dir = a
        .out
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| root.join(format!("{}-{}", cfg.problem, &hash[..12])));
    ensure_absent(&dir)?;

    let problem = cfg.build_problem()?;
    let funcs = cfg.terminal_family()?;
    log::info!("training {} into {}", cfg.problem, dir.display());
    let ledger = run_policy_iteration(&problem, &funcs, &cfg.iteration_config())?;
    let manifest = json!({
        "problem": cfg.problem,
        "deterministic": cfg.deterministic,
        "run_config": cfg,
    });
    ledger.export(&dir, &manifest, !cfg.deterministic)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let eps1 = ledger.eps1();
    let eps2 = ledger.eps2();
    let mut diag = json!({
        "eps1_hat": eps1,
        "eps2_hat": eps2,
        "epsilon_bound_t0": if eps1.is_empty() { None } else {
            Some(epsilon_bound(&eps1, &eps2, 0.0, problem.horizon, cfg.diagnostics.include_m1)?)
        },
    });
    if ledger.iterates.len() >= 2 {
        let n = cfg.diagnostics.monotonicity_probes;
        let mut rng = sampling::rng(sampling::derive_seed(cfg.training.seed, 0x6d6f6e6f));
        let ts: Vec<f64> = sampling::uniform_points(&StateBox::cube(1, 0.0, problem.horizon), n, &mut rng)
            .into_iter()
            .map(|v| v[0])
            .collect();
        let xs = sampling::uniform_points(&problem.domain, n, &mut rng);
        diag["monotonicity"] = serde_json::to_value(monotonicity_check(&ledger, &ts, &xs)?)?;
    }
    fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&diag)?)?;
    println!("{}", dir.display());
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let g = inputs::terminal(&a.g, run.network.sensors())?;
    let (ts, xs) = inputs::points(&a.points, run.problem.state_dim)?;
    let before = run.network.to_checkpoint();
    let bound = run.network.bind(&g)?;
    let values = bound.values(&ts, &xs)?;
    assert!(run.network.to_checkpoint() == before, "inference changed the operator");
    let mut header = vec!["t".to_string()];
    header.extend(inputs::point_header(run.problem.state_dim));
    header.push("V".into());
    let rows: Vec<Vec<String>> = ts
        .iter()
        .zip(&xs)
        .zip(&values)
        .map(|((t, x), v)| {
            let mut r = vec![num(*t)];
            r.extend(x.iter().map(|c| num(*c)));
            r.push(num(*v));
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_or_print(a.out.as_deref(), &io::csv_string(&header, &rows, &run.hash))
}

pub fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let p = &run.problem;
    let g = inputs::terminal(&a.g, run.network.sensors())?;
    let dt = a
        .dt
        .or(run.config.diagnostics.rollout_dt)
        .unwrap_or(p.horizon / 100.0);
    let bound = run.network.bind(&g)?;
    let tr = synthesize_with_field(p, &bound, Some(&g), &a.x0, dt, run.config.scheme.h, run.config.scheme.argmin)?;
    io::create_fresh_dir(&a.out)?;

    let (d, m) = (p.state_dim, p.control_dim);
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend(inputs::point_header(d));
    header.extend((1..=m).map(|j| format!("u{j}")));
    let rows: Vec<Vec<String>> = tr
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut r = vec![k.to_string(), num(*t)];
            r.extend(tr.states[k].iter().map(|v| num(*v)));
            match tr.controls.get(k) {
                Some(u) => r.extend(u.iter().map(|v| num(*v))),
                None => r.extend(std::iter::repeat_n(String::new(), m)),
            }
            r
        })
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut text = io::csv_string(&header_ref, &rows, &run.hash);
    if tr.escaped_domain {
        log::warn!("trajectory left the working box");
        let at = text.rfind("# config_hash=").expect("footer present");
        text.insert_str(at, "# warning=TrajectoryEscapedDomain\n");
    }
    fs::write(a.out.join("trajectory.csv"), text)?;
    for i in 0..d {
        let ys: Vec<f64> = tr.states.iter().map(|s| s[i]).collect();
        let name = format!("x{}", i + 1);
        io::write_svg(&a.out.join(format!("{name}.svg")), &format!("{name}(t)"), "t", &name, &tr.times, &ys)?;
    }
    let ct = &tr.times[..tr.controls.len()];
    for j in 0..m {
        let ys: Vec<f64> = tr.controls.iter().map(|u| u[j]).collect();
        let name = format!("u{}", j + 1);
        io::write_svg(&a.out.join(format!("{name}.svg")), &format!("{name}(t)"), "t", &name, ct, &ys)?;
    }
    let mean_u: Vec<f64> = (0..m)
        .map(|j| tr.controls.iter().map(|u| u[j]).sum::<f64>() / tr.controls.len().max(1) as f64)
        .collect();
    println!(
        "{}",
        json!({
            "running_cost": tr.running_cost,
            "terminal_cost": tr.terminal_cost,
            "mean_control": mean_u,
            "escaped_domain": tr.escaped_domain,
        })
    );
    Ok(())
}

fn require_norm_vehicle(problem_id: &str, g: &TerminalCondition) -> Result<()> {
    let is_norm = matches!(
        g.func(),
        TerminalFn::Radial { offset, linear, quadratic } if *offset == 0.0 && *linear == 1.0 && *quadratic == 0.0
    );
    if problem_id != "vehicle2d" || !is_norm {
        return Err(Error::OracleInapplicable {
            oracle: "hopflax".into(),
            reason: "closed form only for vehicle2d with g = |x|".into(),
        });
    }
    Ok(())
}

fn grid_oracle(
    problem: &ControlProblem,
    g: &TerminalCondition,
    h: f64,
    viscosity: f64,
    iterations: usize,
    argmin: ArgminConfig,
) -> Result<GridField> {
    if problem.state_dim > 2 {
        return Err(Error::OracleInapplicable {
            oracle: "grid".into(),
            reason: format!("d = {} > 2", problem.state_dim),
        });
    }
    if matches!(g.func(), TerminalFn::Sampled) {
        return Err(Error::OracleInapplicable {
            oracle: "grid".into(),
            reason: "terminal function known only at sensors".into(),
        });
    }
    let spec = GridSpec::new(&problem.domain, h, problem.horizon, problem.f_sup_norm, viscosity)?;
    let mut fields = grid_policy_iteration(problem, g, &spec, viscosity, iterations.max(1), argmin)?;
    Ok(fields.pop().expect("at least one iterate"))
}

fn transcription_value(problem: &ControlProblem, g: &TerminalCondition, t: f64, x0: &[f64], steps: usize) -> Result<(f64, TranscriptionProblem, hjb_core::transcription::TrajectorySolution)> {
    if !(0.0..problem.horizon).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, T)")));
    }
    // the catalog problems are autonomous, so starting at t means a horizon T − t
    let mut p = problem.clone();
    p.horizon = problem.horizon - t;
    let tp = TranscriptionProblem::new(p, g.clone(), x0.to_vec(), steps)?;
    let sol = transcribe_and_solve(&tp, &PgdConfig::default())?;
    if !sol.converged {
        log::warn!("transcription did not converge from {x0:?}; best objective reported");
    }
    Ok((sol.objective, tp, sol))
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let p = &run.problem;
    let g = inputs::terminal(&a.g, run.network.sensors())?;
    let (ts, xs) = match &a.points {
        Some(path) => inputs::points(path, p.state_dim)?,
        None => {
            let mut rng = sampling::rng(a.seed);
            (vec![0.0; a.probes], sampling::uniform_points(&p.domain.inflated(0.75), a.probes, &mut rng))
        }
    };
    let oracle: Vec<f64> = match a.oracle {
        OracleKind::Hopflax => {
            require_norm_vehicle(&run.config.problem, &g)?;
            ts.iter().zip(&xs).map(|(t, x)| hopf_lax_vehicle(*t, x, p.horizon)).collect()
        }
        OracleKind::Grid => {
            let field = grid_oracle(p, &g, a.grid_h, run.config.scheme.viscosity, run.config.scheme.iterations, run.config.scheme.argmin)?;
            ValueField::values(&field, &ts, &xs)?
        }
        OracleKind::Transcription => ts
            .iter()
            .zip(&xs)
            .map(|(t, x)| transcription_value(p, &g, *t, x, a.steps).map(|r| r.0))
            .collect::<Result<_>>()?,
    };
    let vhat = run.network.bind(&g)?.values(&ts, &xs)?;
    let errs: Vec<f64> = vhat.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).collect();
    let d = p.state_dim;
    let mut header = vec!["probe".to_string(), "t".to_string()];
    header.extend(inputs::point_header(d));
    header.extend(["v_hat", "v_oracle", "abs_err"].map(String::from));
    let mut rows: Vec<Vec<String>> = (0..ts.len())
        .map(|i| {
            let mut r = vec![i.to_string(), num(ts[i])];
            r.extend(xs[i].iter().map(|v| num(*v)));
            r.extend([num(vhat[i]), num(oracle[i]), num(errs[i])]);
            r
        })
        .collect();
    let max = errs.iter().cloned().fold(0.0, f64::max);
    let mean = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
    for (label, v) in [("max", max), ("mean", mean)] {
        let mut r = vec![label.to_string()];
        r.extend(std::iter::repeat_n(String::new(), d + 3));
        r.push(num(v));
        rows.push(r);
    }
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let text = io::csv_string(&header_ref, &rows, &run.hash);
    match &a.out {
        Some(path) => {
            fs::write(path, text)?;
            println!("{}", json!({ "probes": errs.len(), "max_abs_err": max, "mean_abs_err": mean }));
        }
        None => print!("{text}"),
    }
    log::info!("compared {} against {:?}: max {max:.4}, mean {mean:.4}", run.dir.display(), a.oracle);
    Ok(())
}

fn problem_terminal(id: &str, spec: Option<&str>, domain: &StateBox) -> Result<(bench::BenchProblem, TerminalCondition)> {
    let bp = bench::build(id)?;
    // grid and oracle evaluations never touch the branch net; the layout only carries g
    let sensors = SensorLayout::sobol(domain, 16, 0)?;
    let g = match spec {
        Some(s) => inputs::terminal(s, &sensors)?,
        None => TerminalCondition::new(bp.reference_terminal.clone(), sensors)?,
    };
    Ok((bp, g))
}

pub fn grid_solve(a: GridSolveArgs) -> Result<()> {
    let domain = bench::build(&a.problem)?.problem.domain;
    let (bp, g) = problem_terminal(&a.problem, a.g.as_deref(), &domain)?;
    let p = &bp.problem;
    if p.state_dim > 2 {
        return Err(Error::OracleInapplicable {
            oracle: "grid".into(),
            reason: format!("d = {} > 2", p.state_dim),
        });
    }
    let spec = GridSpec::new(&p.domain, a.h, p.horizon, p.f_sup_norm, a.viscosity)?;
    ensure_absent(&a.out)?;
    let fields = grid_policy_iteration(p, &g, &spec, a.viscosity, a.iterations, ArgminConfig::Auto)?;
    let manifest = json!({
        "problem": bp.id,
        "g": g.func().to_string(),
        "h": a.h,
        "viscosity": a.viscosity,
        "iterations": a.iterations,
        "dt": spec.dt,
        "steps": spec.steps,
        "counts": spec.counts,
    });
    let hash = io::config_hash(&manifest)?;
    io::create_fresh_dir(&a.out)?;
    for (n, f) in fields.iter().enumerate() {
        f.write_slab(&a.out.join(format!("field_{n}.slab")))?;
    }
    let d = p.state_dim;
    let mut header = inputs::point_header(d);
    header.extend((0..fields.len()).map(|n| format!("V{n}")));
    let rows: Vec<Vec<String>> = spec
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r: Vec<String> = x.iter().map(|v| num(*v)).collect();
            r.extend(fields.iter().map(|f| num(f.initial_slice()[i])));
            r
        })
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_csv(&a.out.join("value_t0.csv"), &header_ref, &rows, &hash)?;
    let full = json!({ "manifest": manifest, "config_hash": hash, "code_version": env!("CARGO_PKG_VERSION") });
    fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&full)?)?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn oracle(a: OracleArgs) -> Result<()> {
    let domain = bench::build(&a.problem)?.problem.domain;
    let (bp, g) = problem_terminal(&a.problem, a.g.as_deref(), &domain)?;
    let p = &bp.problem;
    if a.x0.len() != p.state_dim {
        return Err(Error::ShapeMismatch(format!("x0 has {} entries, d = {}", a.x0.len(), p.state_dim)));
    }
    let value = match a.kind {
        OracleKind::Hopflax => {
            require_norm_vehicle(bp.id, &g)?;
            hopf_lax_vehicle(a.t, &a.x0, p.horizon)
        }
        OracleKind::Grid => {
            let field = grid_oracle(p, &g, a.grid_h, bp.defaults.viscosity, bp.defaults.iterations, ArgminConfig::Auto)?;
            field.value(a.t, &a.x0)?
        }
        OracleKind::Transcription => {
            let (v, tp, sol) = transcription_value(p, &g, a.t, &a.x0, a.steps)?;
            if let Some(path) = &a.out {
                let hash = io::config_hash(&json!({ "problem": bp.id, "g": g.func().to_string(), "x0": a.x0, "t": a.t, "steps": a.steps }))?;
                sol.write_csv(path, tp.dt(), &hash)?;
            }
            v
        }
    };
    println!("{}", json!({ "problem": bp.id, "oracle": format!("{:?}", a.kind).to_lowercase(), "t": a.t, "x0": a.x0, "value": value }));
    Ok(())
}

pub fn catalog() -> Result<()> {
    for id in bench::IDS {
        let bp = bench::build(id)?;
        let p = &bp.problem;
        println!(
            "{id}\td={}\tm={}\tT={}\th={}\tN={}\tM={}\tg={}",
            p.state_dim,
            p.control_dim,
            p.horizon,
            bp.defaults.h,
            bp.defaults.viscosity,
            bp.defaults.iterations,
            bp.training_family.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(" | ")
        );
    }
    Ok(())
}
