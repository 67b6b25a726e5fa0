//! Policy iteration: alternate operator training with the pointwise argmin
//! update `uₙ₊₁(t,x) = argmin_u ∇ʰVₙ(t,x)·f(t,x,u) + L(t,x,u)`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deeponet::{
    operator_adam, operator_eval, train_operator, trunk_batch, BoundOperator, NetworkConfig, OperatorNetwork,
    TrainConfig, TrainingReport,
};
use crate::error::{Error, Result};
use crate::field::ValueField;
use crate::io;
use crate::ocp::{argmin_control, ArgminConfig, ControlProblem, TerminalCondition, TerminalFn};
use crate::sampling;
use crate::stencil::{gradients_from_stencil_values, stencil_points, try_nabla_h, StencilConfig, ViscousScheme};

type FeedbackFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// The starting policy `u₀`.
#[derive(Clone)]
pub enum InitialPolicy {
    Constant(Vec<f64>),
    /// Outputs are projected onto `U`.
    Feedback(FeedbackFn),
}

/// A policy `uₙ(t, x)`.
#[derive(Clone)]
pub enum PolicyHandle {
    Initial(InitialPolicy),
    /// Pointwise argmin against `∇ʰ` of a previous value field, computed
    /// lazily per query.
    Induced {
        value: Arc<dyn ValueField>,
        solver: ArgminConfig,
        stencil: StencilConfig,
    },
}

impl fmt::Debug for PolicyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyHandle::Initial(InitialPolicy::Constant(u)) => write!(f, "Initial(Constant({u:?}))"),
            PolicyHandle::Initial(InitialPolicy::Feedback(_)) => write!(f, "Initial(Feedback)"),
            PolicyHandle::Induced { solver, stencil, .. } => {
                write!(f, "Induced {{ solver: {solver:?}, h: {} }}", stencil.h())
            }
        }
    }
}

impl PolicyHandle {
    /// `u₀ ≡ 0`, projected onto `U`.
    pub fn zero(problem: &ControlProblem) -> Self {
        PolicyHandle::Initial(InitialPolicy::Constant(
            problem.control_set.project(&vec![0.0; problem.control_dim]),
        ))
    }

    pub fn constant(problem: &ControlProblem, u: Vec<f64>) -> Result<Self> {
        if u.len() != problem.control_dim || !problem.control_set.contains(&u) {
            return Err(Error::InvalidArgument(format!("constant policy {u:?} is not in U")));
        }
        Ok(PolicyHandle::Initial(InitialPolicy::Constant(u)))
    }

    pub fn feedback(f: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        PolicyHandle::Initial(InitialPolicy::Feedback(Arc::new(f)))
    }

    pub fn control(&self, problem: &ControlProblem, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            PolicyHandle::Initial(InitialPolicy::Constant(u)) => Ok(u.clone()),
            PolicyHandle::Initial(InitialPolicy::Feedback(f)) => Ok(problem.control_set.project(&f(t, x))),
            PolicyHandle::Induced {
                value,
                solver,
                stencil,
            } => {
                let p = try_nabla_h(|y| value.value(t, y), x, stencil)?;
                argmin_control(problem, t, x, &p, *solver)
            }
        }
    }

    /// Controls at `(ts[i], xs[i])`; induced policies evaluate all stencil
    /// points in one batch.
    pub fn controls(&self, problem: &ControlProblem, ts: &[f64], xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if ts.len() != xs.len() {
            return Err(Error::ShapeMismatch("times and states differ in count".into()));
        }
        match self {
            PolicyHandle::Initial(_) => xs
                .par_iter()
                .zip(ts)
                .map(|(x, t)| self.control(problem, *t, x))
                .collect(),
            PolicyHandle::Induced {
                value,
                solver,
                stencil,
            } => {
                let probes = stencil_points(xs, stencil);
                let pts = repeat_times(ts, 2 * stencil.dim());
                let vals = value.values(&pts, &probes)?;
                let grads = gradients_from_stencil_values(&vals, xs.len(), stencil);
                argmin_all(problem, ts, xs, &grads, *solver)
            }
        }
    }
}

fn repeat_times(ts: &[f64], k: usize) -> Vec<f64> {
    ts.iter().flat_map(|t| std::iter::repeat_n(*t, k)).collect()
}

fn argmin_all(
    problem: &ControlProblem,
    ts: &[f64],
    xs: &[Vec<f64>],
    grads: &[Vec<f64>],
    solver: ArgminConfig,
) -> Result<Vec<Vec<f64>>> {
    xs.par_iter()
        .zip(grads)
        .zip(ts)
        .map(|((x, p), t)| argmin_control(problem, *t, x, p, solver))
        .collect()
}

/// Controls of every policy at the same points, `[policy][point]`. When all
/// policies are induced by one operator network with a common stencil, the
/// trunk is evaluated once and shared.
pub fn evaluate_policies(
    policies: &[PolicyHandle],
    problem: &ControlProblem,
    ts: &[f64],
    xs: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if let Some((bounds, solvers, stencil)) = shared_operator(policies) {
        let probes = stencil_points(xs, &stencil);
        let pts = repeat_times(ts, 2 * stencil.dim());
        let trunk_out = trunk_batch(&bounds[0].network().trunk, &pts, &probes)?;
        return bounds
            .iter()
            .zip(solvers)
            .map(|(b, solver)| {
                let vals = b.combine(&trunk_out);
                let grads = gradients_from_stencil_values(&vals, xs.len(), &stencil);
                argmin_all(problem, ts, xs, &grads, solver)
            })
            .collect();
    }
    policies.iter().map(|p| p.controls(problem, ts, xs)).collect()
}

type SharedOperator<'a> = (Vec<&'a BoundOperator>, Vec<ArgminConfig>, StencilConfig);

fn shared_operator(policies: &[PolicyHandle]) -> Option<SharedOperator<'_>> {
    let mut bounds = Vec::with_capacity(policies.len());
    let mut solvers = Vec::with_capacity(policies.len());
    let mut common: Option<StencilConfig> = None;
    for p in policies {
        let PolicyHandle::Induced {
            value,
            solver,
            stencil,
        } = p
        else {
            return None;
        };
        let b = value.as_bound_operator()?;
        if let Some(first) = bounds.first() {
            let first: &&BoundOperator = first;
            if !Arc::ptr_eq(first.network(), b.network()) || common != Some(*stencil) {
                return None;
            }
        }
        common = Some(*stencil);
        bounds.push(b);
        solvers.push(*solver);
    }
    common.map(|s| (bounds, solvers, s))
}

/// Lazy policy induced by `∇ʰ` of `value`.
pub fn policy_update(value: Arc<dyn ValueField>, h: f64, solver: ArgminConfig) -> Result<PolicyHandle> {
    let stencil = StencilConfig::new(h, value.dim())?;
    Ok(PolicyHandle::Induced {
        value,
        solver,
        stencil,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationConfig {
    pub h: f64,
    /// Viscosity constant `N`.
    pub viscosity: f64,
    /// Number of policy-iteration rounds `M`.
    pub iterations: usize,
    /// Reject `N < max(1, ‖f‖∞/2)` instead of warning.
    pub strict_monotonicity: bool,
    pub argmin: ArgminConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            h: 0.005,
            viscosity: 1.0,
            iterations: 5,
            strict_monotonicity: true,
            argmin: ArgminConfig::Auto,
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

/// Checks `N ≥ max(1, ‖f‖∞/2)`.
pub fn check_viscosity(problem: &ControlProblem, n: f64, strict: bool) -> Result<()> {
    let required = (problem.f_sup_norm / 2.0).max(1.0);
    if n < required {
        if strict {
            return Err(Error::NViolatesMonotonicityBound { n, required });
        }
        log::warn!("viscosity N = {n} is below the monotonicity bound {required}; proceeding");
    }
    Ok(())
}

/// Result of one policy-iteration round.
#[derive(Debug, Clone)]
pub struct PolicyIterate {
    pub n: usize,
    /// Network after training against `uₙ`; its fields are `vₙʰ`.
    pub network: Arc<OperatorNetwork>,
    pub eps1: f64,
    pub eps2: f64,
    pub report: TrainingReport,
}

#[derive(Debug, Clone)]
pub struct IterationLedger {
    pub iterates: Vec<PolicyIterate>,
    pub final_operator: Arc<OperatorNetwork>,
    pub config: IterationConfig,
    pub training_set: Vec<TerminalCondition>,
    pub horizon: f64,
}

impl IterationLedger {
    pub fn eps1(&self) -> Vec<f64> {
        self.iterates.iter().map(|it| it.eps1).collect()
    }

    pub fn eps2(&self) -> Vec<f64> {
        self.iterates.iter().map(|it| it.eps2).collect()
    }

    /// Terminal condition on the operator's sensor layout.
    pub fn terminal(&self, func: TerminalFn) -> Result<TerminalCondition> {
        TerminalCondition::new(func, self.final_operator.sensors().clone())
    }

    /// Writes per-iteration checkpoints, training CSVs, `eps.csv`, the final
    /// operator and `manifest.json` into `dir`, which must not exist yet.
    /// Wall-clock columns are written only when `timing` is set.
    pub fn export(&self, dir: &Path, manifest: &serde_json::Value, timing: bool) -> Result<()> {
        io::create_fresh_dir(dir)?;
        let hash = io::config_hash(manifest)?;
        for it in &self.iterates {
            it.network.save(&dir.join(format!("iterate_{}.json", it.n)))?;
            io::write_training_csv(&dir.join(format!("training_{}.csv", it.n)), &it.report, &hash, timing)?;
        }
        let rows: Vec<Vec<String>> = self
            .iterates
            .iter()
            .map(|it| vec![it.n.to_string(), io::num(it.eps1), io::num(it.eps2)])
            .collect();
        io::write_csv(&dir.join("eps.csv"), &["n", "eps1", "eps2"], &rows, &hash)?;
        self.final_operator.save(&dir.join("final_operator.json"))?;
        let full = serde_json::json!({
            "manifest": manifest,
            "config": self.config,
            "config_hash": hash,
            "code_version": env!("CARGO_PKG_VERSION"),
            "training_set": self.training_set.iter().map(|g| g.func().to_string()).collect::<Vec<_>>(),
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&full)?)?;
        Ok(())
    }
}

/// Builds the terminal conditions for `funcs` on the network's sensors.
pub fn terminal_conditions(net: &OperatorNetwork, funcs: &[TerminalFn]) -> Result<Vec<TerminalCondition>> {
    funcs
        .iter()
        .map(|f| TerminalCondition::new(f.clone(), net.sensors().clone()))
        .collect()
}

/// Runs `M` rounds of (train against `uₙ`, update `uₙ₊₁`) from `u₀ ≡ 0`
/// with a freshly initialized network.
pub fn run_policy_iteration(
    problem: &ControlProblem,
    funcs: &[TerminalFn],
    cfg: &IterationConfig,
) -> Result<IterationLedger> {
    let net = OperatorNetwork::init(&cfg.network, &problem.domain)?;
    run_policy_iteration_from(problem, net, funcs, cfg, |_| {})
}

/// Like [`run_policy_iteration`] but starting from `net`; `on_iterate` is
/// called after every round.
pub fn run_policy_iteration_from(
    problem: &ControlProblem,
    net: OperatorNetwork,
    funcs: &[TerminalFn],
    cfg: &IterationConfig,
    mut on_iterate: impl FnMut(&PolicyIterate),
) -> Result<IterationLedger> {
    if funcs.is_empty() {
        return Err(Error::InvalidArgument("policy iteration needs at least one terminal function".into()));
    }
    check_viscosity(problem, cfg.viscosity, cfg.strict_monotonicity)?;
    let scheme = ViscousScheme::new(cfg.h, problem.state_dim, cfg.viscosity)?;
    let gs = terminal_conditions(&net, funcs)?;
    let mut net = net;
    let mut policies: Vec<PolicyHandle> = gs.iter().map(|_| PolicyHandle::zero(problem)).collect();
    let mut iterates = Vec::with_capacity(cfg.iterations);
    let mut frozen = Arc::new(net.clone());
    for n in 0..cfg.iterations {
        let mut opt = operator_adam(&net, cfg.training.adam());
        let train = TrainConfig {
            seed: sampling::derive_seed(cfg.training.seed, n as u64),
            ..cfg.training.clone()
        };
        let report = train_operator(&mut net, &gs, &policies, problem, &scheme, &mut opt, &train)?;
        log::info!(
            "iteration {n}: L1 = {:.3e}, L2 = {:.3e}, eps1 = {:.3e}, eps2 = {:.3e}",
            report.epochs.last().map_or(report.initial_l1, |e| e.l1),
            report.epochs.last().map_or(report.initial_l2, |e| e.l2),
            report.eps1_hat,
            report.eps2_hat
        );
        frozen = Arc::new(net.clone());
        let it = PolicyIterate {
            n,
            network: Arc::clone(&frozen),
            eps1: report.eps1_hat,
            eps2: report.eps2_hat,
            report,
        };
        on_iterate(&it);
        iterates.push(it);
        policies = gs
            .iter()
            .map(|g| {
                let bound: Arc<dyn ValueField> = Arc::new(frozen.bind(g)?);
                policy_update(bound, cfg.h, cfg.argmin)
            })
            .collect::<Result<_>>()?;
    }
    Ok(IterationLedger {
        iterates,
        final_operator: frozen,
        config: cfg.clone(),
        training_set: gs,
        horizon: problem.horizon,
    })
}

/// Value of the final operator for a new terminal condition. Performs no
/// optimizer steps.
pub fn infer_value(ledger: &IterationLedger, g_new: &TerminalCondition, t: f64, x: &[f64]) -> Result<f64> {
    operator_eval(&ledger.final_operator, g_new, t, x)
}

/// Forward-Euler closed-loop rollout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesizedTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub running_cost: f64,
    /// `None` when the terminal function is only known at its sensors.
    pub terminal_cost: Option<f64>,
    /// Set when the state left the inflated working box at some step.
    pub escaped_domain: bool,
}

/// Inflation factor of the working box beyond which a rollout is flagged.
pub const ROLLOUT_BOX_INFLATION: f64 = 1.5;

/// Rolls out `x_{k+1} = x_k + dt·f(t_k, x_k, u_k)` with
/// `u_k = argmin ∇ʰV(t_k, x_k)·f + L`, where `V` is any value field.
pub fn synthesize_with_field(
    problem: &ControlProblem,
    value: &dyn ValueField,
    terminal: Option<&TerminalCondition>,
    x0: &[f64],
    dt: f64,
    h: f64,
    solver: ArgminConfig,
) -> Result<SynthesizedTrajectory> {
    if x0.len() != problem.state_dim {
        return Err(Error::ShapeMismatch(format!(
            "initial state of length {} for d = {}",
            x0.len(),
            problem.state_dim
        )));
    }
    let steps = rollout_steps(problem.horizon, dt)?;
    let stencil = StencilConfig::new(h, problem.state_dim)?;
    let outer = problem.domain.inflated(ROLLOUT_BOX_INFLATION);
    let mut escaped = false;
    let mut x = x0.to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    let mut running = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        if !outer.contains(&x) {
            if !escaped {
                log::warn!("trajectory left the working box at t = {t}; evaluating at the clamped point");
            }
            escaped = true;
        }
        let xe = outer.clamp(&x);
        let p = try_nabla_h(|y| value.value(t, y), &xe, &stencil)?;
        let u = argmin_control(problem, t, &xe, &p, solver)?;
        let u = problem.control_set.project(&u);
        let f = problem.dynamics(t, &x, &u);
        running += problem.running_cost(t, &x, &u) * dt;
        times.push(t);
        states.push(x.clone());
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += dt * fi;
        }
        controls.push(u);
    }
    if !outer.contains(&x) {
        escaped = true;
    }
    times.push(problem.horizon);
    let terminal_cost = terminal.and_then(|g| g.eval(&x).ok());
    states.push(x);
    Ok(SynthesizedTrajectory {
        times,
        states,
        controls,
        running_cost: running,
        terminal_cost,
        escaped_domain: escaped,
    })
}

fn rollout_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt <= horizon) {
        return Err(Error::InvalidArgument(format!("rollout step {dt} not in (0, T]")));
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon {
        return Err(Error::InvalidArgument(format!("rollout step {dt} does not divide T = {horizon}")));
    }
    Ok(steps as usize)
}

/// Rollout driven by the final operator evaluated on `g_new`.
pub fn synthesize_trajectory(
    ledger: &IterationLedger,
    problem: &ControlProblem,
    g_new: &TerminalCondition,
    x0: &[f64],
    dt: f64,
) -> Result<SynthesizedTrajectory> {
    let bound = ledger.final_operator.bind(g_new)?;
    synthesize_with_field(problem, &bound, Some(g_new), x0, dt, ledger.config.h, ledger.config.argmin)
}

/// Cumulative error `ε(t)` from finite residual sequences:
///
/// ```text
/// ε(t) = (T − t)(ε₁,₀ + 2 Σ_{m=s}^{n−1} ε₁,ₘ + ε₁,ₙ) + (ε₂,₀ + 2 Σ_{m=s}^{n−1} ε₂,ₘ + ε₂,ₙ)
/// ```
///
/// with `s = 2`, or `s = 1` when `include_m1` is set. A single-element
/// sequence gives `(T − t)ε₁,₀ + ε₂,₀`.
pub fn epsilon_bound(eps1: &[f64], eps2: &[f64], t: f64, horizon: f64, include_m1: bool) -> Result<f64> {
    if eps1.is_empty() || eps2.is_empty() {
        return Err(Error::EmptySequence);
    }
    if eps1.len() != eps2.len() {
        return Err(Error::ShapeMismatch("residual sequences differ in length".into()));
    }
    if eps1.iter().chain(eps2).any(|e| !(*e >= 0.0)) {
        return Err(Error::InvalidArgument("residual sups must be nonnegative".into()));
    }
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, {horizon}]")));
    }
    let start = if include_m1 { 1 } else { 2 };
    let aggregate = |e: &[f64]| -> f64 {
        let n = e.len() - 1;
        if n == 0 {
            return e[0];
        }
        let inner: f64 = (start..n).map(|m| e[m]).sum();
        e[0] + 2.0 * inner + e[n]
    };
    Ok((horizon - t) * aggregate(eps1) + aggregate(eps2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityPair {
    pub n: usize,
    /// `max (vₙ₊₁ − vₙ)` over probes.
    pub max_increase: f64,
    pub slack: f64,
    /// Fraction of probes with `vₙ₊₁ > vₙ + slack + tol`.
    pub violation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub pairs: Vec<MonotonicityPair>,
}

impl MonotonicityReport {
    pub fn worst_violation_fraction(&self) -> f64 {
        self.pairs.iter().map(|p| p.violation_fraction).fold(0.0, f64::max)
    }
}

/// Checks `vₙ + τₙ ≥ vₙ₊₁` on probes for consecutive fields, with
/// `τₙ = 2(ε₂,ₙ + ε₂,ₙ₊₁) + 2T(ε₁,ₙ + ε₁,ₙ₊₁)`.
pub fn monotonicity_check_fields(
    fields: &[&dyn ValueField],
    eps1: &[f64],
    eps2: &[f64],
    horizon: f64,
    ts: &[f64],
    xs: &[Vec<f64>],
    tol: f64,
) -> Result<MonotonicityReport> {
    if fields.len() < 2 {
        return Err(Error::InvalidArgument("monotonicity check needs at least two iterates".into()));
    }
    if eps1.len() != fields.len() || eps2.len() != fields.len() {
        return Err(Error::ShapeMismatch("one residual pair per iterate is required".into()));
    }
    let values: Vec<Vec<f64>> = fields.iter().map(|f| f.values(ts, xs)).collect::<Result<_>>()?;
    let pairs = (0..fields.len() - 1)
        .map(|n| {
            let slack = 2.0 * (eps2[n] + eps2[n + 1]) + 2.0 * horizon * (eps1[n] + eps1[n + 1]);
            let mut max_increase = f64::NEG_INFINITY;
            let mut bad = 0usize;
            for (a, b) in values[n].iter().zip(&values[n + 1]) {
                max_increase = max_increase.max(b - a);
                if *b > a + slack + tol {
                    bad += 1;
                }
            }
            MonotonicityPair {
                n,
                max_increase,
                slack,
                violation_fraction: if ts.is_empty() { 0.0 } else { bad as f64 / ts.len() as f64 },
            }
        })
        .collect();
    Ok(MonotonicityReport { pairs })
}

/// [`monotonicity_check_fields`] over every training terminal condition of
/// a ledger; the fraction counts all `(probe, g)` pairs.
pub fn monotonicity_check(ledger: &IterationLedger, ts: &[f64], xs: &[Vec<f64>]) -> Result<MonotonicityReport> {
    if ledger.iterates.len() < 2 {
        return Err(Error::InvalidArgument("monotonicity check needs at least two iterates".into()));
    }
    let horizon = ledger.horizon;
    let eps1 = ledger.eps1();
    let eps2 = ledger.eps2();
    let mut total: Option<MonotonicityReport> = None;
    let k = ledger.training_set.len() as f64;
    for g in &ledger.training_set {
        let bound: Vec<BoundOperator> = ledger
            .iterates
            .iter()
            .map(|it| it.network.bind(g))
            .collect::<Result<_>>()?;
        let fields: Vec<&dyn ValueField> = bound.iter().map(|b| b as &dyn ValueField).collect();
        let rep = monotonicity_check_fields(&fields, &eps1, &eps2, horizon, ts, xs, 0.0)?;
        total = Some(match total {
            None => MonotonicityReport {
                pairs: rep
                    .pairs
                    .into_iter()
                    .map(|p| MonotonicityPair {
                        violation_fraction: p.violation_fraction / k,
                        ..p
                    })
                    .collect(),
            },
            Some(mut acc) => {
                for (a, p) in acc.pairs.iter_mut().zip(rep.pairs) {
                    a.max_increase = a.max_increase.max(p.max_increase);
                    a.violation_fraction += p.violation_fraction / k;
                }
                acc
            }
        });
    }
    Ok(total.expect("training set is non-empty"))
}
