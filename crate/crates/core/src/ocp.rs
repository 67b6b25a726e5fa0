//! Optimal control problems, Hamiltonians and pointwise control minimizers.
//!
//! A [`ControlProblem`] bundles dynamics `f(t,x,u)`, running cost `L(t,x,u)`,
//! a compact control set `U` and a horizon `T`. The Hamiltonian is
//! `H(t,x,p) = inf_{u∈U} { p·f(t,x,u) + L(t,x,u) }` and the feedback law used
//! throughout the crate is its minimizer evaluated at a discrete gradient.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{self, StateBox};

pub type DynamicsFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type CostFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Gradient norm below which the steering law falls back to a fixed angle.
pub const STEERING_GRAD_TOL: f64 = 1e-10;
/// Angle returned for degenerate steering gradients.
pub const STEERING_FALLBACK: f64 = 0.0;

/// Number of Sobol samples used to estimate `‖f‖∞` when it is not given.
pub const F_SUP_SAMPLES: usize = 100_000;
/// Multiplier applied to the sampled `‖f‖∞`.
pub const F_SUP_SAFETY: f64 = 1.1;
const F_SUP_CHECK_SAMPLES: usize = 1_000;

/// Compact control set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSet {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Interval { lo: f64, hi: f64 },
    /// Steering angles `[−π, π]`, with `−π` and `π` identified.
    AngleSet,
}

impl ControlSet {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        ControlSet::Box {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lo, .. } => lo.len(),
            ControlSet::Interval { .. } | ControlSet::AngleSet => 1,
        }
    }

    pub fn lower(&self) -> Vec<f64> {
        match self {
            ControlSet::Box { lo, .. } => lo.clone(),
            ControlSet::Interval { lo, .. } => vec![*lo],
            ControlSet::AngleSet => vec![-PI],
        }
    }

    pub fn upper(&self) -> Vec<f64> {
        match self {
            ControlSet::Box { hi, .. } => hi.clone(),
            ControlSet::Interval { hi, .. } => vec![*hi],
            ControlSet::AngleSet => vec![PI],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lower(), self.upper());
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidProblem("control bounds have mismatched lengths".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidProblem(
                "control set needs finite lo <= hi componentwise".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower().iter().zip(self.upper()))
                .all(|(v, (a, b))| *a <= *v && *v <= b)
    }

    /// Nearest point of the set: componentwise clamp for boxes, wraparound
    /// reduction into `[−π, π]` for angles.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlSet::AngleSet => vec![wrap_angle(u[0])],
            _ => u
                .iter()
                .zip(self.lower().iter().zip(self.upper()))
                .map(|(v, (a, b))| v.clamp(*a, b))
                .collect(),
        }
    }

    pub fn as_box(&self) -> StateBox {
        StateBox {
            lo: self.lower(),
            hi: self.upper(),
        }
    }
}

/// Reduces an angle into `[−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        return a;
    }
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    r.clamp(-PI, PI)
}

/// Matrices of a linear–quadratic problem `f = Ax + Bu`, `L = xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrData {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub q: Array2<f64>,
    pub r: Array2<f64>,
}

/// Known structure that unlocks closed-form minimizers and exact Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemStructure {
    /// Unit-speed steering `f = (cos u, sin u)`, `L ≡ 0`.
    Vehicle,
    Lqr(LqrData),
    General,
}

/// Dynamics, running cost, control set and horizon of a finite-horizon
/// optimal control problem.
#[derive(Clone)]
pub struct ControlProblem {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub control_set: ControlSet,
    /// Working domain for sampling, sup-norm estimates and plotting.
    pub domain: StateBox,
    /// Upper bound of `‖f(t,x,u)‖₂` over `[0,T] × domain × U`.
    pub f_sup_norm: f64,
    pub structure: ProblemStructure,
    dynamics: DynamicsFn,
    running_cost: CostFn,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("control_set", &self.control_set)
            .field("f_sup_norm", &self.f_sup_norm)
            .finish_non_exhaustive()
    }
}

/// Partial derivatives of `f` and `L` at a point.
#[derive(Debug, Clone)]
pub struct Jacobians {
    /// `∂f/∂x`, `d × d`.
    pub fx: Array2<f64>,
    /// `∂f/∂u`, `d × m`.
    pub fu: Array2<f64>,
    pub lx: Array1<f64>,
    pub lu: Array1<f64>,
}

impl ControlProblem {
    /// Builds a problem and checks its invariants. When `f_sup_norm` is
    /// `None` it is estimated from Sobol samples of `[0,T] × domain × U`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        horizon: f64,
        control_set: ControlSet,
        domain: StateBox,
        dynamics: DynamicsFn,
        running_cost: CostFn,
        f_sup_norm: Option<f64>,
        structure: ProblemStructure,
    ) -> Result<Self> {
        control_set.validate()?;
        if state_dim == 0 || domain.dim() != state_dim {
            return Err(Error::InvalidProblem(format!(
                "state dimension {state_dim} does not match domain dimension {}",
                domain.dim()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidProblem(format!("horizon must be positive, got {horizon}")));
        }
        let mut problem = Self {
            name: name.into(),
            state_dim,
            control_dim: control_set.dim(),
            horizon,
            control_set,
            domain,
            f_sup_norm: f64::NAN,
            structure,
            dynamics,
            running_cost,
        };
        problem.f_sup_norm = match f_sup_norm {
            Some(v) => v,
            None => problem.estimate_f_sup_norm(F_SUP_SAMPLES) * F_SUP_SAFETY,
        };
        problem.check_f_sup_norm()?;
        Ok(problem)
    }

    /// `f = Ax + Bu`, `L = xᵀQx + uᵀRu`.
    pub fn lqr(
        name: impl Into<String>,
        data: LqrData,
        control_set: ControlSet,
        horizon: f64,
        domain: StateBox,
    ) -> Result<Self> {
        let d = data.a.nrows();
        let m = data.b.ncols();
        if data.a.ncols() != d
            || data.b.nrows() != d
            || data.q.dim() != (d, d)
            || data.r.dim() != (m, m)
            || control_set.dim() != m
        {
            return Err(Error::ShapeMismatch(format!(
                "LQR shapes A {:?}, B {:?}, Q {:?}, R {:?}, U dim {}",
                data.a.dim(),
                data.b.dim(),
                data.q.dim(),
                data.r.dim(),
                control_set.dim()
            )));
        }
        let (a, b, q, r) = (data.a.clone(), data.b.clone(), data.q.clone(), data.r.clone());
        let dynamics: DynamicsFn = Arc::new(move |_t, x, u, out| {
            for i in 0..out.len() {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    acc += a[[i, j]] * x[j];
                }
                for j in 0..u.len() {
                    acc += b[[i, j]] * u[j];
                }
                out[i] = acc;
            }
        });
        let cost: CostFn = Arc::new(move |_t, x, u| quad_form(&q, x) + quad_form(&r, u));
        Self::new(
            name,
            d,
            horizon,
            control_set,
            domain,
            dynamics,
            cost,
            None,
            ProblemStructure::Lqr(data),
        )
    }

    /// Unit-speed vehicle `ẋ = (cos u, sin u)`, `u ∈ [−π, π]`, no running cost.
    pub fn vehicle(horizon: f64, domain: StateBox) -> Result<Self> {
        let dynamics: DynamicsFn = Arc::new(|_t, _x, u, out| {
            let (s, c) = u[0].sin_cos();
            out[0] = c;
            out[1] = s;
        });
        let cost: CostFn = Arc::new(|_t, _x, _u| 0.0);
        Self::new(
            "vehicle2d",
            2,
            horizon,
            ControlSet::AngleSet,
            domain,
            dynamics,
            cost,
            Some(1.0),
            ProblemStructure::Vehicle,
        )
    }

    pub fn dynamics_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.dynamics)(t, x, u, out)
    }

    pub fn dynamics(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.dynamics_into(t, x, u, &mut out);
        out
    }

    pub fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.running_cost)(t, x, u)
    }

    /// `p·f(t,x,u) + L(t,x,u)`.
    pub fn hamiltonian_objective(&self, t: f64, x: &[f64], p: &[f64], u: &[f64]) -> f64 {
        let f = self.dynamics(t, x, u);
        dot(p, &f) + self.running_cost(t, x, u)
    }

    fn estimate_f_sup_norm(&self, samples: usize) -> f64 {
        let d = self.state_dim;
        let m = self.control_dim;
        let ubox = self.control_set.as_box();
        let mut out = vec![0.0; d];
        let mut best: f64 = 0.0;
        for s in sampling::sobol_unit(samples, 1 + d + m, 0, 0x5eed) {
            let t = s[0] * self.horizon;
            let x = self.domain.from_unit(&s[1..1 + d]);
            let u = ubox.from_unit(&s[1 + d..]);
            self.dynamics_into(t, &x, &u, &mut out);
            best = best.max(norm(&out));
        }
        best
    }

    fn check_f_sup_norm(&self) -> Result<()> {
        if !(self.f_sup_norm >= 0.0 && self.f_sup_norm.is_finite()) {
            return Err(Error::InvalidProblem(format!(
                "invalid sup-norm bound {}",
                self.f_sup_norm
            )));
        }
        let mut rng = sampling::rng(0xf5u64);
        let ubox = self.control_set.as_box();
        let mut out = vec![0.0; self.state_dim];
        for _ in 0..F_SUP_CHECK_SAMPLES {
            let t = rng.random_range(0.0..=self.horizon);
            let x = sampling::uniform_in_box(&self.domain, &mut rng);
            let u = sampling::uniform_in_box(&ubox, &mut rng);
            self.dynamics_into(t, &x, &u, &mut out);
            let n = norm(&out);
            if !n.is_finite() || n > self.f_sup_norm * (1.0 + 1e-12) {
                return Err(Error::InvalidProblem(format!(
                    "sampled |f| = {n} exceeds the declared sup-norm {}",
                    self.f_sup_norm
                )));
            }
        }
        Ok(())
    }

    /// Jacobians of `f` and `L`; exact for known structures, central
    /// differences otherwise.
    pub fn jacobians(&self, t: f64, x: &[f64], u: &[f64]) -> Jacobians {
        let d = self.state_dim;
        let m = self.control_dim;
        match &self.structure {
            ProblemStructure::Vehicle => {
                let mut fu = Array2::zeros((2, 1));
                fu[[0, 0]] = -u[0].sin();
                fu[[1, 0]] = u[0].cos();
                Jacobians {
                    fx: Array2::zeros((2, 2)),
                    fu,
                    lx: Array1::zeros(2),
                    lu: Array1::zeros(1),
                }
            }
            ProblemStructure::Lqr(data) => {
                let xv = Array1::from(x.to_vec());
                let uv = Array1::from(u.to_vec());
                Jacobians {
                    fx: data.a.clone(),
                    fu: data.b.clone(),
                    lx: data.q.dot(&xv) + data.q.t().dot(&xv),
                    lu: data.r.dot(&uv) + data.r.t().dot(&uv),
                }
            }
            ProblemStructure::General => {
                let delta = 1e-6;
                let mut fx = Array2::zeros((d, d));
                let mut fu = Array2::zeros((d, m));
                let mut lx = Array1::zeros(d);
                let mut lu = Array1::zeros(m);
                let mut xp = x.to_vec();
                for j in 0..d {
                    xp[j] = x[j] + delta;
                    let fp = self.dynamics(t, &xp, u);
                    let lp = self.running_cost(t, &xp, u);
                    xp[j] = x[j] - delta;
                    let fm = self.dynamics(t, &xp, u);
                    let lm = self.running_cost(t, &xp, u);
                    xp[j] = x[j];
                    for i in 0..d {
                        fx[[i, j]] = (fp[i] - fm[i]) / (2.0 * delta);
                    }
                    lx[j] = (lp - lm) / (2.0 * delta);
                }
                let mut up = u.to_vec();
                for j in 0..m {
                    up[j] = u[j] + delta;
                    let fp = self.dynamics(t, x, &up);
                    let lp = self.running_cost(t, x, &up);
                    up[j] = u[j] - delta;
                    let fm = self.dynamics(t, x, &up);
                    let lm = self.running_cost(t, x, &up);
                    up[j] = u[j];
                    for i in 0..d {
                        fu[[i, j]] = (fp[i] - fm[i]) / (2.0 * delta);
                    }
                    lu[j] = (lp - lm) / (2.0 * delta);
                }
                Jacobians { fx, fu, lx, lu }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn quad_form(m: &Array2<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        let mut row = 0.0;
        for j in 0..v.len() {
            row += m[[i, j]] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// How the pointwise minimizer over `U` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgminConfig {
    /// Closed form when the problem structure has one, grid scan otherwise.
    #[default]
    Auto,
    ClosedForm,
    /// Exhaustive scan over a uniform grid of `U`; ties go to the
    /// lexicographically smallest control.
    GridScan { points_per_dim: Option<usize> },
}

/// Default grid-scan resolution per control dimension.
pub fn default_scan_resolution(control_dim: usize) -> usize {
    if control_dim <= 2 {
        512
    } else {
        64
    }
}

/// Pointwise minimizer `argmin_{u∈U} p·f(t,x,u) + L(t,x,u)`.
pub fn argmin_control(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    p: &[f64],
    solver: ArgminConfig,
) -> Result<Vec<f64>> {
    if x.len() != problem.state_dim || p.len() != problem.state_dim {
        return Err(Error::ShapeMismatch(format!(
            "state/costate of length {}/{} for a {}-dimensional problem",
            x.len(),
            p.len(),
            problem.state_dim
        )));
    }
    match solver {
        ArgminConfig::ClosedForm => closed_form(problem, p),
        ArgminConfig::Auto => match closed_form(problem, p) {
            Err(Error::NoMinimizer(_)) => grid_scan_argmin(problem, t, x, p, None),
            other => other,
        },
        ArgminConfig::GridScan { points_per_dim } => {
            grid_scan_argmin(problem, t, x, p, points_per_dim)
        }
    }
}

/// `H(t,x,p) = inf_{u∈U} { p·f(t,x,u) + L(t,x,u) }`.
pub fn hamiltonian(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    p: &[f64],
    solver: ArgminConfig,
) -> Result<f64> {
    let u = argmin_control(problem, t, x, p, solver)?;
    Ok(problem.hamiltonian_objective(t, x, p, &u))
}

fn closed_form(problem: &ControlProblem, p: &[f64]) -> Result<Vec<f64>> {
    match &problem.structure {
        ProblemStructure::Vehicle => {
            let angle = match vehicle_steering_law(p) {
                Ok(a) => a,
                Err(Error::DegenerateGradient { fallback, .. }) => fallback,
                Err(e) => return Err(e),
            };
            Ok(vec![angle])
        }
        ProblemStructure::Lqr(data) => {
            if !matches!(problem.control_set, ControlSet::Box { .. } | ControlSet::Interval { .. }) {
                return Err(Error::NoMinimizer("closed-form LQR argmin needs a box".into()));
            }
            match lqr_closed_form_argmin(&data.b, &data.r, p, &problem.control_set) {
                Err(Error::NonDiagonalR) => Err(Error::NoMinimizer(
                    "closed form requested for a non-diagonal R".into(),
                )),
                other => other,
            }
        }
        ProblemStructure::General => Err(Error::NoMinimizer(format!(
            "problem `{}` has no closed-form minimizer",
            problem.name
        ))),
    }
}

/// Exhaustive scan over `res^m` uniformly spaced controls. Iteration is in
/// lexicographic order and only strict improvements replace the incumbent.
pub fn grid_scan_argmin(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    p: &[f64],
    points_per_dim: Option<usize>,
) -> Result<Vec<f64>> {
    let m = problem.control_dim;
    let res = points_per_dim.unwrap_or_else(|| default_scan_resolution(m));
    if res == 0 {
        return Err(Error::InvalidArgument("grid scan needs at least one point".into()));
    }
    let lo = problem.control_set.lower();
    let hi = problem.control_set.upper();
    let coord = |i: usize, k: usize| -> f64 {
        if res == 1 || k == 0 {
            lo[i]
        } else if k == res - 1 {
            hi[i]
        } else {
            lo[i] + (hi[i] - lo[i]) * (k as f64) / ((res - 1) as f64)
        }
    };
    let mut idx = vec![0usize; m];
    let mut u: Vec<f64> = (0..m).map(|i| coord(i, 0)).collect();
    let mut f = vec![0.0; problem.state_dim];
    let mut best_u = u.clone();
    let mut best = f64::INFINITY;
    loop {
        problem.dynamics_into(t, x, &u, &mut f);
        let val = dot(p, &f) + problem.running_cost(t, x, &u);
        if val < best {
            best = val;
            best_u.copy_from_slice(&u);
        }
        // odometer, last coordinate fastest
        let mut i = m;
        loop {
            if i == 0 {
                if best.is_finite() {
                    return Ok(best_u);
                }
                return Err(Error::NoMinimizer("objective not finite on U".into()));
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < res {
                u[i] = coord(i, idx[i]);
                break;
            }
            idx[i] = 0;
            u[i] = coord(i, 0);
        }
    }
}

/// Minimizer of `p·Bu + uᵀRu` over a box for diagonal `R`: the unconstrained
/// minimizer `−R⁻¹Bᵀp/2` clamped componentwise.
pub fn lqr_closed_form_argmin(
    b: &Array2<f64>,
    r: &Array2<f64>,
    p: &[f64],
    bounds: &ControlSet,
) -> Result<Vec<f64>> {
    let m = b.ncols();
    if r.dim() != (m, m) || b.nrows() != p.len() || bounds.dim() != m {
        return Err(Error::ShapeMismatch(format!(
            "B {:?}, R {:?}, p {}, U dim {}",
            b.dim(),
            r.dim(),
            p.len(),
            bounds.dim()
        )));
    }
    for i in 0..m {
        for j in 0..m {
            if i != j && r[[i, j]] != 0.0 {
                return Err(Error::NonDiagonalR);
            }
        }
        if !(r[[i, i]] > 0.0) {
            return Err(Error::InvalidArgument("R must have a positive diagonal".into()));
        }
    }
    let (lo, hi) = match bounds {
        ControlSet::Box { lo, hi } => (lo.clone(), hi.clone()),
        ControlSet::Interval { lo, hi } => (vec![*lo], vec![*hi]),
        ControlSet::AngleSet => {
            return Err(Error::InvalidArgument("closed-form LQR argmin needs a box".into()))
        }
    };
    Ok((0..m)
        .map(|i| {
            let btp: f64 = (0..p.len()).map(|k| b[[k, i]] * p[k]).sum();
            (-btp / (2.0 * r[[i, i]])).clamp(lo[i], hi[i])
        })
        .collect())
}

/// Steering angle minimizing `cos(u)·g₁ + sin(u)·g₂`.
///
/// Follows the shifted-arctangent case table `p − π` (g₁>0, g₂>0),
/// `p + π` (g₁>0, g₂<0), `p` otherwise with `p = arctan(g₂/g₁)`, and
/// resolves the axis cases (g₁ = 0 or g₂ = 0) to the true minimizer,
/// i.e. the direction of `−g`. The result lies in `[−π, π]`.
pub fn vehicle_steering_law(grad: &[f64]) -> Result<f64> {
    if grad.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "steering law needs a 2-vector, got {}",
            grad.len()
        )));
    }
    let (g1, g2) = (grad[0], grad[1]);
    let n = g1.hypot(g2);
    if !(n >= STEERING_GRAD_TOL) {
        return Err(Error::DegenerateGradient {
            norm: n,
            fallback: STEERING_FALLBACK,
        });
    }
    let angle = if g1 > 0.0 {
        let p = (g2 / g1).atan();
        if g2 > 0.0 {
            p - PI
        } else if g2 < 0.0 {
            p + PI
        } else {
            -PI
        }
    } else if g1 < 0.0 {
        (g2 / g1).atan()
    } else if g2 > 0.0 {
        -FRAC_PI_2
    } else {
        FRAC_PI_2
    };
    Ok(angle)
}

/// Terminal cost `g`.
#[derive(Clone)]
pub enum TerminalFn {
    /// `offset + linear·‖x‖₂ + quadratic·‖x‖₂²`.
    Radial {
        offset: f64,
        linear: f64,
        quadratic: f64,
    },
    Custom {
        label: String,
        eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    },
    /// Known only through its sensor samples.
    Sampled,
}

impl fmt::Debug for TerminalFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TerminalFn({self})")
    }
}

impl fmt::Display for TerminalFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalFn::Radial {
                offset,
                linear,
                quadratic,
            } => {
                let mut terms = Vec::new();
                if *offset != 0.0 {
                    terms.push(format!("{offset}"));
                }
                let scaled = |c: f64, atom: &str| if c == 1.0 { atom.to_string() } else { format!("{c}*{atom}") };
                if *linear != 0.0 {
                    terms.push(scaled(*linear, "|x|"));
                }
                if *quadratic != 0.0 {
                    terms.push(scaled(*quadratic, "|x|^2"));
                }
                if terms.is_empty() {
                    terms.push("0".into());
                }
                write!(f, "{}", terms.join(" + "))
            }
            TerminalFn::Custom { label, .. } => write!(f, "{label}"),
            TerminalFn::Sampled => write!(f, "<sampled>"),
        }
    }
}

impl TerminalFn {
    pub fn constant(c: f64) -> Self {
        TerminalFn::Radial {
            offset: c,
            linear: 0.0,
            quadratic: 0.0,
        }
    }

    /// `offset + scale·‖x‖₂²`.
    pub fn quadratic(offset: f64, scale: f64) -> Self {
        TerminalFn::Radial {
            offset,
            linear: 0.0,
            quadratic: scale,
        }
    }

    /// `‖x‖₂`.
    pub fn norm() -> Self {
        TerminalFn::Radial {
            offset: 0.0,
            linear: 1.0,
            quadratic: 0.0,
        }
    }

    /// Parses sums of terms like `0.3 + 0.1*|x|^2`, `|x|`, `0.57*|x|^2`, `1.5`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("malformed g spec `{spec}`: {why}"));
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(bad("empty"));
        }
        // split on '+' and on '-' that start a new term
        let mut terms = Vec::new();
        let mut cur = String::new();
        let chars: Vec<char> = compact.chars().collect();
        for (i, &c) in chars.iter().enumerate() {
            let starts_term = (c == '+' || c == '-')
                && i > 0
                && !matches!(chars[i - 1], 'e' | 'E' | '*' | '+' | '-');
            if starts_term {
                terms.push(std::mem::take(&mut cur));
                if c == '-' {
                    cur.push('-');
                }
            } else {
                cur.push(c);
            }
        }
        terms.push(cur);
        let (mut offset, mut linear, mut quadratic) = (0.0, 0.0, 0.0);
        for term in terms {
            if term.is_empty() {
                return Err(bad("empty term"));
            }
            let (coef, atom) = match term.find("|x|") {
                None => (term.as_str(), ""),
                Some(pos) => (&term[..pos], &term[pos..]),
            };
            let coef = coef.strip_suffix('*').unwrap_or(coef);
            let c = match coef {
                "" | "+" => 1.0,
                "-" => -1.0,
                s => s.parse::<f64>().map_err(|_| bad("bad coefficient"))?,
            };
            match atom {
                "" => offset += c,
                "|x|" => linear += c,
                "|x|^2" | "|x|**2" => quadratic += c,
                _ => return Err(bad("unknown term")),
            }
        }
        Ok(TerminalFn::Radial {
            offset,
            linear,
            quadratic,
        })
    }

    fn eval_analytic(&self, x: &[f64]) -> Option<f64> {
        match self {
            TerminalFn::Radial {
                offset,
                linear,
                quadratic,
            } => {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                let mut v = *offset;
                if *linear != 0.0 {
                    v += linear * sq.sqrt();
                }
                if *quadratic != 0.0 {
                    v += quadratic * sq;
                }
                Some(v)
            }
            TerminalFn::Custom { eval, .. } => Some(eval(x)),
            TerminalFn::Sampled => None,
        }
    }
}

/// Fixed sensor locations shared by terminal conditions and the branch
/// network. Equality is by value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    points: Arc<Vec<Vec<f64>>>,
}

impl SensorLayout {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let d = points.first().map(Vec::len).unwrap_or(0);
        if points.is_empty() || d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::ShapeMismatch("sensor points must be non-empty and equal-length".into()));
        }
        Ok(Self {
            points: Arc::new(points),
        })
    }

    /// `k` scrambled Sobol points over `bx`.
    pub fn sobol(bx: &StateBox, k: usize, seed: u32) -> Result<Self> {
        Self::new(sampling::sobol_in_box(bx, k, seed))
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Terminal function together with its samples at the sensor layout.
#[derive(Debug, Clone)]
pub struct TerminalCondition {
    func: TerminalFn,
    sensors: SensorLayout,
    values: Vec<f64>,
}

impl TerminalCondition {
    pub fn new(func: TerminalFn, sensors: SensorLayout) -> Result<Self> {
        if matches!(func, TerminalFn::Sampled) {
            return Err(Error::InvalidArgument(
                "sampled terminal conditions are built with from_sensor_values".into(),
            ));
        }
        let values = sensors
            .points()
            .iter()
            .map(|p| func.eval_analytic(p).expect("analytic terminal function"))
            .collect();
        Ok(Self {
            func,
            sensors,
            values,
        })
    }

    /// A terminal condition known only at the sensor points.
    pub fn from_sensor_values(values: Vec<f64>, sensors: SensorLayout) -> Result<Self> {
        if values.len() != sensors.len() {
            return Err(Error::SensorMismatch);
        }
        Ok(Self {
            func: TerminalFn::Sampled,
            sensors,
            values,
        })
    }

    pub fn func(&self) -> &TerminalFn {
        &self.func
    }

    pub fn sensors(&self) -> &SensorLayout {
        &self.sensors
    }

    pub fn sensor_values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if let Some(v) = self.func.eval_analytic(x) {
            return Ok(v);
        }
        self.sensors
            .points()
            .iter()
            .position(|p| p.as_slice() == x)
            .map(|j| self.values[j])
            .ok_or_else(|| {
                Error::InvalidArgument(
                    "terminal function is only known at its sensor points".into(),
                )
            })
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.func {
            TerminalFn::Radial {
                linear, quadratic, ..
            } => {
                let n = norm(x);
                Ok(x.iter()
                    .map(|v| {
                        let lin = if n > 0.0 { linear * v / n } else { 0.0 };
                        lin + 2.0 * quadratic * v
                    })
                    .collect())
            }
            TerminalFn::Custom { eval, .. } => {
                let delta = 1e-6;
                let mut xp = x.to_vec();
                Ok((0..x.len())
                    .map(|i| {
                        xp[i] = x[i] + delta;
                        let fp = eval(&xp);
                        xp[i] = x[i] - delta;
                        let fm = eval(&xp);
                        xp[i] = x[i];
                        (fp - fm) / (2.0 * delta)
                    })
                    .collect())
            }
            TerminalFn::Sampled => Err(Error::InvalidArgument(
                "sampled terminal functions have no gradient".into(),
            )),
        }
    }

    /// Re-evaluates the function at every sensor and compares bitwise.
    pub fn is_consistent(&self) -> bool {
        self.sensors
            .points()
            .iter()
            .zip(&self.values)
            .all(|(p, v)| match self.eval(p) {
                Ok(e) => e.to_bits() == v.to_bits(),
                Err(_) => false,
            })
    }
}
