//! Operator network `𝒢_θ[g](t, x) = Σᵢ Bᵢ(g(s₁..s_k)) Tᵢ(t, x)` and its
//! physics-informed training.
//!
//! The branch net sees only the sensor values of `g`. The current policy
//! enters through the residual loss, so the network is retrained (warm
//! started) at every policy-iteration step.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ValueField;
use crate::nn::{AdamConfig, AdamState};
use crate::nn::MlpCheckpoint;
use crate::nn::{Activation, Mlp, ParamGrad};
use crate::ocp::{ControlProblem, SensorLayout, TerminalCondition};
use crate::policy::{evaluate_policies, PolicyHandle};
use crate::sampling::{self, StateBox};
use crate::stencil::{stencil_points, ViscousScheme};

pub const OPERATOR_FORMAT_VERSION: u32 = 1;

/// Rows per parallel work item in loss evaluation. Fixed so that the
/// reduction order does not depend on the thread count.
const CHUNK_ROWS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of sensor points `k`.
    pub sensors: usize,
    /// Latent width `p`.
    pub latent: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Feed the branch `g(sᵢ) − mean(g(s))` and add the mean back to the
    /// output, so that `𝒢[g + c] = 𝒢[g] + c` holds exactly.
    pub shift_equivariant: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            sensors: 100,
            latent: 64,
            branch_hidden: vec![64, 64],
            trunk_hidden: vec![64, 64],
            activation: Activation::Tanh,
            seed: 0,
            shift_equivariant: false,
        }
    }
}

/// Branch and trunk nets sharing latent width `p`, with the sensor layout
/// fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorNetwork {
    pub branch: Mlp,
    pub trunk: Mlp,
    latent: usize,
    sensors: SensorLayout,
    shift_equivariant: bool,
}

impl OperatorNetwork {
    pub fn new(branch: Mlp, trunk: Mlp, sensors: SensorLayout, shift_equivariant: bool) -> Result<Self> {
        let p = branch.output_dim();
        if trunk.output_dim() != p {
            return Err(Error::ShapeMismatch(format!(
                "branch outputs {p} features but trunk outputs {}",
                trunk.output_dim()
            )));
        }
        if branch.input_dim() != sensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "branch takes {} inputs for {} sensors",
                branch.input_dim(),
                sensors.len()
            )));
        }
        if trunk.input_dim() != sensors.dim() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "trunk takes {} inputs for (t, x) with d = {}",
                trunk.input_dim(),
                sensors.dim()
            )));
        }
        Ok(Self {
            branch,
            trunk,
            latent: p,
            sensors,
            shift_equivariant,
        })
    }

    /// Fresh network with Sobol sensors over `domain`.
    pub fn init(cfg: &NetworkConfig, domain: &StateBox) -> Result<Self> {
        if cfg.sensors == 0 || cfg.latent == 0 {
            return Err(Error::InvalidArgument("sensor count and latent width must be positive".into()));
        }
        let sensor_seed = sampling::derive_seed(cfg.seed, 1) as u32;
        let sensors = SensorLayout::sobol(domain, cfg.sensors, sensor_seed)?;
        let mut bw = vec![cfg.sensors];
        bw.extend(&cfg.branch_hidden);
        bw.push(cfg.latent);
        let mut tw = vec![domain.dim() + 1];
        tw.extend(&cfg.trunk_hidden);
        tw.push(cfg.latent);
        let branch = Mlp::init(&bw, cfg.activation, sampling::derive_seed(cfg.seed, 2))?;
        let trunk = Mlp::init(&tw, cfg.activation, sampling::derive_seed(cfg.seed, 3))?;
        Self::new(branch, trunk, sensors, cfg.shift_equivariant)
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn sensors(&self) -> &SensorLayout {
        &self.sensors
    }

    pub fn state_dim(&self) -> usize {
        self.sensors.dim()
    }

    pub fn shift_equivariant(&self) -> bool {
        self.shift_equivariant
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count()
    }

    pub fn check_sensors(&self, g: &TerminalCondition) -> Result<()> {
        if g.sensors() != &self.sensors {
            return Err(Error::SensorMismatch);
        }
        Ok(())
    }

    /// Branch input and output shift for one terminal condition.
    fn branch_input(&self, g: &TerminalCondition) -> (Vec<f64>, f64) {
        let s = g.sensor_values();
        if self.shift_equivariant {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            (s.iter().map(|v| v - mean).collect(), mean)
        } else {
            (s.to_vec(), 0.0)
        }
    }

    /// Branch coefficients (`K × p`) and shifts for a batch of terminal
    /// conditions.
    pub fn branch_coefficients(&self, gs: &[&TerminalCondition]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (input, shifts) = self.branch_batch(gs)?;
        Ok((self.branch.forward_batch(&input)?, shifts))
    }

    fn branch_batch(&self, gs: &[&TerminalCondition]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut input = Vec::with_capacity(gs.len() * self.sensors.len());
        let mut shifts = Vec::with_capacity(gs.len());
        for g in gs {
            self.check_sensors(g)?;
            let (v, s) = self.branch_input(g);
            input.extend(v);
            shifts.push(s);
        }
        Ok((input, shifts))
    }

    /// The network specialized to one terminal condition.
    pub fn bind(self: &Arc<Self>, g: &TerminalCondition) -> Result<BoundOperator> {
        let (coeffs, shifts) = self.branch_coefficients(&[g])?;
        Ok(BoundOperator {
            net: Arc::clone(self),
            coeffs,
            shift: shifts[0],
        })
    }

    pub fn to_checkpoint(&self) -> OperatorCheckpoint {
        OperatorCheckpoint {
            format_version: OPERATOR_FORMAT_VERSION,
            latent: self.latent,
            shift_equivariant: self.shift_equivariant,
            sensors: self.sensors.points().to_vec(),
            branch: MlpCheckpoint::from(&self.branch),
            trunk: MlpCheckpoint::from(&self.trunk),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str::<OperatorCheckpoint>(&std::fs::read_to_string(path)?)?.into_network()
    }
}

/// Two network checkpoints plus the sensor layout and latent width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorCheckpoint {
    pub format_version: u32,
    pub latent: usize,
    pub shift_equivariant: bool,
    pub sensors: Vec<Vec<f64>>,
    pub branch: MlpCheckpoint,
    pub trunk: MlpCheckpoint,
}

impl OperatorCheckpoint {
    pub fn into_network(self) -> Result<OperatorNetwork> {
        if self.format_version != OPERATOR_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported operator format version {}",
                self.format_version
            )));
        }
        let net = OperatorNetwork::new(
            self.branch.into_mlp()?,
            self.trunk.into_mlp()?,
            SensorLayout::new(self.sensors)?,
            self.shift_equivariant,
        )?;
        if net.latent != self.latent {
            return Err(Error::Format("latent width does not match the networks".into()));
        }
        Ok(net)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn trunk_row(t: f64, x: &[f64], out: &mut Vec<f64>) {
    out.push(t);
    out.extend_from_slice(x);
}

/// Operator network with the branch evaluated for one fixed `g`.
#[derive(Debug, Clone)]
pub struct BoundOperator {
    net: Arc<OperatorNetwork>,
    coeffs: Vec<f64>,
    shift: f64,
}

impl BoundOperator {
    pub fn network(&self) -> &Arc<OperatorNetwork> {
        &self.net
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Combines trunk outputs (`n × p`) with the branch coefficients.
    pub fn combine(&self, trunk_out: &[f64]) -> Vec<f64> {
        trunk_out
            .chunks_exact(self.net.latent)
            .map(|row| self.shift + dot(&self.coeffs, row))
            .collect()
    }
}

impl ValueField for BoundOperator {
    fn dim(&self) -> usize {
        self.net.state_dim()
    }

    fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        let mut row = Vec::with_capacity(x.len() + 1);
        trunk_row(t, x, &mut row);
        let out = self.net.trunk.forward(&row)?;
        Ok(self.shift + dot(&self.coeffs, &out))
    }

    fn value_dt(&self, t: f64, x: &[f64]) -> Result<(f64, f64)> {
        let mut row = Vec::with_capacity(x.len() + 1);
        trunk_row(t, x, &mut row);
        let (v, dv) = self.net.trunk.forward_dual_t(&row, 0)?;
        Ok((self.shift + dot(&self.coeffs, &v), dot(&self.coeffs, &dv)))
    }

    fn values(&self, ts: &[f64], xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if ts.len() != xs.len() {
            return Err(Error::ShapeMismatch("times and states differ in count".into()));
        }
        let out = trunk_batch(&self.net.trunk, ts, xs)?;
        Ok(self.combine(&out))
    }

    fn as_bound_operator(&self) -> Option<&BoundOperator> {
        Some(self)
    }
}

/// Trunk outputs at `(ts[i], xs[i])`, evaluated in parallel chunks.
pub(crate) fn trunk_batch(trunk: &Mlp, ts: &[f64], xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ts.len()).collect();
    let parts: Vec<Result<Vec<f64>>> = idx
        .par_chunks(CHUNK_ROWS * 8)
        .map(|c| {
            let mut rows = Vec::with_capacity(c.len() * trunk.input_dim());
            for &i in c {
                trunk_row(ts[i], &xs[i], &mut rows);
            }
            trunk.forward_batch(&rows)
        })
        .collect();
    let mut out = Vec::with_capacity(ts.len() * trunk.output_dim());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `𝒢_θ[g](t, x)`.
pub fn operator_eval(net: &OperatorNetwork, g: &TerminalCondition, t: f64, x: &[f64]) -> Result<f64> {
    let (c, s) = net.branch_coefficients(&[g])?;
    let mut row = Vec::with_capacity(x.len() + 1);
    trunk_row(t, x, &mut row);
    Ok(s[0] + dot(&c, &net.trunk.forward(&row)?))
}

/// `(𝒢_θ[g](t, x), ∂t 𝒢_θ[g](t, x))` with the time derivative from a
/// dual-number trunk pass.
pub fn operator_eval_dt(net: &OperatorNetwork, g: &TerminalCondition, t: f64, x: &[f64]) -> Result<(f64, f64)> {
    let (c, s) = net.branch_coefficients(&[g])?;
    let mut row = Vec::with_capacity(x.len() + 1);
    trunk_row(t, x, &mut row);
    let (v, dv) = net.trunk.forward_dual_t(&row, 0)?;
    Ok((s[0] + dot(&c, &v), dot(&c, &dv)))
}

/// `∂tV + L(t,x,u) + ∇ʰV·f(t,x,u) + NhΔʰV` with `u` from `policy`.
pub fn pde_residual(
    field: &dyn ValueField,
    policy: &PolicyHandle,
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    scheme: &ViscousScheme,
) -> Result<f64> {
    let (v, vt) = field.value_dt(t, x)?;
    let probes = stencil_points(&[x.to_vec()], &scheme.stencil);
    let ts = vec![t; probes.len()];
    let nb = field.values(&ts, &probes)?;
    let u = policy.control(problem, t, x)?;
    let f = problem.dynamics(t, x, &u);
    let l = problem.running_cost(t, x, &u);
    Ok(vt + l + scheme.spatial_term(v, &nb, &f))
}

/// Interior points `(tᵢ, xᵢ)` and terminal points `xⱼ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub interior_t: Vec<f64>,
    pub interior_x: Vec<Vec<f64>>,
    pub terminal_x: Vec<Vec<f64>>,
}

impl CollocationSet {
    pub fn new(
        interior_t: Vec<f64>,
        interior_x: Vec<Vec<f64>>,
        terminal_x: Vec<Vec<f64>>,
        horizon: f64,
        domain: &StateBox,
    ) -> Result<Self> {
        if interior_t.len() != interior_x.len() {
            return Err(Error::ShapeMismatch("interior times and states differ in count".into()));
        }
        if interior_t.is_empty() && terminal_x.is_empty() {
            return Err(Error::EmptyCollocation);
        }
        if interior_t.iter().any(|t| !(0.0..=horizon).contains(t)) {
            return Err(Error::InvalidArgument("collocation time outside [0, T]".into()));
        }
        if interior_x.iter().chain(&terminal_x).any(|x| !domain.contains(x)) {
            return Err(Error::InvalidArgument("collocation state outside the working box".into()));
        }
        Ok(Self {
            interior_t,
            interior_x,
            terminal_x,
        })
    }

    /// Uniform samples over `[0, T] × domain` and `domain`.
    pub fn sample(horizon: f64, domain: &StateBox, n_interior: usize, n_terminal: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut rng = sampling::rng(seed);
        let interior_t = (0..n_interior).map(|_| rng.random_range(0.0..=horizon)).collect();
        let interior_x = sampling::uniform_points(domain, n_interior, &mut rng);
        let terminal_x = sampling::uniform_points(domain, n_terminal, &mut rng);
        Self::new(interior_t, interior_x, terminal_x, horizon, domain)
    }

    pub fn n_interior(&self) -> usize {
        self.interior_t.len()
    }

    pub fn n_terminal(&self) -> usize {
        self.terminal_x.len()
    }
}

/// Loss values, residual maxima and (optionally) parameter gradients.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub l1: f64,
    pub l2: f64,
    pub max_residual: f64,
    pub max_terminal_error: f64,
    pub branch_grad: Option<ParamGrad>,
    pub trunk_grad: Option<ParamGrad>,
}

impl LossEvaluation {
    pub fn weighted(&self, alpha1: f64, alpha2: f64) -> f64 {
        alpha1 * self.l1 + alpha2 * self.l2
    }
}

struct ChunkOut {
    sq: f64,
    max_abs: f64,
    branch_up: Vec<f64>,
    trunk_grad: Option<ParamGrad>,
}

/// Per-point velocity (`n × d` per `g`) and running cost (`n` per `g`).
struct PolicyData {
    flows: Vec<Vec<f64>>,
    costs: Vec<Vec<f64>>,
}

fn policy_data(
    policies: &[PolicyHandle],
    problem: &ControlProblem,
    ts: &[f64],
    xs: &[Vec<f64>],
) -> Result<PolicyData> {
    let controls = evaluate_policies(policies, problem, ts, xs)?;
    let d = problem.state_dim;
    let mut flows = Vec::with_capacity(controls.len());
    let mut costs = Vec::with_capacity(controls.len());
    for us in &controls {
        let (f, l): (Vec<Vec<f64>>, Vec<f64>) = us
            .par_iter()
            .enumerate()
            .map(|(i, u)| (problem.dynamics(ts[i], &xs[i], u), problem.running_cost(ts[i], &xs[i], u)))
            .unzip();
        let mut flat = Vec::with_capacity(xs.len() * d);
        f.into_iter().for_each(|v| flat.extend(v));
        flows.push(flat);
        costs.push(l);
    }
    Ok(PolicyData { flows, costs })
}

/// `L1` (mean squared residual over points and `g`s) and `L2` (mean squared
/// terminal mismatch), with gradients of `α₁L1 + α₂L2` when `alphas` is
/// given.
pub fn evaluate_losses(
    net: &OperatorNetwork,
    gs: &[TerminalCondition],
    policies: &[PolicyHandle],
    colloc: &CollocationSet,
    problem: &ControlProblem,
    scheme: &ViscousScheme,
    alphas: Option<(f64, f64)>,
) -> Result<LossEvaluation> {
    if gs.is_empty() {
        return Err(Error::InvalidArgument("no terminal conditions".into()));
    }
    if policies.len() != gs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} policies for {} terminal conditions",
            policies.len(),
            gs.len()
        )));
    }
    if colloc.n_interior() == 0 && colloc.n_terminal() == 0 {
        return Err(Error::EmptyCollocation);
    }
    let d = problem.state_dim;
    if net.state_dim() != d || scheme.dim() != d {
        return Err(Error::ShapeMismatch("network, scheme and problem dimensions differ".into()));
    }
    let k = gs.len();
    let p = net.latent;
    let want_grad = alphas.is_some();
    let (alpha1, alpha2) = alphas.unwrap_or((1.0, 1.0));

    let grefs: Vec<&TerminalCondition> = gs.iter().collect();
    let (branch_in, shifts) = net.branch_batch(&grefs)?;
    let branch_trace = net.branch.forward_traced(&branch_in)?;
    let coeffs = branch_trace.output().to_vec();

    let n_int = colloc.n_interior();
    let n_term = colloc.n_terminal();

    // interior residuals
    let pdata = if n_int > 0 {
        Some(policy_data(policies, problem, &colloc.interior_t, &colloc.interior_x)?)
    } else {
        None
    };
    let int_scale = if n_int > 0 { 2.0 * alpha1 / (n_int * k) as f64 } else { 0.0 };
    let idx: Vec<usize> = (0..n_int).collect();
    let interior: Vec<Result<ChunkOut>> = idx
        .par_chunks(CHUNK_ROWS)
        .map(|c| {
            interior_chunk(
                net,
                &coeffs,
                &shifts,
                colloc,
                pdata.as_ref().expect("interior points have policy data"),
                c,
                scheme,
                int_scale,
                want_grad,
            )
        })
        .collect();

    // terminal mismatch
    let horizon = problem.horizon;
    let targets: Vec<Vec<f64>> = gs
        .iter()
        .map(|g| colloc.terminal_x.iter().map(|x| g.eval(x)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let term_scale = if n_term > 0 { 2.0 * alpha2 / (n_term * k) as f64 } else { 0.0 };
    let tidx: Vec<usize> = (0..n_term).collect();
    let terminal: Vec<Result<ChunkOut>> = tidx
        .par_chunks(CHUNK_ROWS)
        .map(|c| terminal_chunk(net, &coeffs, &shifts, colloc, &targets, c, horizon, term_scale, want_grad))
        .collect();

    let mut sq_int = 0.0;
    let mut max_res: f64 = 0.0;
    let mut sq_term = 0.0;
    let mut max_term: f64 = 0.0;
    let mut branch_up = vec![0.0; k * p];
    let mut trunk_grad = want_grad.then(|| ParamGrad::zeros_like(&net.trunk));
    for (i, part) in interior.into_iter().chain(terminal).enumerate() {
        let part = part?;
        if i < n_int.div_ceil(CHUNK_ROWS) {
            sq_int += part.sq;
            max_res = max_res.max(part.max_abs);
        } else {
            sq_term += part.sq;
            max_term = max_term.max(part.max_abs);
        }
        if let (Some(tg), Some(pg)) = (trunk_grad.as_mut(), part.trunk_grad.as_ref()) {
            tg.add_assign(pg)?;
        }
        branch_up.iter_mut().zip(&part.branch_up).for_each(|(a, b)| *a += b);
    }
    let l1 = if n_int > 0 { sq_int / (n_int * k) as f64 } else { 0.0 };
    let l2 = if n_term > 0 { sq_term / (n_term * k) as f64 } else { 0.0 };

    let branch_grad = if want_grad {
        let mut bg = ParamGrad::zeros_like(&net.branch);
        net.branch.backward_traced(&branch_trace, &branch_up, &mut bg)?;
        Some(bg)
    } else {
        None
    };
    Ok(LossEvaluation {
        l1,
        l2,
        max_residual: max_res,
        max_terminal_error: max_term,
        branch_grad,
        trunk_grad,
    })
}

#[allow(clippy::too_many_arguments)]
fn interior_chunk(
    net: &OperatorNetwork,
    coeffs: &[f64],
    shifts: &[f64],
    colloc: &CollocationSet,
    pdata: &PolicyData,
    rows: &[usize],
    scheme: &ViscousScheme,
    scale: f64,
    want_grad: bool,
) -> Result<ChunkOut> {
    let d = scheme.dim();
    let p = net.latent;
    let k = shifts.len();
    let h = scheme.h();
    let w = d + 1;
    let n = rows.len();
    let mut centers = Vec::with_capacity(n * w);
    let mut neighbors = Vec::with_capacity(n * 2 * d * w);
    for &i in rows {
        let t = colloc.interior_t[i];
        let x = &colloc.interior_x[i];
        trunk_row(t, x, &mut centers);
        for j in 0..d {
            for s in [h, -h] {
                neighbors.push(t);
                for (c, xv) in x.iter().enumerate() {
                    neighbors.push(if c == j { xv + s } else { *xv });
                }
            }
        }
    }
    let ctr = net.trunk.forward_dual_traced(&centers, 0)?;
    let ntr = net.trunk.forward_traced(&neighbors)?;
    let tc = ctr.output();
    let tdot = ctr.tangent();
    let tn = ntr.output();

    let mut sq = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut branch_up = vec![0.0; if want_grad { k * p } else { 0 }];
    let (mut up_cv, mut up_ct, mut up_n) = if want_grad {
        (vec![0.0; n * p], vec![0.0; n * p], vec![0.0; n * 2 * d * p])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    let cw = scheme.center_weight();
    let mut nb = vec![0.0; 2 * d];
    for (li, &gi) in rows.iter().enumerate() {
        let tc_i = &tc[li * p..(li + 1) * p];
        let td_i = &tdot[li * p..(li + 1) * p];
        let tn_i = &tn[li * 2 * d * p..(li + 1) * 2 * d * p];
        for kk in 0..k {
            let b = &coeffs[kk * p..(kk + 1) * p];
            let s = shifts[kk];
            let f = &pdata.flows[kk][gi * d..(gi + 1) * d];
            let l = pdata.costs[kk][gi];
            let vc = s + dot(b, tc_i);
            let vt = dot(b, td_i);
            for (q, nv) in nb.iter_mut().enumerate() {
                *nv = s + dot(b, &tn_i[q * p..(q + 1) * p]);
            }
            let r = vt + l + scheme.spatial_term(vc, &nb, f);
            sq += r * r;
            max_abs = max_abs.max(r.abs());
            if !want_grad {
                continue;
            }
            let wr = scale * r;
            let bu = &mut branch_up[kk * p..(kk + 1) * p];
            let ucv = &mut up_cv[li * p..(li + 1) * p];
            let uct = &mut up_ct[li * p..(li + 1) * p];
            for c in 0..p {
                uct[c] += wr * b[c];
                ucv[c] += wr * cw * b[c];
                bu[c] += wr * (td_i[c] + cw * tc_i[c]);
            }
            for (j, fj) in f.iter().enumerate() {
                let (wp, wm) = scheme.neighbor_weights(*fj);
                for (q, wq) in [(2 * j, wp), (2 * j + 1, wm)] {
                    let row = li * 2 * d + q;
                    let un = &mut up_n[row * p..(row + 1) * p];
                    let tq = &tn[row * p..(row + 1) * p];
                    for c in 0..p {
                        un[c] += wr * wq * b[c];
                        bu[c] += wr * wq * tq[c];
                    }
                }
            }
        }
    }
    let trunk_grad = if want_grad {
        let mut g = ParamGrad::zeros_like(&net.trunk);
        net.trunk.backward_dual_traced(&ctr, &up_cv, &up_ct, &mut g)?;
        net.trunk.backward_traced(&ntr, &up_n, &mut g)?;
        Some(g)
    } else {
        None
    };
    Ok(ChunkOut {
        sq,
        max_abs,
        branch_up,
        trunk_grad,
    })
}

#[allow(clippy::too_many_arguments)]
fn terminal_chunk(
    net: &OperatorNetwork,
    coeffs: &[f64],
    shifts: &[f64],
    colloc: &CollocationSet,
    targets: &[Vec<f64>],
    rows: &[usize],
    horizon: f64,
    scale: f64,
    want_grad: bool,
) -> Result<ChunkOut> {
    let p = net.latent;
    let k = shifts.len();
    let n = rows.len();
    let mut input = Vec::with_capacity(n * (net.state_dim() + 1));
    for &j in rows {
        trunk_row(horizon, &colloc.terminal_x[j], &mut input);
    }
    let tr = net.trunk.forward_traced(&input)?;
    let out = tr.output();
    let mut sq = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut branch_up = vec![0.0; if want_grad { k * p } else { 0 }];
    let mut up = vec![0.0; if want_grad { n * p } else { 0 }];
    for (lj, &gj) in rows.iter().enumerate() {
        let t_j = &out[lj * p..(lj + 1) * p];
        for kk in 0..k {
            let b = &coeffs[kk * p..(kk + 1) * p];
            let e = shifts[kk] + dot(b, t_j) - targets[kk][gj];
            sq += e * e;
            max_abs = max_abs.max(e.abs());
            if want_grad {
                let we = scale * e;
                let u = &mut up[lj * p..(lj + 1) * p];
                let bu = &mut branch_up[kk * p..(kk + 1) * p];
                for c in 0..p {
                    u[c] += we * b[c];
                    bu[c] += we * t_j[c];
                }
            }
        }
    }
    let trunk_grad = if want_grad {
        let mut g = ParamGrad::zeros_like(&net.trunk);
        net.trunk.backward_traced(&tr, &up, &mut g)?;
        Some(g)
    } else {
        None
    };
    Ok(ChunkOut {
        sq,
        max_abs,
        branch_up,
        trunk_grad,
    })
}

/// `(L1, L2)` on a fixed collocation set.
pub fn loss_terms(
    net: &OperatorNetwork,
    gs: &[TerminalCondition],
    policies: &[PolicyHandle],
    colloc: &CollocationSet,
    problem: &ControlProblem,
    scheme: &ViscousScheme,
) -> Result<(f64, f64)> {
    let e = evaluate_losses(net, gs, policies, colloc, problem, scheme, None)?;
    Ok((e.l1, e.l2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam steps per policy-iteration round.
    pub epochs: usize,
    pub interior_points: usize,
    pub terminal_points: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr: f64,
    /// Learning rate reached at the last epoch by geometric decay; constant
    /// when unset.
    pub lr_final: Option<f64>,
    /// Fresh uniform points used to estimate the residual sups.
    pub probe_points: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            interior_points: 2000,
            terminal_points: 500,
            alpha1: 1.0,
            alpha2: 10.0,
            lr: 1e-3,
            lr_final: None,
            probe_points: 10_000,
            divergence_threshold: 1e6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            Some(fin) if self.epochs > 1 => {
                let frac = epoch as f64 / (self.epochs - 1) as f64;
                self.lr * (fin / self.lr).powf(frac)
            }
            _ => self.lr,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub wall_ms: f64,
}

/// Per-epoch losses and the final residual sup estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub initial_l1: f64,
    pub initial_l2: f64,
    /// Estimated `sup |residual|` on fresh probes after training.
    pub eps1_hat: f64,
    /// Estimated `sup |V(T,x) − g(x)|` on fresh probes after training.
    pub eps2_hat: f64,
    pub adam_steps: u64,
    pub wall_ms: f64,
}

/// Adam state over the branch blocks followed by the trunk blocks.
pub fn operator_adam(net: &OperatorNetwork, cfg: AdamConfig) -> AdamState {
    let lens: Vec<usize> = net
        .branch
        .layers()
        .iter()
        .chain(net.trunk.layers())
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    AdamState::new(cfg, &lens)
}

fn apply_step(net: &mut OperatorNetwork, opt: &mut AdamState, bg: &ParamGrad, tg: &ParamGrad) -> Result<()> {
    let grads: Vec<&[f64]> = bg.blocks().into_iter().chain(tg.blocks()).collect();
    let OperatorNetwork { branch, trunk, .. } = net;
    let mut params: Vec<&mut [f64]> = branch.blocks_mut().into_iter().chain(trunk.blocks_mut()).collect();
    opt.step_blocks(&mut params, &grads)
}

/// Residual sup estimates on fresh uniform probes.
pub fn estimate_residual_sups(
    net: &OperatorNetwork,
    gs: &[TerminalCondition],
    policies: &[PolicyHandle],
    problem: &ControlProblem,
    scheme: &ViscousScheme,
    n_probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_probes == 0 {
        return Ok((0.0, 0.0));
    }
    let probes = CollocationSet::sample(problem.horizon, &problem.domain, n_probes, n_probes, seed)?;
    let e = evaluate_losses(net, gs, policies, &probes, problem, scheme, None)?;
    Ok((e.max_residual, e.max_terminal_error))
}

/// Minimizes `α₁L1 + α₂L2` with Adam, resampling collocation points every
/// epoch.
pub fn train_operator(
    net: &mut OperatorNetwork,
    gs: &[TerminalCondition],
    policies: &[PolicyHandle],
    problem: &ControlProblem,
    scheme: &ViscousScheme,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<TrainingReport> {
    if cfg.interior_points == 0 && cfg.terminal_points == 0 {
        return Err(Error::EmptyCollocation);
    }
    let start = Instant::now();
    let steps_before = opt.steps();
    let alphas = (cfg.alpha1, cfg.alpha2);
    let sample = |epoch: usize| {
        CollocationSet::sample(
            problem.horizon,
            &problem.domain,
            cfg.interior_points,
            cfg.terminal_points,
            sampling::derive_seed(cfg.seed, epoch as u64),
        )
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let (initial_l1, initial_l2) = if cfg.epochs == 0 {
        loss_terms(net, gs, policies, &sample(0)?, problem, scheme)?
    } else {
        (f64::NAN, f64::NAN)
    };
    let mut init = (initial_l1, initial_l2);
    for epoch in 0..cfg.epochs {
        let colloc = sample(epoch)?;
        let e = evaluate_losses(net, gs, policies, &colloc, problem, scheme, Some(alphas))?;
        let loss = e.weighted(cfg.alpha1, cfg.alpha2);
        if !loss.is_finite() || loss > cfg.divergence_threshold {
            return Err(Error::DivergenceDetected { epoch, loss });
        }
        if epoch == 0 {
            init = (e.l1, e.l2);
        }
        opt.set_lr(cfg.lr_at(epoch));
        apply_step(
            net,
            opt,
            e.branch_grad.as_ref().expect("gradient requested"),
            e.trunk_grad.as_ref().expect("gradient requested"),
        )?;
        epochs.push(EpochRecord {
            epoch,
            l1: e.l1,
            l2: e.l2,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            log::debug!("epoch {epoch}: L1 = {:.4e}, L2 = {:.4e}", e.l1, e.l2);
        }
    }
    let (eps1_hat, eps2_hat) = estimate_residual_sups(
        net,
        gs,
        policies,
        problem,
        scheme,
        cfg.probe_points,
        sampling::derive_seed(cfg.seed, u64::MAX),
    )?;
    Ok(TrainingReport {
        epochs,
        initial_l1: init.0,
        initial_l2: init.1,
        eps1_hat,
        eps2_hat,
        adam_steps: opt.steps() - steps_before,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
