//! Dense-grid reference solver for the semi-discrete scheme
//!
//! ```text
//! ∂t V + L(t,x,u) + ∇ʰV·f(t,x,u) + NhΔʰV = 0,   V(T,·) = g
//! ```
//!
//! with explicit Euler steps backward in time, plus grid-level policy
//! iteration and the Hopf–Lax value of the unit-speed vehicle.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ValueField;
use crate::io;
use crate::ocp::{argmin_control, ArgminConfig, ControlProblem, TerminalCondition};
use crate::policy::PolicyHandle;
use crate::sampling::StateBox;
use crate::stencil::ViscousScheme;

/// Safety factor applied to the stability bound when choosing `Δt`.
pub const CFL_SAFETY: f64 = 0.9;

const SLAB_MAGIC: &[u8; 8] = b"HJBGRID1";

/// Values outside the box used by stencils at boundary nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GhostMode {
    /// Ghost value equals the boundary node value. Keeps the update a
    /// convex combination.
    #[default]
    Constant,
    /// Linear extrapolation from the boundary node and its inner neighbor.
    Linear,
}

/// Regular space-time grid over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub h: f64,
    pub dt: f64,
    pub horizon: f64,
    /// Nodes per dimension.
    pub counts: Vec<usize>,
    /// Number of time steps; slices are `t_s = s·Δt`, `s = 0..=steps`.
    pub steps: usize,
}

/// `h / (d‖f‖∞ + 2Nd)`.
pub fn stability_bound(h: f64, dim: usize, f_sup: f64, viscosity: f64) -> f64 {
    h / (dim as f64 * f_sup + 2.0 * viscosity * dim as f64)
}

impl GridSpec {
    /// Grid with the largest `Δt = T/K ≤ 0.9·h/(d‖f‖∞ + 2Nd)`.
    pub fn new(bx: &StateBox, h: f64, horizon: f64, f_sup: f64, viscosity: f64) -> Result<Self> {
        let bound = stability_bound(h, bx.dim(), f_sup, viscosity);
        let steps = (horizon / (CFL_SAFETY * bound)).ceil().max(1.0) as usize;
        Self::with_steps(bx, h, horizon, steps, f_sup, viscosity)
    }

    /// Grid with `steps` time steps; fails if `Δt` violates the bound.
    pub fn with_steps(
        bx: &StateBox,
        h: f64,
        horizon: f64,
        steps: usize,
        f_sup: f64,
        viscosity: f64,
    ) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::InvalidArgument(format!("grid spacing h = {h} not in (0, 1)")));
        }
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::InvalidArgument("grid needs a positive horizon and step count".into()));
        }
        let mut counts = Vec::with_capacity(bx.dim());
        for (lo, hi) in bx.lo.iter().zip(&bx.hi) {
            let cells = (hi - lo) / h;
            let r = cells.round();
            if r < 1.0 || (cells - r).abs() > 1e-9 * r.max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "box side {} is not a multiple of h = {h}",
                    hi - lo
                )));
            }
            counts.push(r as usize + 1);
        }
        let dt = horizon / steps as f64;
        let bound = stability_bound(h, bx.dim(), f_sup, viscosity);
        if dt > bound {
            return Err(Error::UnstableSpec { dt, bound });
        }
        Ok(Self {
            lo: bx.lo.clone(),
            hi: bx.hi.clone(),
            h,
            dt,
            horizon,
            counts,
            steps,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn node_count(&self) -> usize {
        self.counts.iter().product()
    }

    /// Row-major strides (last coordinate fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for i in (0..self.dim().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.counts[i + 1];
        }
        s
    }

    /// Coordinate of grid line `k` in dimension `i`; the last line is
    /// exactly `hi`.
    pub fn coordinate(&self, i: usize, k: usize) -> f64 {
        if k + 1 == self.counts[i] {
            self.hi[i]
        } else {
            self.lo[i] + k as f64 * self.h
        }
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for i in (0..self.dim()).rev() {
            idx[i] = flat % self.counts[i];
            flat /= self.counts[i];
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(i, k)| self.coordinate(i, *k))
            .collect()
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.node_count()).map(|n| self.node(n)).collect()
    }

    pub fn time(&self, slice: usize) -> f64 {
        if slice == self.steps {
            self.horizon
        } else {
            slice as f64 * self.dt
        }
    }

    pub fn state_box(&self) -> StateBox {
        StateBox {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
        }
    }
}

/// Stencil neighbor: value `(1 + w)·V[a] − w·V[b]`.
#[derive(Debug, Clone, Copy)]
struct Neighbor {
    a: usize,
    b: usize,
    w: f64,
}

impl Neighbor {
    #[inline]
    fn value(&self, v: &[f64]) -> f64 {
        if self.w == 0.0 {
            v[self.a]
        } else {
            (1.0 + self.w) * v[self.a] - self.w * v[self.b]
        }
    }
}

/// `2d` neighbors per node, `+h` before `−h` per coordinate.
fn neighbor_table(spec: &GridSpec, ghost: GhostMode) -> Result<Vec<Neighbor>> {
    let d = spec.dim();
    if ghost == GhostMode::Linear && spec.counts.iter().any(|c| *c < 2) {
        return Err(Error::InvalidArgument("linear ghosts need two nodes per dimension".into()));
    }
    let strides = spec.strides();
    let mut out = Vec::with_capacity(spec.node_count() * 2 * d);
    for n in 0..spec.node_count() {
        let idx = spec.multi_index(n);
        for j in 0..d {
            let s = strides[j];
            let last = spec.counts[j] - 1;
            let up = if idx[j] < last {
                Neighbor { a: n + s, b: n, w: 0.0 }
            } else {
                ghost_neighbor(n, n.wrapping_sub(s), ghost, last)
            };
            let down = if idx[j] > 0 {
                Neighbor { a: n - s, b: n, w: 0.0 }
            } else {
                ghost_neighbor(n, n + s, ghost, last)
            };
            out.push(up);
            out.push(down);
        }
    }
    Ok(out)
}

fn ghost_neighbor(node: usize, inner: usize, ghost: GhostMode, last: usize) -> Neighbor {
    match ghost {
        GhostMode::Linear if last > 0 => Neighbor { a: node, b: inner, w: 1.0 },
        _ => Neighbor { a: node, b: node, w: 0.0 },
    }
}

/// Values on every node and time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    spec: Arc<GridSpec>,
    ghost: GhostMode,
    /// Slice-major, `slices × nodes`, slices in increasing time.
    values: Vec<f64>,
}

impl GridField {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn ghost(&self) -> GhostMode {
        self.ghost
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, s: usize) -> &[f64] {
        let n = self.spec.node_count();
        &self.values[s * n..(s + 1) * n]
    }

    /// Multilinear interpolation in space on one slice; coordinates are
    /// clamped to the box.
    fn interp_slice(&self, s: usize, x: &[f64]) -> f64 {
        let spec = &self.spec;
        let d = spec.dim();
        let strides = spec.strides();
        let slice = self.slice(s);
        let mut base = 0usize;
        let mut frac = vec![0.0; d];
        let mut step = vec![0usize; d];
        for i in 0..d {
            let c = spec.counts[i];
            if c == 1 {
                continue;
            }
            let u = ((x[i].clamp(spec.lo[i], spec.hi[i]) - spec.lo[i]) / spec.h).max(0.0);
            let k = (u.floor() as usize).min(c - 2);
            let mut fr = u - k as f64;
            if k + 2 == c {
                // last cell ends exactly at hi
                let width = spec.hi[i] - spec.coordinate(i, k);
                fr = (x[i].clamp(spec.lo[i], spec.hi[i]) - spec.coordinate(i, k)) / width;
            }
            frac[i] = fr.clamp(0.0, 1.0);
            base += k * strides[i];
            step[i] = strides[i];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base;
            for i in 0..d {
                if corner >> i & 1 == 1 {
                    w *= frac[i];
                    idx += step[i];
                } else {
                    w *= 1.0 - frac[i];
                }
            }
            if w != 0.0 {
                acc += w * slice[idx];
            }
        }
        acc
    }

    /// Node values at `t = 0`.
    pub fn initial_slice(&self) -> &[f64] {
        self.slice(0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV with node coordinates, time and value for the given slices
    /// (every slice when `None`).
    pub fn write_csv(&self, path: &Path, slices: Option<&[usize]>, config_hash: &str) -> Result<()> {
        let d = self.spec.dim();
        let all: Vec<usize> = (0..=self.spec.steps).collect();
        let slices = slices.unwrap_or(&all);
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("t".into());
        header.push("value".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let nodes = self.spec.nodes();
        let mut rows = Vec::with_capacity(slices.len() * nodes.len());
        for &s in slices {
            if s > self.spec.steps {
                return Err(Error::InvalidArgument(format!("slice {s} beyond {}", self.spec.steps)));
            }
            let t = self.spec.time(s);
            for (n, x) in nodes.iter().enumerate() {
                let mut r: Vec<String> = x.iter().map(|v| io::num(*v)).collect();
                r.push(io::num(t));
                r.push(io::num(self.slice(s)[n]));
                rows.push(r);
            }
        }
        io::write_csv(path, &header, &rows, config_hash)
    }

    /// Binary slab: magic, `u32` d, `f64` lo[d], hi[d], h, Δt, T, `u64`
    /// counts[d], steps, then all values, little endian.
    pub fn write_slab(&self, path: &Path) -> Result<()> {
        let s = &self.spec;
        let mut buf = Vec::with_capacity(64 + 8 * self.values.len());
        buf.extend_from_slice(SLAB_MAGIC);
        buf.extend_from_slice(&(s.dim() as u32).to_le_bytes());
        for v in s.lo.iter().chain(&s.hi).chain([&s.h, &s.dt, &s.horizon]) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for c in s.counts.iter().chain([&s.steps]) {
            buf.extend_from_slice(&(*c as u64).to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_slab(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format("truncated grid slab".into()))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != SLAB_MAGIC {
            return Err(Error::Format("not a grid slab".into()));
        }
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut f = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().unwrap())))
                .collect()
        };
        let lo = f(d)?;
        let hi = f(d)?;
        let rest = f(3)?;
        let ints: Vec<usize> = f(d + 1)?.into_iter().map(|v| v.to_bits() as usize).collect();
        let spec = GridSpec {
            lo,
            hi,
            h: rest[0],
            dt: rest[1],
            horizon: rest[2],
            counts: ints[..d].to_vec(),
            steps: ints[d],
        };
        let n = spec.node_count() * (spec.steps + 1);
        let values = f(n)?;
        Ok(GridField {
            spec: Arc::new(spec),
            ghost: GhostMode::Constant,
            values,
        })
    }
}

impl ValueField for GridField {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Linear in time between slices, multilinear in space, clamped to the
    /// grid.
    fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        if x.len() != self.spec.dim() {
            return Err(Error::ShapeMismatch("query dimension does not match grid".into()));
        }
        let u = (t / self.spec.dt).clamp(0.0, self.spec.steps as f64);
        let s = (u.floor() as usize).min(self.spec.steps);
        let fr = u - s as f64;
        let v0 = self.interp_slice(s, x);
        if fr == 0.0 || s == self.spec.steps {
            return Ok(v0);
        }
        Ok((1.0 - fr) * v0 + fr * self.interp_slice(s + 1, x))
    }
}

/// How the policy is evaluated on grid nodes.
enum NodePolicy<'a> {
    Handle(&'a PolicyHandle),
    /// Argmin against the discrete gradient of a field on the same grid.
    Grid { prev: &'a GridField, solver: ArgminConfig },
}

/// Solves the linear scheme for a frozen policy with constant ghosts.
pub fn solve_linear_pde(
    problem: &ControlProblem,
    policy: &PolicyHandle,
    g: &TerminalCondition,
    spec: &GridSpec,
    viscosity: f64,
) -> Result<GridField> {
    solve_linear_pde_with(problem, policy, g, spec, viscosity, GhostMode::Constant)
}

pub fn solve_linear_pde_with(
    problem: &ControlProblem,
    policy: &PolicyHandle,
    g: &TerminalCondition,
    spec: &GridSpec,
    viscosity: f64,
    ghost: GhostMode,
) -> Result<GridField> {
    solve_inner(problem, NodePolicy::Handle(policy), g, spec, viscosity, ghost)
}

fn solve_inner(
    problem: &ControlProblem,
    policy: NodePolicy<'_>,
    g: &TerminalCondition,
    spec: &GridSpec,
    viscosity: f64,
    ghost: GhostMode,
) -> Result<GridField> {
    let d = spec.dim();
    if d != problem.state_dim {
        return Err(Error::ShapeMismatch("grid and problem dimensions differ".into()));
    }
    let bound = stability_bound(spec.h, d, problem.f_sup_norm, viscosity);
    if spec.dt > bound * (1.0 + 1e-12) {
        return Err(Error::UnstableSpec { dt: spec.dt, bound });
    }
    let scheme = ViscousScheme::new(spec.h, d, viscosity)?;
    let nodes = spec.nodes();
    let n = nodes.len();
    let table = neighbor_table(spec, ghost)?;
    let mut values = vec![0.0; n * (spec.steps + 1)];
    let terminal: Vec<f64> = nodes.iter().map(|x| g.eval(x)).collect::<Result<_>>()?;
    values[spec.steps * n..].copy_from_slice(&terminal);

    for s in (1..=spec.steps).rev() {
        let t = spec.time(s);
        let controls: Vec<Vec<f64>> = match &policy {
            NodePolicy::Handle(p) => p.controls(problem, &vec![t; n], &nodes)?,
            NodePolicy::Grid { prev, solver } => {
                let pv = prev.slice(s);
                let prev_table = &table;
                nodes
                    .par_iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let nb = &prev_table[i * 2 * d..(i + 1) * 2 * d];
                        let p: Vec<f64> = nb
                            .chunks_exact(2)
                            .map(|pm| (pm[0].value(pv) - pm[1].value(pv)) / (2.0 * spec.h))
                            .collect();
                        argmin_control(problem, t, x, &p, *solver)
                    })
                    .collect::<Result<_>>()?
            }
        };
        let (done, cur) = values.split_at_mut(s * n);
        let cur = &cur[..n];
        let next = &mut done[(s - 1) * n..];
        let dt = spec.dt;
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            let x = &nodes[i];
            let u = &controls[i];
            let f = problem.dynamics(t, x, u);
            let l = problem.running_cost(t, x, u);
            let nb: Vec<f64> = table[i * 2 * d..(i + 1) * 2 * d].iter().map(|q| q.value(cur)).collect();
            *out = cur[i] + dt * (l + scheme.spatial_term(cur[i], &nb, &f));
        });
        if let Some(bad) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!(
                "grid value at node {:?}, t = {}",
                nodes[bad],
                spec.time(s - 1)
            )));
        }
    }
    Ok(GridField {
        spec: Arc::new(spec.clone()),
        ghost,
        values,
    })
}

/// `M` rounds of grid policy iteration from `u₀ ≡ 0`; returns `V₀ʰ … V_{M−1}ʰ`.
pub fn grid_policy_iteration(
    problem: &ControlProblem,
    g: &TerminalCondition,
    spec: &GridSpec,
    viscosity: f64,
    iterations: usize,
    solver: ArgminConfig,
) -> Result<Vec<GridField>> {
    let mut fields: Vec<GridField> = Vec::with_capacity(iterations);
    if iterations == 0 {
        return Ok(fields);
    }
    let u0 = PolicyHandle::zero(problem);
    fields.push(solve_inner(
        problem,
        NodePolicy::Handle(&u0),
        g,
        spec,
        viscosity,
        GhostMode::Constant,
    )?);
    for _ in 1..iterations {
        let prev = fields.last().expect("at least one field");
        let next = solve_inner(
            problem,
            NodePolicy::Grid { prev, solver },
            g,
            spec,
            viscosity,
            GhostMode::Constant,
        )?;
        fields.push(next);
    }
    Ok(fields)
}

/// `V(t, x) = max(‖x‖ − (T − t), 0)` for the unit-speed vehicle with
/// `g = ‖x‖`.
pub fn hopf_lax_vehicle(t: f64, x: &[f64], horizon: f64) -> f64 {
    debug_assert!(t <= horizon);
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (r - (horizon - t)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub max_error: f64,
    pub nodes: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log error` against `log h`; `None` when an
    /// error is zero or fewer than two spacings were run.
    pub exponent: Option<f64>,
}

impl ConvergenceTable {
    /// Errors do not grow as `h` decreases, up to a relative `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| b.h.total_cmp(&a.h));
        rows.windows(2).all(|w| w[1].max_error <= w[0].max_error * (1.0 + slack))
    }
}

/// Grid policy iteration at each `h`, with the max error of `V_M(0, ·)`
/// against `oracle` on `probes`.
#[allow(clippy::too_many_arguments)]
pub fn sqrt_h_convergence_study(
    problem: &ControlProblem,
    g: &TerminalCondition,
    h_list: &[f64],
    viscosity: f64,
    iterations: usize,
    probes: &[Vec<f64>],
    oracle: impl Fn(&[f64]) -> f64,
    solver: ArgminConfig,
) -> Result<ConvergenceTable> {
    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let spec = GridSpec::new(&problem.domain, h, problem.horizon, problem.f_sup_norm, viscosity)?;
        let fields = grid_policy_iteration(problem, g, &spec, viscosity, iterations, solver)?;
        let last = fields
            .last()
            .ok_or_else(|| Error::InvalidArgument("convergence study needs M ≥ 1".into()))?;
        let mut err: f64 = 0.0;
        for x in probes {
            err = err.max((last.value(0.0, x)? - oracle(x)).abs());
        }
        rows.push(ConvergenceRow {
            h,
            max_error: err,
            nodes: spec.node_count(),
            steps: spec.steps,
        });
    }
    let exponent = if rows.len() >= 2 && rows.iter().all(|r| r.max_error > 0.0) {
        Some(fit_exponent(&rows))
    } else {
        None
    };
    Ok(ConvergenceTable { rows, exponent })
}

fn fit_exponent(rows: &[ConvergenceRow]) -> f64 {
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.h.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.max_error.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{ControlSet, ProblemStructure, SensorLayout, TerminalFn};

    fn sensors(d: usize) -> SensorLayout {
        SensorLayout::sobol(&StateBox::cube(d, -1.0, 1.0), 4, 0).unwrap()
    }

    fn scalar_problem(f: f64, l: f64, bx: StateBox) -> ControlProblem {
        ControlProblem::new(
            "scalar",
            1,
            1.0,
            ControlSet::cube(1, -1.0, 1.0),
            bx,
            Arc::new(move |_, _, _, out: &mut [f64]| out[0] = f),
            Arc::new(move |_, _, _| l),
            Some(f.abs()),
            ProblemStructure::General,
        )
        .unwrap()
    }

    #[test]
    fn spec_has_exact_corners_and_stable_step() {
        let bx = StateBox::cube(2, -2.0, 2.0);
        let s = GridSpec::new(&bx, 0.05, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(s.counts, vec![81, 81]);
        assert_eq!(s.node(0), vec![-2.0, -2.0]);
        assert_eq!(s.node(s.node_count() - 1), vec![2.0, 2.0]);
        assert!(s.dt <= stability_bound(0.05, 2, 1.0, 1.0));
        assert!((s.dt * s.steps as f64 - 1.0).abs() < 1e-12);
        assert!(matches!(
            GridSpec::with_steps(&bx, 0.05, 1.0, 10, 1.0, 1.0),
            Err(Error::UnstableSpec { .. })
        ));
    }

    #[test]
    fn constants_are_preserved_exactly() {
        let p = scalar_problem(0.0, 0.0, StateBox::cube(1, -1.0, 1.0));
        let g = TerminalCondition::new(TerminalFn::constant(0.7), sensors(1)).unwrap();
        let spec = GridSpec::new(&p.domain, 0.1, 1.0, 0.0, 1.0).unwrap();
        let v = solve_linear_pde(&p, &PolicyHandle::zero(&p), &g, &spec, 1.0).unwrap();
        assert!(v.values().iter().all(|x| *x == 0.7));
    }

    #[test]
    fn unit_running_cost_integrates_to_remaining_time() {
        let p = scalar_problem(0.0, 1.0, StateBox::cube(1, -1.0, 1.0));
        let g = TerminalCondition::new(TerminalFn::constant(0.0), sensors(1)).unwrap();
        let spec = GridSpec::new(&p.domain, 0.1, 1.0, 0.0, 1.0).unwrap();
        let v = solve_linear_pde(&p, &PolicyHandle::zero(&p), &g, &spec, 1.0).unwrap();
        for s in 0..=spec.steps {
            let t = spec.time(s);
            for val in v.slice(s) {
                assert!((val - (1.0 - t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn advection_follows_characteristics() {
        // V(t, x) = x + (T − t) for f ≡ 1, g = x
        let p = scalar_problem(1.0, 0.0, StateBox::cube(1, -6.0, 6.0));
        let g = TerminalCondition::new(
            TerminalFn::Custom {
                label: "x".into(),
                eval: Arc::new(|x: &[f64]| x[0]),
            },
            sensors(1),
        )
        .unwrap();
        let mut errs = Vec::new();
        for h in [0.1, 0.05] {
            let spec = GridSpec::new(&p.domain, h, 1.0, 1.0, 1.0).unwrap();
            let v = solve_linear_pde(&p, &PolicyHandle::zero(&p), &g, &spec, 1.0).unwrap();
            let mut e: f64 = 0.0;
            for (n, x) in spec.nodes().iter().enumerate() {
                if x[0].abs() <= 1.0 {
                    e = e.max((v.initial_slice()[n] - (x[0] + 1.0)).abs());
                }
            }
            errs.push(e);
        }
        assert!(errs[0] < 1e-9 && errs[1] < 1e-9, "{errs:?}");
    }

    #[test]
    fn interpolation_reproduces_nodes_and_linear_data() {
        let p = scalar_problem(0.0, 1.0, StateBox::cube(1, -1.0, 1.0));
        let g = TerminalCondition::new(TerminalFn::constant(0.0), sensors(1)).unwrap();
        let spec = GridSpec::new(&p.domain, 0.1, 1.0, 0.0, 1.0).unwrap();
        let v = solve_linear_pde(&p, &PolicyHandle::zero(&p), &g, &spec, 1.0).unwrap();
        let t = 0.37;
        assert!((v.value(t, &[0.123]).unwrap() - (1.0 - t)).abs() < 1e-12);
        assert!((v.value(0.0, &[5.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slab_round_trip() {
        let p = scalar_problem(0.0, 1.0, StateBox::cube(1, -1.0, 1.0));
        let g = TerminalCondition::new(TerminalFn::constant(0.0), sensors(1)).unwrap();
        let spec = GridSpec::new(&p.domain, 0.1, 1.0, 0.0, 1.0).unwrap();
        let v = solve_linear_pde(&p, &PolicyHandle::zero(&p), &g, &spec, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        v.write_slab(&path).unwrap();
        let back = GridField::read_slab(&path).unwrap();
        assert_eq!(back.spec(), v.spec());
        assert_eq!(back.values(), v.values());
    }

    #[test]
    fn hopf_lax_examples() {
        assert!((hopf_lax_vehicle(0.0, &[-1.5, -0.5], 1.0) - (2.5f64.sqrt() - 1.0)).abs() < 1e-15);
        assert_eq!(hopf_lax_vehicle(0.0, &[0.3, 0.4], 1.0), 0.0);
        assert_eq!(hopf_lax_vehicle(1.0, &[3.0, 4.0], 1.0), 5.0);
    }
}
