//! Direct transcription: forward-Euler states, controls as the only
//! decision variables, solved by projected gradient descent with Armijo
//! backtracking from several seeded starts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::ocp::{wrap_angle, ControlProblem, ControlSet, TerminalCondition};
use crate::sampling;

#[derive(Debug, Clone)]
pub struct TranscriptionProblem {
    pub problem: ControlProblem,
    pub g: TerminalCondition,
    pub x0: Vec<f64>,
    /// Number of Euler steps `ℓ`.
    pub steps: usize,
}

impl TranscriptionProblem {
    pub fn new(problem: ControlProblem, g: TerminalCondition, x0: Vec<f64>, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("transcription needs at least one step".into()));
        }
        if x0.len() != problem.state_dim {
            return Err(Error::ShapeMismatch(format!(
                "initial state of length {} for d = {}",
                x0.len(),
                problem.state_dim
            )));
        }
        Ok(Self {
            problem,
            g,
            x0,
            steps,
        })
    }

    pub fn dt(&self) -> f64 {
        self.problem.horizon / self.steps as f64
    }

    fn check_controls(&self, controls: &[Vec<f64>]) -> Result<()> {
        if controls.len() != self.steps || controls.iter().any(|u| u.len() != self.problem.control_dim) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} controls of length {}",
                self.steps, self.problem.control_dim
            )));
        }
        Ok(())
    }

    /// States `x₀..x_ℓ`, stage costs `L(t_k,x_k,u_k)·Δt` and the objective.
    pub fn simulate(&self, controls: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
        self.check_controls(controls)?;
        let dt = self.dt();
        let mut states = Vec::with_capacity(self.steps + 1);
        let mut stage = Vec::with_capacity(self.steps);
        let mut x = self.x0.clone();
        let mut obj = 0.0;
        for (k, u) in controls.iter().enumerate() {
            let t = k as f64 * dt;
            let c = self.problem.running_cost(t, &x, u) * dt;
            let f = self.problem.dynamics(t, &x, u);
            states.push(x.clone());
            stage.push(c);
            obj += c;
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += dt * fi;
            }
        }
        obj += self.g.eval(&x)?;
        states.push(x);
        Ok((states, stage, obj))
    }

    pub fn objective(&self, controls: &[Vec<f64>]) -> Result<f64> {
        Ok(self.simulate(controls)?.2)
    }
}

/// Exact gradient of the transcribed objective by the discrete adjoint
///
/// ```text
/// λ_ℓ = ∇g(x_ℓ)
/// ∂J/∂u_k = Δt·L_u + Δt·f_uᵀ λ_{k+1}
/// λ_k = Δt·L_x + λ_{k+1} + Δt·f_xᵀ λ_{k+1}
/// ```
pub fn adjoint_gradient(tp: &TranscriptionProblem, controls: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (states, _, _) = tp.simulate(controls)?;
    let dt = tp.dt();
    let d = tp.problem.state_dim;
    let m = tp.problem.control_dim;
    let mut lambda = tp.g.gradient(&states[tp.steps])?;
    let mut grad = vec![vec![0.0; m]; tp.steps];
    for k in (0..tp.steps).rev() {
        let t = k as f64 * dt;
        let j = tp.problem.jacobians(t, &states[k], &controls[k]);
        for c in 0..m {
            let mut acc = j.lu[c];
            for i in 0..d {
                acc += j.fu[[i, c]] * lambda[i];
            }
            grad[k][c] = dt * acc;
        }
        let mut next = vec![0.0; d];
        for c in 0..d {
            let mut acc = j.lx[c];
            for i in 0..d {
                acc += j.fx[[i, c]] * lambda[i];
            }
            next[c] = lambda[c] + dt * acc;
        }
        lambda = next;
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub starts: usize,
    pub max_iterations: usize,
    /// Tolerance on the projected-gradient norm.
    pub tol: f64,
    pub armijo: f64,
    pub initial_step: f64,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            starts: 8,
            max_iterations: 5000,
            tol: 1e-8,
            armijo: 1e-4,
            initial_step: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySolution {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after every accepted iteration of the returned start.
    pub history: Vec<f64>,
}

impl TrajectorySolution {
    pub fn write_csv(&self, path: &Path, dt: f64, config_hash: &str) -> Result<()> {
        let d = self.states.first().map_or(0, Vec::len);
        let m = self.controls.first().map_or(0, Vec::len);
        let mut header = vec!["k".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.push("stage_cost".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = self
            .states
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let mut r = vec![k.to_string(), io::num(k as f64 * dt)];
                r.extend(x.iter().map(|v| io::num(*v)));
                match self.controls.get(k) {
                    Some(u) => {
                        r.extend(u.iter().map(|v| io::num(*v)));
                        r.push(io::num(self.stage_costs[k]));
                    }
                    None => {
                        r.extend(std::iter::repeat_n(String::new(), m));
                        r.push(String::new());
                    }
                }
                r
            })
            .collect();
        io::write_csv(path, &header, &rows, config_hash)
    }
}

fn project_all(set: &ControlSet, u: &[Vec<f64>]) -> Vec<Vec<f64>> {
    u.iter().map(|v| set.project(v)).collect()
}

/// `‖u − P(u − ∇J)‖`, with angle differences reduced modulo `2π`.
fn projected_gradient_norm(set: &ControlSet, u: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (uk, gk) in u.iter().zip(g) {
        let step: Vec<f64> = uk.iter().zip(gk).map(|(a, b)| a - b).collect();
        let p = set.project(&step);
        for (a, b) in uk.iter().zip(&p) {
            let diff = match set {
                ControlSet::AngleSet => wrap_angle(a - b),
                _ => a - b,
            };
            acc += diff * diff;
        }
    }
    acc.sqrt()
}

fn initial_controls(tp: &TranscriptionProblem, start: usize, seed: u64) -> Vec<Vec<f64>> {
    let set = &tp.problem.control_set;
    if start == 0 {
        return vec![set.project(&vec![0.0; tp.problem.control_dim]); tp.steps];
    }
    let mut rng = sampling::rng(sampling::derive_seed(seed, start as u64));
    let bx = set.as_box();
    (0..tp.steps).map(|_| sampling::uniform_in_box(&bx, &mut rng)).collect()
}

fn pgd_from(tp: &TranscriptionProblem, mut u: Vec<Vec<f64>>, cfg: &PgdConfig) -> Result<TrajectorySolution> {
    let set = &tp.problem.control_set;
    u = project_all(set, &u);
    let mut obj = tp.objective(&u)?;
    let mut history = vec![obj];
    let mut step = cfg.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let g = adjoint_gradient(tp, &u)?;
        if projected_gradient_norm(set, &u, &g) < cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut accepted = false;
        while step > 1e-20 {
            let cand: Vec<Vec<f64>> = u
                .iter()
                .zip(&g)
                .map(|(uk, gk)| {
                    let raw: Vec<f64> = uk.iter().zip(gk).map(|(a, b)| a - step * b).collect();
                    set.project(&raw)
                })
                .collect();
            // directional term g·(u' − u), with wrapped angle differences
            let mut slope = 0.0;
            for ((ck, uk), gk) in cand.iter().zip(&u).zip(&g) {
                for ((c, a), b) in ck.iter().zip(uk).zip(gk) {
                    let diff = match set {
                        ControlSet::AngleSet => wrap_angle(c - a),
                        _ => c - a,
                    };
                    slope += b * diff;
                }
            }
            let cobj = tp.objective(&cand)?;
            if cobj <= obj + cfg.armijo * slope && cobj <= obj {
                u = cand;
                obj = cobj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent at machine-level step sizes
            converged = true;
            break;
        }
        history.push(obj);
        step = (step * 2.0).min(1e6);
    }
    let (states, stage_costs, objective) = tp.simulate(&u)?;
    Ok(TrajectorySolution {
        states,
        controls: u,
        stage_costs,
        objective,
        converged,
        iterations,
        history,
    })
}

/// Best of `cfg.starts` projected-gradient runs; the first start is
/// `u ≡ P(0)`, the others uniform in `U`.
pub fn transcribe_and_solve(tp: &TranscriptionProblem, cfg: &PgdConfig) -> Result<TrajectorySolution> {
    if cfg.starts == 0 {
        return Err(Error::InvalidArgument("at least one start is required".into()));
    }
    let runs: Vec<Result<TrajectorySolution>> = (0..cfg.starts)
        .into_par_iter()
        .map(|s| pgd_from(tp, initial_controls(tp, s, cfg.seed), cfg))
        .collect();
    let mut best: Option<TrajectorySolution> = None;
    for r in runs {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    if !best.converged {
        log::warn!(
            "transcription did not converge in {} iterations; objective {}",
            cfg.max_iterations,
            best.objective
        );
    }
    Ok(best)
}
