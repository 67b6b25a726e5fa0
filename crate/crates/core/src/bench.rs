//! Benchmark instances: the unit-speed vehicle and two constrained LQR
//! problems with fixed system matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{ControlProblem, ControlSet, LqrData, TerminalFn};
use crate::sampling::StateBox;

pub const IDS: [&str; 3] = ["vehicle2d", "lqr5x3", "lqr10x5"];

#[rustfmt::skip]
pub const LQR5_A: [[f64; 5]; 5] = [
    [0.08, 0.01, 0.01, 0.15, 0.05],
    [0.16, 0.16, 0.15, 0.18, 0.16],
    [0.14, 0.17, 0.07, 0.08, 0.12],
    [0.12, 0.15, 0.11, 0.18, 0.02],
    [0.12, 0.08, 0.13, 0.1,  0.09],
];

#[rustfmt::skip]
pub const LQR5_B: [[f64; 3]; 5] = [
    [0.0,  0.05, 0.06],
    [0.07, 0.01, 0.04],
    [0.02, 0.0,  0.1 ],
    [0.09, 0.08, 0.08],
    [0.01, 0.07, 0.05],
];

#[rustfmt::skip]
pub const LQR10_A: [[f64; 10]; 10] = [
    [0.00, 0.15, 0.01, 0.11, 0.03, 0.19, 0.06, 0.07, 0.14, 0.07],
    [0.06, 0.10, 0.14, 0.09, 0.16, 0.01, 0.15, 0.17, 0.09, 0.11],
    [0.11, 0.02, 0.10, 0.19, 0.04, 0.14, 0.18, 0.01, 0.10, 0.16],
    [0.15, 0.13, 0.01, 0.17, 0.04, 0.06, 0.16, 0.03, 0.08, 0.15],
    [0.02, 0.19, 0.19, 0.17, 0.13, 0.15, 0.00, 0.17, 0.08, 0.17],
    [0.07, 0.00, 0.02, 0.14, 0.10, 0.08, 0.13, 0.07, 0.03, 0.05],
    [0.00, 0.15, 0.16, 0.12, 0.17, 0.06, 0.05, 0.14, 0.18, 0.10],
    [0.02, 0.10, 0.14, 0.12, 0.17, 0.01, 0.15, 0.08, 0.10, 0.17],
    [0.04, 0.03, 0.07, 0.02, 0.13, 0.10, 0.01, 0.13, 0.15, 0.09],
    [0.00, 0.12, 0.07, 0.01, 0.09, 0.15, 0.06, 0.05, 0.08, 0.05],
];

#[rustfmt::skip]
pub const LQR10_B: [[f64; 5]; 10] = [
    [0.02, 0.05, 0.09, 0.08, 0.06],
    [0.05, 0.06, 0.10, 0.10, 0.01],
    [0.06, 0.01, 0.05, 0.04, 0.05],
    [0.02, 0.09, 0.00, 0.03, 0.07],
    [0.07, 0.09, 0.02, 0.05, 0.05],
    [0.00, 0.02, 0.03, 0.05, 0.03],
    [0.04, 0.07, 0.03, 0.01, 0.03],
    [0.10, 0.05, 0.02, 0.05, 0.03],
    [0.08, 0.06, 0.08, 0.06, 0.09],
    [0.00, 0.00, 0.06, 0.04, 0.05],
];

/// Scheme constants used for each benchmark in the reference experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaperDefaults {
    pub h: f64,
    pub iterations: usize,
    pub viscosity: f64,
    pub horizon: f64,
}

/// A catalog entry: problem, defaults and training terminal functions.
#[derive(Debug, Clone)]
pub struct BenchProblem {
    pub id: &'static str,
    pub problem: ControlProblem,
    pub defaults: PaperDefaults,
    pub training_family: Vec<TerminalFn>,
    /// Terminal function used for single-`g` runs.
    pub reference_terminal: TerminalFn,
}

fn array<const R: usize, const C: usize>(m: &[[f64; C]; R]) -> Array2<f64> {
    Array2::from_shape_fn((R, C), |(i, j)| m[i][j])
}

fn canonical(id: &str) -> Result<&'static str> {
    IDS.iter()
        .copied()
        .find(|k| *k == id)
        .ok_or_else(|| Error::UnknownProblem(id.to_string()))
}

pub fn paper_defaults(id: &str) -> Result<PaperDefaults> {
    Ok(match canonical(id)? {
        "vehicle2d" => PaperDefaults {
            h: 0.005,
            iterations: 5,
            viscosity: 1.0,
            horizon: 1.0,
        },
        _ => PaperDefaults {
            h: 0.005,
            iterations: 3,
            viscosity: 1.0,
            horizon: 0.5,
        },
    })
}

/// `g_k(x) = 0.3 + 0.1·k·‖x‖²`, `k = 1, 2, 3`.
pub fn lqr_training_family() -> Vec<TerminalFn> {
    [0.1, 0.2, 0.3].into_iter().map(|s| TerminalFn::quadratic(0.3, s)).collect()
}

/// LQR data for `lqr5x3` or `lqr10x5`.
pub fn lqr_data(id: &str) -> Result<LqrData> {
    let (a, b) = match canonical(id)? {
        "lqr5x3" => (array(&LQR5_A), array(&LQR5_B)),
        "lqr10x5" => (array(&LQR10_A), array(&LQR10_B)),
        other => return Err(Error::UnknownProblem(format!("{other} is not an LQR problem"))),
    };
    let (d, m) = (a.nrows(), b.ncols());
    Ok(LqrData {
        a,
        b,
        q: Array2::eye(d),
        r: Array2::eye(m),
    })
}

pub fn build(id: &str) -> Result<BenchProblem> {
    let id = canonical(id)?;
    let defaults = paper_defaults(id)?;
    match id {
        "vehicle2d" => Ok(BenchProblem {
            id,
            problem: ControlProblem::vehicle(defaults.horizon, StateBox::cube(2, -2.0, 2.0))?,
            defaults,
            training_family: vec![TerminalFn::norm()],
            reference_terminal: TerminalFn::norm(),
        }),
        _ => {
            let data = lqr_data(id)?;
            let (d, m) = (data.a.nrows(), data.b.ncols());
            let problem = ControlProblem::lqr(
                id,
                data,
                ControlSet::cube(m, -1.0 / 3.0, 0.5),
                defaults.horizon,
                StateBox::cube(d, -1.0, 1.0),
            )?;
            Ok(BenchProblem {
                id,
                problem,
                defaults,
                training_family: lqr_training_family(),
                reference_terminal: TerminalFn::quadratic(0.0, 0.45),
            })
        }
    }
}

/// One-line descriptions for listing.
pub fn catalog() -> Vec<(&'static str, String)> {
    IDS.iter()
        .map(|id| {
            let desc = match *id {
                "vehicle2d" => "unit-speed vehicle, d = 2, m = 1, U = [-pi, pi], T = 1, g = |x|",
                "lqr5x3" => "constrained LQR, d = 5, m = 3, U = [-1/3, 1/2]^3, T = 0.5",
                _ => "constrained LQR, d = 10, m = 5, U = [-1/3, 1/2]^5, T = 0.5",
            };
            (*id, desc.to_string())
        })
        .collect()
}
