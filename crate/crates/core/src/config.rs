//! Run configuration, read from TOML with dotted sections:
//!
//! ```toml
//! problem = "vehicle2d"
//! deterministic = true
//!
//! [scheme]
//! h = 0.05
//! viscosity = 1.0
//! iterations = 5
//!
//! [network]
//! latent = 64
//!
//! [training]
//! epochs = 2000
//!
//! [terminal]
//! family = ["|x|"]
//! ```
//!
//! Omitted keys take the desk-scale defaults of the chosen problem only
//! when built through [`RunConfig::desk_scale`]; a file is parsed over
//! those defaults by [`RunConfig::from_toml_str`]. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench;
use crate::deeponet::{NetworkConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::ocp::{ArgminConfig, ControlProblem, TerminalFn};
use crate::policy::IterationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub h: f64,
    pub viscosity: f64,
    pub iterations: usize,
    /// Overrides the problem's horizon.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "yes")]
    pub strict_monotonicity: bool,
    #[serde(default)]
    pub argmin: ArgminConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    /// Training terminal functions, e.g. `"0.3 + 0.1*|x|^2"`.
    pub family: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Start the inner sums of `ε(t)` at `m = 1` instead of `m = 2`.
    pub include_m1: bool,
    /// Rollout step for trajectory synthesis; `T/100` when unset.
    pub rollout_dt: Option<f64>,
    pub monotonicity_probes: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            include_m1: false,
            rollout_dt: None,
            monotonicity_probes: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; a fresh directory under the output root when unset.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub threads: Option<usize>,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainConfig,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Settings that finish in minutes on one core.
    pub fn desk_scale(problem: &str) -> Result<Self> {
        let bp = bench::build(problem)?;
        let d = bp.problem.state_dim;
        let mut cfg = Self::paper_scale(problem)?;
        match bp.id {
            "vehicle2d" => {
                cfg.scheme.h = 0.05;
                cfg.network = NetworkConfig {
                    sensors: 100,
                    latent: 32,
                    branch_hidden: vec![32, 32],
                    trunk_hidden: vec![32, 32],
                    ..NetworkConfig::default()
                };
                cfg.training = TrainConfig {
                    epochs: 2000,
                    interior_points: 1000,
                    terminal_points: 500,
                    lr: 2e-3,
                    lr_final: Some(2e-4),
                    ..TrainConfig::default()
                };
            }
            _ => {
                cfg.network = NetworkConfig {
                    sensors: 100,
                    latent: 32,
                    branch_hidden: vec![32, 32],
                    trunk_hidden: vec![32, 32],
                    shift_equivariant: true,
                    ..NetworkConfig::default()
                };
                cfg.training = TrainConfig {
                    epochs: if d > 5 { 1000 } else { 3000 },
                    interior_points: if d > 5 { 500 } else { 1000 },
                    terminal_points: 500,
                    lr: 2e-3,
                    lr_final: Some(2e-4),
                    ..TrainConfig::default()
                };
            }
        }
        Ok(cfg)
    }

    /// Scheme constants of the reference experiments with the default
    /// network and training schedule.
    pub fn paper_scale(problem: &str) -> Result<Self> {
        let bp = bench::build(problem)?;
        let pd = bp.defaults;
        Ok(Self {
            problem: bp.id.to_string(),
            deterministic: true,
            threads: None,
            scheme: SchemeConfig {
                h: pd.h,
                viscosity: pd.viscosity,
                iterations: pd.iterations,
                horizon: None,
                // the reference 10-d run uses N = 1 below the bound
                strict_monotonicity: pd.viscosity >= (bp.problem.f_sup_norm / 2.0).max(1.0),
                argmin: ArgminConfig::Auto,
            },
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            terminal: TerminalConfig {
                family: bp.training_family.iter().map(|g| g.to_string()).collect(),
            },
            diagnostics: DiagnosticsConfig::default(),
            output: OutputConfig::default(),
        })
    }

    /// Parses `text` and validates it. Missing sections are errors except
    /// those with defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let path = unknown_field_path(&msg).unwrap_or_else(|| "<config>".to_string());
            Error::config(path, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Checks every field; the error names the first offending key.
    pub fn validate(&self) -> Result<()> {
        bench::build(&self.problem).map_err(|_| Error::config("problem", format!("unknown problem `{}`", self.problem)))?;
        let s = &self.scheme;
        if !(s.h > 0.0 && s.h < 1.0) {
            return Err(Error::config("scheme.h", format!("{} is not in (0, 1)", s.h)));
        }
        if !(s.viscosity.is_finite() && s.viscosity > 0.0) {
            return Err(Error::config("scheme.viscosity", "must be positive"));
        }
        if let Some(t) = s.horizon {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config("scheme.horizon", "must be positive"));
            }
        }
        if let ArgminConfig::GridScan { points_per_dim: Some(0) } = s.argmin {
            return Err(Error::config("scheme.argmin", "grid scan needs at least one point"));
        }
        let n = &self.network;
        if n.sensors == 0 {
            return Err(Error::config("network.sensors", "must be positive"));
        }
        if n.latent == 0 {
            return Err(Error::config("network.latent", "must be positive"));
        }
        if n.branch_hidden.contains(&0) {
            return Err(Error::config("network.branch_hidden", "widths must be positive"));
        }
        if n.trunk_hidden.contains(&0) {
            return Err(Error::config("network.trunk_hidden", "widths must be positive"));
        }
        let t = &self.training;
        if t.interior_points == 0 && t.terminal_points == 0 {
            return Err(Error::config("training.interior_points", "no collocation points"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::config("training.lr", "must be positive"));
        }
        if let Some(l) = t.lr_final {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config("training.lr_final", "must be positive"));
            }
        }
        if !(t.alpha1 >= 0.0 && t.alpha1.is_finite()) {
            return Err(Error::config("training.alpha1", "must be nonnegative"));
        }
        if !(t.alpha2 >= 0.0 && t.alpha2.is_finite()) {
            return Err(Error::config("training.alpha2", "must be nonnegative"));
        }
        if t.alpha1 + t.alpha2 == 0.0 {
            return Err(Error::config("training.alpha1", "both loss weights are zero"));
        }
        if !(t.divergence_threshold > 0.0) {
            return Err(Error::config("training.divergence_threshold", "must be positive"));
        }
        if self.terminal.family.is_empty() {
            return Err(Error::config("terminal.family", "at least one terminal function is required"));
        }
        for (i, g) in self.terminal.family.iter().enumerate() {
            TerminalFn::parse(g).map_err(|e| Error::config(format!("terminal.family[{i}]"), e.to_string()))?;
        }
        if let Some(dt) = self.diagnostics.rollout_dt {
            if !(dt > 0.0) {
                return Err(Error::config("diagnostics.rollout_dt", "must be positive"));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be positive"));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<ControlProblem> {
        let mut p = bench::build(&self.problem)?.problem;
        if let Some(t) = self.scheme.horizon {
            p.horizon = t;
        }
        Ok(p)
    }

    pub fn terminal_family(&self) -> Result<Vec<TerminalFn>> {
        self.terminal.family.iter().map(|g| TerminalFn::parse(g)).collect()
    }

    pub fn iteration_config(&self) -> IterationConfig {
        IterationConfig {
            h: self.scheme.h,
            viscosity: self.scheme.viscosity,
            iterations: self.scheme.iterations,
            strict_monotonicity: self.scheme.strict_monotonicity,
            argmin: self.scheme.argmin,
            network: self.network.clone(),
            training: self.training.clone(),
        }
    }
}

/// Extracts the field name from serde's "unknown field `x`" messages.
fn unknown_field_path(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}
