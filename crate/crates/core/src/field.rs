//! Space-time value functions `V(t, x)`.

use std::sync::Arc;

use crate::deeponet::BoundOperator;
use crate::error::{Error, Result};

/// Step used for the central time difference in the default `value_dt`.
const DT_FD_STEP: f64 = 1e-6;

/// A scalar field over `[0, T] × ℝᵈ`.
pub trait ValueField: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, t: f64, x: &[f64]) -> Result<f64>;

    /// `(V, ∂tV)`. The default uses a central difference in `t`.
    fn value_dt(&self, t: f64, x: &[f64]) -> Result<(f64, f64)> {
        let v = self.value(t, x)?;
        let vp = self.value(t + DT_FD_STEP, x)?;
        let vm = self.value(t - DT_FD_STEP, x)?;
        Ok((v, (vp - vm) / (2.0 * DT_FD_STEP)))
    }

    /// Values at `(ts[i], xs[i])`.
    fn values(&self, ts: &[f64], xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if ts.len() != xs.len() {
            return Err(Error::ShapeMismatch("times and states differ in count".into()));
        }
        ts.iter().zip(xs).map(|(t, x)| self.value(*t, x)).collect()
    }

    /// Set when the field is an operator network bound to a terminal
    /// condition; lets callers share trunk evaluations across fields.
    fn as_bound_operator(&self) -> Option<&BoundOperator> {
        None
    }
}

type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Field given by closures, with an optional exact time derivative.
#[derive(Clone)]
pub struct FnField {
    dim: usize,
    value: ScalarFn,
    dt: Option<ScalarFn>,
}

impl FnField {
    pub fn new(dim: usize, value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            dt: None,
        }
    }

    pub fn with_dt(mut self, dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.dt = Some(Arc::new(dt));
        self
    }
}

impl ValueField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok((self.value)(t, x))
    }

    fn value_dt(&self, t: f64, x: &[f64]) -> Result<(f64, f64)> {
        match &self.dt {
            Some(dt) => Ok(((self.value)(t, x), dt(t, x))),
            None => {
                let v = (self.value)(t, x);
                let vp = (self.value)(t + DT_FD_STEP, x);
                let vm = (self.value)(t - DT_FD_STEP, x);
                Ok((v, (vp - vm) / (2.0 * DT_FD_STEP)))
            }
        }
    }
}
