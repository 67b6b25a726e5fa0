//! Central-difference gradient `∇ʰ` and discrete Laplacian `Δʰ`.
//!
//! ```text
//! ∇ᵢʰ f(x) = (f(x + h eᵢ) − f(x − h eᵢ)) / (2h)
//! Δʰ f(x)  = Σᵢ (f(x + h eᵢ) − 2 f(x) + f(x − h eᵢ)) / h²
//! ```
//!
//! Spatial derivatives of value functions are always taken with these
//! stencils, never by differentiating a network.

use std::convert::Infallible;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stencil spacing `h ∈ (0, 1)` in dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StencilConfig {
    h: f64,
    dim: usize,
}

impl StencilConfig {
    pub fn new(h: f64, dim: usize) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::InvalidArgument(format!("stencil spacing h = {h} not in (0, 1)")));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("stencil dimension must be positive".into()));
        }
        Ok(Self { h, dim })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn check_len(x: &[f64], cfg: &StencilConfig) {
    assert_eq!(x.len(), cfg.dim, "point dimension does not match stencil dimension");
}

/// `∇ʰ` with a fallible field; exactly `2d` evaluations.
pub fn try_nabla_h<E>(
    mut field: impl FnMut(&[f64]) -> std::result::Result<f64, E>,
    x: &[f64],
    cfg: &StencilConfig,
) -> std::result::Result<Vec<f64>, E> {
    check_len(x, cfg);
    let h = cfg.h;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(cfg.dim);
    for i in 0..cfg.dim {
        probe[i] = x[i] + h;
        let fp = field(&probe)?;
        probe[i] = x[i] - h;
        let fm = field(&probe)?;
        probe[i] = x[i];
        grad.push(central(fp, fm, h));
    }
    Ok(grad)
}

/// `∇ʰ` of an infallible field.
pub fn nabla_h(mut field: impl FnMut(&[f64]) -> f64, x: &[f64], cfg: &StencilConfig) -> Vec<f64> {
    match try_nabla_h(|p| Ok::<_, Infallible>(field(p)), x, cfg) {
        Ok(g) => g,
        Err(never) => match never {},
    }
}

/// `Δʰ` with a fallible field; exactly `2d + 1` evaluations.
pub fn try_laplace_h<E>(
    mut field: impl FnMut(&[f64]) -> std::result::Result<f64, E>,
    x: &[f64],
    cfg: &StencilConfig,
) -> std::result::Result<f64, E> {
    check_len(x, cfg);
    let h = cfg.h;
    let center = field(x)?;
    let mut probe = x.to_vec();
    let mut acc = 0.0;
    for i in 0..cfg.dim {
        probe[i] = x[i] + h;
        let fp = field(&probe)?;
        probe[i] = x[i] - h;
        let fm = field(&probe)?;
        probe[i] = x[i];
        acc += second(fp, center, fm, h);
    }
    Ok(acc)
}

pub fn laplace_h(mut field: impl FnMut(&[f64]) -> f64, x: &[f64], cfg: &StencilConfig) -> f64 {
    match try_laplace_h(|p| Ok::<_, Infallible>(field(p)), x, cfg) {
        Ok(v) => v,
        Err(never) => match never {},
    }
}

#[inline]
pub(crate) fn central(fp: f64, fm: f64, h: f64) -> f64 {
    (fp - fm) / (2.0 * h)
}

#[inline]
pub(crate) fn second(fp: f64, center: f64, fm: f64, h: f64) -> f64 {
    (fp - 2.0 * center + fm) / (h * h)
}

/// The `2d` stencil points of every input point, point-major, then by
/// coordinate, `+h` before `−h`.
pub fn stencil_points(points: &[Vec<f64>], cfg: &StencilConfig) -> Vec<Vec<f64>> {
    let h = cfg.h;
    let mut out = Vec::with_capacity(points.len() * 2 * cfg.dim);
    for x in points {
        check_len(x, cfg);
        for i in 0..cfg.dim {
            let mut p = x.clone();
            p[i] = x[i] + h;
            out.push(p.clone());
            p[i] = x[i] - h;
            out.push(p);
        }
    }
    out
}

/// Gradients from values laid out as in [`stencil_points`].
pub fn gradients_from_stencil_values(values: &[f64], n_points: usize, cfg: &StencilConfig) -> Vec<Vec<f64>> {
    assert_eq!(values.len(), n_points * 2 * cfg.dim);
    values
        .chunks_exact(2 * cfg.dim)
        .map(|c| c.chunks_exact(2).map(|pm| central(pm[0], pm[1], cfg.h)).collect())
        .collect()
}

/// `∇ʰ` at many points with one batched evaluation of all `2d·n` stencil
/// points.
pub fn try_nabla_h_batch<E>(
    field: impl FnOnce(&[Vec<f64>]) -> std::result::Result<Vec<f64>, E>,
    points: &[Vec<f64>],
    cfg: &StencilConfig,
) -> std::result::Result<Vec<Vec<f64>>, E> {
    let probes = stencil_points(points, cfg);
    let values = field(&probes)?;
    assert_eq!(values.len(), probes.len(), "batched field returned the wrong number of values");
    Ok(gradients_from_stencil_values(&values, points.len(), cfg))
}

pub fn nabla_h_batch(
    field: impl FnOnce(&[Vec<f64>]) -> Vec<f64>,
    points: &[Vec<f64>],
    cfg: &StencilConfig,
) -> Vec<Vec<f64>> {
    match try_nabla_h_batch(|p| Ok::<_, Infallible>(field(p)), points, cfg) {
        Ok(g) => g,
        Err(never) => match never {},
    }
}

/// Stencil together with the viscosity constant `N` of the semi-discrete
/// scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViscousScheme {
    pub stencil: StencilConfig,
    pub viscosity: f64,
}

impl ViscousScheme {
    pub fn new(h: f64, dim: usize, viscosity: f64) -> Result<Self> {
        if !(viscosity.is_finite() && viscosity >= 0.0) {
            return Err(Error::InvalidArgument(format!("viscosity N = {viscosity} must be nonnegative")));
        }
        Ok(Self {
            stencil: StencilConfig::new(h, dim)?,
            viscosity,
        })
    }

    pub fn h(&self) -> f64 {
        self.stencil.h
    }

    pub fn dim(&self) -> usize {
        self.stencil.dim
    }

    /// `∇ʰV·f + NhΔʰV` from the center value and the `2d` neighbor values
    /// laid out as in [`stencil_points`].
    pub fn spatial_term(&self, center: f64, neighbors: &[f64], f: &[f64]) -> f64 {
        let h = self.stencil.h;
        let mut adv = 0.0;
        let mut lap = 0.0;
        for (pm, fj) in neighbors.chunks_exact(2).zip(f) {
            adv += central(pm[0], pm[1], h) * fj;
            lap += second(pm[0], center, pm[1], h);
        }
        adv + self.viscosity * h * lap
    }

    /// Weights `(w₊, w₋)` of `V(x ± h eⱼ)` in [`Self::spatial_term`] for
    /// velocity component `fj`.
    pub fn neighbor_weights(&self, fj: f64) -> (f64, f64) {
        let h = self.stencil.h;
        let diff = self.viscosity / h;
        (fj / (2.0 * h) + diff, -fj / (2.0 * h) + diff)
    }

    /// Weight of the center value in [`Self::spatial_term`].
    pub fn center_weight(&self) -> f64 {
        -2.0 * self.stencil.dim as f64 * self.viscosity / self.stencil.h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq_norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn gradient_examples() {
        let cfg = StencilConfig::new(0.1, 2).unwrap();
        let g = nabla_h(sq_norm, &[1.0, 2.0], &cfg);
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
        assert_eq!(nabla_h(|_| 3.5, &[0.2, -0.7], &cfg), vec![0.0, 0.0]);
        let cfg1 = StencilConfig::new(0.1, 1).unwrap();
        let g = nabla_h(|x| x[0].powi(3), &[1.0], &cfg1);
        let expected = (1.1f64.powi(3) - 0.9f64.powi(3)) / 0.2;
        assert!((g[0] - expected).abs() < 1e-13);
        assert!((g[0] - 3.01).abs() < 1e-12);
    }

    #[test]
    fn laplacian_examples() {
        let cfg = StencilConfig::new(0.37, 3).unwrap();
        assert!((laplace_h(sq_norm, &[0.3, -1.2, 2.5], &cfg) - 6.0).abs() < 1e-12);
        assert_eq!(laplace_h(|_| -2.0, &[0.3, -1.2, 2.5], &cfg), 0.0);
        let cfg1 = StencilConfig::new(0.1, 1).unwrap();
        let v = laplace_h(|x| x[0].powi(4), &[1.0], &cfg1);
        assert!((v - 12.02).abs() < 1e-10);
    }

    #[test]
    fn evaluation_counts() {
        let cfg = StencilConfig::new(0.2, 4).unwrap();
        let mut calls = 0;
        nabla_h(|x| { calls += 1; x[0] }, &[0.0; 4], &cfg);
        assert_eq!(calls, 8);
        calls = 0;
        laplace_h(|x| { calls += 1; x[0] }, &[0.0; 4], &cfg);
        assert_eq!(calls, 9);
        let mut batch_calls = 0;
        let mut evaluated = 0;
        nabla_h_batch(
            |pts| {
                batch_calls += 1;
                evaluated += pts.len();
                pts.iter().map(|p| p[1]).collect()
            },
            &[vec![0.0; 4], vec![1.0; 4], vec![2.0; 4]],
            &cfg,
        );
        assert_eq!((batch_calls, evaluated), (1, 24));
    }

    #[test]
    fn second_order_convergence_on_sine() {
        let x = [0.7];
        let exact = 0.7f64.cos();
        let err = |h: f64| {
            let cfg = StencilConfig::new(h, 1).unwrap();
            (nabla_h(|p| p[0].sin(), &x, &cfg)[0] - exact).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn rejects_spacing_outside_unit_interval() {
        assert!(StencilConfig::new(0.0, 1).is_err());
        assert!(StencilConfig::new(1.0, 1).is_err());
        assert!(StencilConfig::new(1.5, 2).is_err());
    }

    #[test]
    fn fallible_fields_propagate_errors() {
        let cfg = StencilConfig::new(0.1, 2).unwrap();
        let r: std::result::Result<Vec<f64>, &str> =
            try_nabla_h(|x| if x[1] > 0.05 { Err("boom") } else { Ok(0.0) }, &[0.0, 0.0], &cfg);
        assert_eq!(r, Err("boom"));
    }

    #[test]
    fn batch_single_point_matches_pointwise() {
        let cfg = StencilConfig::new(0.05, 2).unwrap();
        let f = |x: &[f64]| (x[0] * 3.0).sin() * x[1].exp();
        let x = vec![0.3, -0.4];
        let batch = nabla_h_batch(|pts| pts.iter().map(|p| f(p)).collect(), &[x.clone()], &cfg);
        assert_eq!(batch[0], nabla_h(f, &x, &cfg));
    }
}
