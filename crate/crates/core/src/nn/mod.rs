//! Small dense networks with hand-written differentiation.
//!
//! Reverse mode gives gradients with respect to parameters. Forward mode
//! (dual numbers seeded on one input coordinate) gives the derivative of
//! the output with respect to time; the dual forward pass can itself be
//! reverse-differentiated, so losses containing `∂t` of a network are
//! trained without nesting tapes.
//!
//! Weights are stored `fan_in × fan_out` row-major and a layer computes
//! `y = x·W + b` on row vectors. The last layer has no activation.

mod adam;
mod checkpoint;
pub mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{MlpCheckpoint, MLP_FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sin,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sin => z.sin(),
        }
    }

    /// `(σ(z), σ'(z), σ''(z))`.
    #[inline]
    fn derivs(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let a = z.tanh();
                let d1 = 1.0 - a * a;
                (a, d1, -2.0 * a * d1)
            }
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Sin => {
                let (s, c) = z.sin_cos();
                (s, c, -s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sin => "sin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sin" => Ok(Activation::Sin),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer: `weight` is `fan_in × fan_out`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    seed: u64,
    layers: Vec<Dense>,
}

/// Gradient buffers shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub layers: Vec<Dense>,
    /// Number of gradient contributions accumulated since the last reset.
    pub count: usize,
}

impl ParamGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                })
                .collect(),
            count: 0,
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        self.count = 0;
    }

    /// `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &ParamGrad) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("gradient layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weight.len() != b.weight.len() || a.bias.len() != b.bias.len() {
                return Err(Error::ShapeMismatch("gradient layer shapes differ".into()));
            }
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        self.count += other.count;
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Parameter blocks in the order `W₀, b₀, W₁, b₁, …`.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn is_congruent(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.len() == l.weight.len() && g.bias.len() == l.bias.len())
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    n: usize,
    /// Input of every layer, then the network output.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an output")
    }

    pub fn rows(&self) -> usize {
        self.n
    }
}

/// Primal and tangent activations of a dual-number forward pass.
#[derive(Debug, Clone)]
pub struct DualTrace {
    n: usize,
    acts: Vec<Vec<f64>>,
    dacts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    dpre: Vec<Vec<f64>>,
}

impl DualTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an output")
    }

    pub fn tangent(&self) -> &[f64] {
        self.dacts.last().expect("trace has an output")
    }
}

impl Mlp {
    /// Glorot-uniform weights and zero biases, fully determined by `seed`.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network widths must have at least two positive entries, got {widths:?}"
            )));
        }
        let mut rng = sampling::rng(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-limit..=limit))
                        .collect(),
                    bias: vec![0.0; fan_out],
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            seed,
            layers,
        })
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a network needs at least one layer".into()));
        }
        let mut widths = vec![layers[0].fan_in];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.fan_in * l.fan_out || l.bias.len() != l.fan_out {
                return Err(Error::ShapeMismatch(format!("layer {i} has inconsistent buffers")));
            }
            if l.fan_in != *widths.last().unwrap() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs but previous layer gives {}",
                    l.fan_in,
                    widths.last().unwrap()
                )));
            }
            widths.push(l.fan_out);
        }
        Ok(Self {
            widths,
            activation,
            seed,
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    fn check_batch(&self, x: &[f64]) -> Result<usize> {
        let k = self.input_dim();
        if x.len() % k != 0 {
            return Err(Error::ShapeMismatch(format!(
                "batch of length {} is not a multiple of the input width {k}",
                x.len()
            )));
        }
        Ok(x.len() / k)
    }

    /// Forward pass of a single input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} for a network with input width {}",
                input.len(),
                self.input_dim()
            )));
        }
        self.forward_batch(input)
    }

    /// Forward pass of `n` row-major inputs; returns `n × out`.
    pub fn forward_batch(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_batch(x)?;
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; n * l.fan_out];
            kernels::affine(&cur, &l.weight, &l.bias, l.fan_in, l.fan_out, &mut next);
            if i != last {
                let act = self.activation;
                next.iter_mut().for_each(|z| *z = act.apply(*z));
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_traced(&self, x: &[f64]) -> Result<Trace> {
        let n = self.check_batch(x)?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; n * l.fan_out];
            kernels::affine(&acts[i], &l.weight, &l.bias, l.fan_in, l.fan_out, &mut z);
            let a = if i != last {
                let act = self.activation;
                z.iter().map(|v| act.apply(*v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(Trace { n, acts, pre })
    }

    /// Accumulates `∂(Σ upstream·output)/∂θ` into `grad`; returns the
    /// gradient with respect to the inputs.
    pub fn backward_traced(&self, trace: &Trace, upstream: &[f64], grad: &mut ParamGrad) -> Result<Vec<f64>> {
        if upstream.len() != trace.n * self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream of length {} for {} rows of width {}",
                upstream.len(),
                trace.n,
                self.output_dim()
            )));
        }
        if !grad.is_congruent(self) {
            return Err(Error::ShapeMismatch("gradient buffer does not match network".into()));
        }
        let last = self.layers.len() - 1;
        let mut g = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i != last {
                let act = self.activation;
                g.iter_mut()
                    .zip(&trace.pre[i])
                    .for_each(|(gv, z)| *gv *= act.derivs(*z).1);
            }
            let gl = &mut grad.layers[i];
            kernels::accumulate_outer(&trace.acts[i], &g, l.fan_in, l.fan_out, &mut gl.weight);
            kernels::accumulate_rows(&g, l.fan_out, &mut gl.bias);
            let wt = kernels::transpose(&l.weight, l.fan_in, l.fan_out);
            let mut gx = vec![0.0; trace.n * l.fan_in];
            kernels::linear(&g, &wt, l.fan_out, l.fan_in, &mut gx);
            g = gx;
        }
        grad.count += trace.n;
        Ok(g)
    }

    /// Reverse-mode gradient of `upstream·forward(input)` for one input.
    pub fn backward_params(&self, input: &[f64], upstream: &[f64]) -> Result<ParamGrad> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} for input width {}",
                input.len(),
                self.input_dim()
            )));
        }
        let trace = self.forward_traced(input)?;
        let mut grad = ParamGrad::zeros_like(self);
        self.backward_traced(&trace, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Dual-number forward pass seeded with `∂/∂x[t_index] = 1` on every row.
    pub fn forward_dual_traced(&self, x: &[f64], t_index: usize) -> Result<DualTrace> {
        let n = self.check_batch(x)?;
        let k = self.input_dim();
        if t_index >= k {
            return Err(Error::ShapeMismatch(format!(
                "time index {t_index} out of range for input width {k}"
            )));
        }
        let mut seed = vec![0.0; x.len()];
        for r in 0..n {
            seed[r * k + t_index] = 1.0;
        }
        let last = self.layers.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut dacts = vec![seed];
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut dpre = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; n * l.fan_out];
            let mut dz = vec![0.0; n * l.fan_out];
            kernels::affine(&acts[i], &l.weight, &l.bias, l.fan_in, l.fan_out, &mut z);
            kernels::linear(&dacts[i], &l.weight, l.fan_in, l.fan_out, &mut dz);
            let (a, da) = if i != last {
                let act = self.activation;
                z.iter()
                    .zip(&dz)
                    .map(|(zv, dzv)| {
                        let (s, d1, _) = act.derivs(*zv);
                        (s, d1 * dzv)
                    })
                    .unzip()
            } else {
                (z.clone(), dz.clone())
            };
            pre.push(z);
            dpre.push(dz);
            acts.push(a);
            dacts.push(da);
        }
        Ok(DualTrace {
            n,
            acts,
            dacts,
            pre,
            dpre,
        })
    }

    /// Reverse sweep through a dual forward pass: accumulates the parameter
    /// gradient of `Σ up_value·value + up_tangent·tangent`.
    pub fn backward_dual_traced(
        &self,
        trace: &DualTrace,
        up_value: &[f64],
        up_tangent: &[f64],
        grad: &mut ParamGrad,
    ) -> Result<()> {
        let width = trace.n * self.output_dim();
        if up_value.len() != width || up_tangent.len() != width {
            return Err(Error::ShapeMismatch("dual upstream has the wrong length".into()));
        }
        if !grad.is_congruent(self) {
            return Err(Error::ShapeMismatch("gradient buffer does not match network".into()));
        }
        let last = self.layers.len() - 1;
        let mut g = up_value.to_vec();
        let mut gd = up_tangent.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i != last {
                let act = self.activation;
                for ((gv, gdv), (z, dz)) in g
                    .iter_mut()
                    .zip(gd.iter_mut())
                    .zip(trace.pre[i].iter().zip(&trace.dpre[i]))
                {
                    let (_, d1, d2) = act.derivs(*z);
                    *gv = *gv * d1 + *gdv * d2 * dz;
                    *gdv *= d1;
                }
            }
            let gl = &mut grad.layers[i];
            kernels::accumulate_outer(&trace.acts[i], &g, l.fan_in, l.fan_out, &mut gl.weight);
            kernels::accumulate_outer(&trace.dacts[i], &gd, l.fan_in, l.fan_out, &mut gl.weight);
            kernels::accumulate_rows(&g, l.fan_out, &mut gl.bias);
            if i > 0 {
                let wt = kernels::transpose(&l.weight, l.fan_in, l.fan_out);
                let mut gx = vec![0.0; trace.n * l.fan_in];
                let mut gdx = vec![0.0; trace.n * l.fan_in];
                kernels::linear(&g, &wt, l.fan_out, l.fan_in, &mut gx);
                kernels::linear(&gd, &wt, l.fan_out, l.fan_in, &mut gdx);
                g = gx;
                gd = gdx;
            }
        }
        grad.count += trace.n;
        Ok(())
    }

    /// Output and its exact partial derivative with respect to
    /// `input[t_index]`.
    pub fn forward_dual_t(&self, input: &[f64], t_index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} for input width {}",
                input.len(),
                self.input_dim()
            )));
        }
        let trace = self.forward_dual_traced(input, t_index)?;
        Ok((trace.output().to_vec(), trace.tangent().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_net(w: Vec<f64>, b: Vec<f64>, fan_in: usize, fan_out: usize) -> Mlp {
        Mlp::from_layers(
            vec![Dense {
                weight: w,
                bias: b,
                fan_in,
                fan_out,
            }],
            Activation::Tanh,
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = Mlp::init(&[3, 5, 2], Activation::Tanh, 1).unwrap();
        for b in net.blocks_mut() {
            b.fill(0.0);
        }
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer() {
        let net = linear_net(vec![2.0], vec![1.0], 1, 1);
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn two_layer_tanh_matches_scalar_recomputation() {
        let net = Mlp::init(&[2, 3, 1], Activation::Tanh, 11).unwrap();
        let x = [0.4, -0.9];
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let hidden: Vec<f64> = (0..3)
            .map(|j| (x[0] * l0.weight[j] + x[1] * l0.weight[3 + j] + l0.bias[j]).tanh())
            .collect();
        let out = hidden[0] * l1.weight[0] + hidden[1] * l1.weight[1] + hidden[2] * l1.weight[2] + l1.bias[0];
        assert!((net.forward(&x).unwrap()[0] - out).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Mlp::init(&[3, 4, 1], Activation::Tanh, 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(net.backward_params(&[1.0, 2.0, 3.0], &[1.0, 1.0]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(net.forward_dual_t(&[1.0, 2.0, 3.0], 3), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn linear_backward_is_input() {
        let net = linear_net(vec![0.5, -1.0, 2.0], vec![0.1], 3, 1);
        let g = net.backward_params(&[1.0, 2.0, 3.0], &[1.0]).unwrap();
        assert_eq!(g.layers[0].weight, vec![1.0, 2.0, 3.0]);
        assert_eq!(g.layers[0].bias, vec![1.0]);
        let z = net.backward_params(&[1.0, 2.0, 3.0], &[0.0]).unwrap();
        assert!(z.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dual_on_linear_layer_is_weight_column() {
        // y_j = Σ_k x_k W[k,j]; ∂y/∂x_1 = W[1,:]
        let net = linear_net(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.0, 0.0], 3, 2);
        let (v, dv) = net.forward_dual_t(&[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(v, net.forward(&[1.0, 1.0, 1.0]).unwrap());
        assert_eq!(dv, vec![3.0, 4.0]);
    }

    #[test]
    fn dual_is_zero_when_time_column_is_zero() {
        let mut net = Mlp::init(&[3, 8, 8, 2], Activation::Tanh, 5).unwrap();
        let l0 = &mut net.layers_mut()[0];
        for j in 0..l0.fan_out {
            l0.weight[j] = 0.0;
        }
        let (_, dv) = net.forward_dual_t(&[0.2, 0.3, -0.1], 0).unwrap();
        assert!(dv.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Mlp::init(&[4, 16, 3], Activation::Tanh, 9).unwrap();
        let b = Mlp::init(&[4, 16, 3], Activation::Tanh, 9).unwrap();
        let c = Mlp::init(&[4, 16, 3], Activation::Tanh, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flatten(), c.flatten());
        for l in a.layers() {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= limit));
            assert!(l.bias.iter().all(|b| *b == 0.0));
        }
        assert_eq!(a.param_count(), 4 * 16 + 16 + 16 * 3 + 3);
        assert_eq!(a.flatten().len(), a.param_count());
    }

    #[test]
    fn rejects_degenerate_widths() {
        assert!(Mlp::init(&[3], Activation::Tanh, 0).is_err());
        assert!(Mlp::init(&[3, 0, 1], Activation::Tanh, 0).is_err());
    }
}
