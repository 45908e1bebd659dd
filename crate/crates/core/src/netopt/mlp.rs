//! Dense MLP velocity model with exact reverse- and forward-mode derivatives.
//!
//! Input is `[x; t, sin 2πt, cos 2πt]`. Hidden layers apply the activation;
//! the output layer is linear. Hidden layers are numbered from 1, and the
//! post-activation output of hidden layer `ℓ = feature_layer` is the feature
//! vector `h_ℓ`.
//!
//! Parameters flatten layer-major: for each layer, the weight matrix
//! (`out × in`, row-major) followed by the bias.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, tag};

pub const T_EMBED_DIM: usize = 3;

pub fn time_embedding(t: f64) -> [f64; T_EMBED_DIM] {
    let (s, c) = (TAU * t).sin_cos();
    [t, s, c]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    /// Linear hidden layers; useful for analytic checks.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let mut z = self.weight.matvec(input);
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
    feature_layer: usize,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activations of the hidden layers.
    pub pre: Vec<Vec<f64>>,
    /// Post-activations of the hidden layers; `post[ℓ - 1]` is `h_ℓ`.
    pub post: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    pub fn features(&self, layer: usize) -> &[f64] {
        &self.post[layer - 1]
    }
}

/// Which map `input_jacobian` differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianTarget {
    /// `∂h_ℓ/∂x` at the designated feature layer.
    Features,
    /// `∂v/∂x`.
    Output,
}

fn validate(layer_sizes: &[usize], feature_layer: usize) -> Result<()> {
    if layer_sizes.len() < 3 {
        return Err(Error::invalid(format!(
            "need input, at least one hidden and an output layer, got sizes {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid(format!("layer sizes must be positive: {layer_sizes:?}")));
    }
    if layer_sizes[0] < T_EMBED_DIM {
        return Err(Error::invalid(format!(
            "input width {} is smaller than the {T_EMBED_DIM}-wide time embedding",
            layer_sizes[0]
        )));
    }
    let hidden = layer_sizes.len() - 2;
    if feature_layer < 1 || feature_layer > hidden {
        return Err(Error::invalid(format!(
            "feature_layer {feature_layer} outside 1..={hidden}"
        )));
    }
    Ok(())
}

impl VelocityNet {
    /// Glorot-uniform weights from the `(seed, layer)` substreams, zero biases.
    pub fn new(layer_sizes: &[usize], activation: Activation, feature_layer: usize, seed: u64) -> Result<Self> {
        validate(layer_sizes, feature_layer)?;
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut r = rng::substream(seed, tag::INIT, k as u64);
                let data = (0..fan_in * fan_out).map(|_| r.random_range(-limit..limit)).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            activation,
            feature_layer,
        })
    }

    /// Builds a net from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation, feature_layer: usize) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("no layers"))?;
        let mut sizes = vec![first.weight.cols()];
        for (k, l) in layers.iter().enumerate() {
            if l.weight.cols() != *sizes.last().unwrap() || l.bias.len() != l.weight.rows() {
                return Err(Error::shape(format!("layer {} does not chain", k + 1)));
            }
            sizes.push(l.weight.rows());
        }
        validate(&sizes, feature_layer)?;
        Ok(Self {
            layer_sizes: sizes,
            layers,
            activation,
            feature_layer,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn feature_layer(&self) -> usize {
        self.feature_layer
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// Dimension of the `x` part of the input.
    pub fn data_dim(&self) -> usize {
        self.layer_sizes[0] - T_EMBED_DIM
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.feature_layer]
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(l.weight.as_slice());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::shape(format!(
                "{} parameters given, net has {}",
                p.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn input(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.data_dim() {
            return Err(Error::shape(format!(
                "input has {} entries, net expects {}",
                x.len(),
                self.data_dim()
            )));
        }
        let mut z = Vec::with_capacity(self.layer_sizes[0]);
        z.extend_from_slice(x);
        z.extend_from_slice(&time_embedding(t));
        Ok(z)
    }

    pub fn trace(&self, x: &[f64], t: f64) -> Result<ForwardTrace> {
        let input = self.input(x, t)?;
        let hidden = self.hidden_layers();
        let mut pre = Vec::with_capacity(hidden);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(hidden);
        for (k, layer) in self.layers[..hidden].iter().enumerate() {
            let z = layer.affine(if k == 0 { &input } else { &post[k - 1] });
            let a = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        let output = self.layers[hidden].affine(&post[hidden - 1]);
        Ok(ForwardTrace {
            input,
            pre,
            post,
            output,
        })
    }

    /// Output `v` and the hidden activations (index `ℓ - 1` for layer `ℓ`).
    pub fn forward(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let tr = self.trace(x, t)?;
        Ok((tr.output, tr.post))
    }

    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.trace(x, t)?.output)
    }

    pub fn features(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut tr = self.trace(x, t)?;
        Ok(tr.post.swap_remove(self.feature_layer - 1))
    }

    /// Accumulates into `grads` the parameter gradient of
    /// `d_out · v + d_feature · h_ℓ` at the traced point.
    pub fn backward(&self, tr: &ForwardTrace, d_out: Option<&[f64]>, d_feature: Option<&[f64]>, grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.n_params());
        let nl = self.layers.len();
        let mut offsets = Vec::with_capacity(nl);
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.n_params();
        }
        let mut delta = match d_out {
            Some(d) => d.to_vec(),
            None => vec![0.0; self.output_dim()],
        };
        for k in (0..nl).rev() {
            let layer = &self.layers[k];
            let inp: &[f64] = if k == 0 { &tr.input } else { &tr.post[k - 1] };
            let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
            let g = &mut grads[offsets[k]..offsets[k] + rows * cols + rows];
            for (i, &di) in delta.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                let gw = &mut g[i * cols..(i + 1) * cols];
                for (gw, &a) in gw.iter_mut().zip(inp) {
                    *gw += di * a;
                }
                g[rows * cols + i] += di;
            }
            if k == 0 {
                break;
            }
            let mut da = vec![0.0; cols];
            for (i, &di) in delta.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                for (d, &w) in da.iter_mut().zip(layer.weight.row(i)) {
                    *d += di * w;
                }
            }
            if k == self.feature_layer {
                if let Some(df) = d_feature {
                    da.iter_mut().zip(df).for_each(|(a, b)| *a += b);
                }
            }
            let (z, a) = (&tr.pre[k - 1], &tr.post[k - 1]);
            delta = da
                .iter()
                .zip(z.iter().zip(a))
                .map(|(d, (&z, &a))| d * self.activation.derivative(z, a))
                .collect();
        }
    }

    /// `∂v/∂θ`, one row per output coordinate, columns in flattening order.
    pub fn param_jacobian(&self, x: &[f64], t: f64) -> Result<Matrix> {
        let tr = self.trace(x, t)?;
        let p = self.n_params();
        let m = self.output_dim();
        let mut jac = Matrix::zeros(m, p);
        let mut unit = vec![0.0; m];
        for j in 0..m {
            unit[j] = 1.0;
            self.backward(&tr, Some(&unit), None, jac.row_mut(j));
            unit[j] = 0.0;
        }
        Ok(jac)
    }

    /// Jacobian of layers `from + 1 ..` starting at `seed` (columns = seed columns).
    fn propagate(&self, tr: &ForwardTrace, from: usize, to: usize, mut jac: Matrix) -> Matrix {
        // `jac` holds derivatives of the activation at layer `from` (0 = network input)
        for k in from..to {
            let layer = &self.layers[k];
            let mut next = layer.weight.matmul(&jac).expect("chained shapes");
            if k < self.hidden_layers() {
                let (z, a) = (&tr.pre[k], &tr.post[k]);
                for i in 0..next.rows() {
                    let s = self.activation.derivative(z[i], a[i]);
                    next.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
            }
            jac = next;
        }
        jac
    }

    /// `∂h_ℓ/∂x` (`Features`) or `∂v/∂x` (`Output`); time-embedding columns excluded.
    pub fn input_jacobian(&self, x: &[f64], t: f64, target: JacobianTarget) -> Result<Matrix> {
        let tr = self.trace(x, t)?;
        let d = self.data_dim();
        let mut seed = Matrix::zeros(self.layer_sizes[0], d);
        for i in 0..d {
            seed[(i, i)] = 1.0;
        }
        let to = match target {
            JacobianTarget::Features => self.feature_layer,
            JacobianTarget::Output => self.layers.len(),
        };
        Ok(self.propagate(&tr, 0, to, seed))
    }

    /// `∂v/∂h_ℓ`, the Jacobian of the layers above the feature layer.
    pub fn head_jacobian(&self, x: &[f64], t: f64) -> Result<Matrix> {
        let tr = self.trace(x, t)?;
        Ok(self.propagate(&tr, self.feature_layer, self.layers.len(), Matrix::identity(self.feature_dim())))
    }
}
