// SPDX-License-Identifier: Apache-2.0

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            // NaN passes through so divergence is not masked
            Activation::Relu => {
                if z < 0.0 {
                    0.0
                } else {
                    z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative from the pre-activation `z` and output `a`. ReLU'(0) = 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(x W^T + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        weights: Array2<f64>,
        bias: Array1<f64>,
        activation: Activation,
    ) -> Result<Self, NnError> {
        if weights.nrows() != bias.len() {
            return Err(NnError::ShapeMismatch(format!(
                "weights have {} rows, bias has {}",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(NnError::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            activation,
        })
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights =
            Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..=limit));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Returns `(pre_activation, output)`.
    pub(crate) fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut pre = x.dot(&self.weights.t());
        pre += &self.bias;
        let act = self.activation;
        let out = match act {
            Activation::Identity => pre.clone(),
            _ => pre.mapv(|z| act.apply(z)),
        };
        (pre, out)
    }

    /// Returns `(grad_weights, grad_bias, grad_input)`.
    pub(crate) fn backward(
        &self,
        input: ArrayView2<f64>,
        pre: ArrayView2<f64>,
        output: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let act = self.activation;
        let mut delta = grad_out.to_owned();
        if act != Activation::Identity {
            Zip::from(&mut delta)
                .and(pre)
                .and(output)
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
        }
        let grad_w = delta.t().dot(&input);
        let grad_b = delta.sum_axis(Axis(0));
        let grad_x = delta.dot(&self.weights);
        (grad_w, grad_b, grad_x)
    }
}

/// Per-feature batch normalization with learned affine `gamma`, `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub(crate) struct BatchNormForward {
    pub output: Array2<f64>,
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchNormLayer {
    pub fn new(width: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum,
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with the biased batch variance.
    pub(crate) fn forward_train(&self, x: ArrayView2<f64>) -> BatchNormForward {
        let m = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / m;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / m;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let normalized = centered * &inv_std;
        let output = &normalized * &self.gamma + &self.beta;
        BatchNormForward {
            output,
            normalized,
            inv_std,
            mean,
            var,
        }
    }

    pub(crate) fn forward_eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let scale = Zip::from(&self.gamma)
            .and(&self.running_var)
            .map_collect(|&g, &v| g / (v + self.eps).sqrt());
        (&x - &self.running_mean) * &scale + &self.beta
    }

    /// Running variance tracks the unbiased batch variance.
    pub(crate) fn update_running(
        &mut self,
        batch_mean: &Array1<f64>,
        batch_var: &Array1<f64>,
        rows: usize,
    ) {
        let m = self.momentum;
        let correction = if rows > 1 {
            rows as f64 / (rows as f64 - 1.0)
        } else {
            1.0
        };
        Zip::from(&mut self.running_mean)
            .and(batch_mean)
            .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
        Zip::from(&mut self.running_var)
            .and(batch_var)
            .for_each(|r, &b| *r = ((1.0 - m) * *r + m * b * correction).max(0.0));
    }

    /// Returns `(grad_gamma, grad_beta, grad_input)`.
    pub(crate) fn backward(
        &self,
        normalized: ArrayView2<f64>,
        inv_std: ArrayView1<f64>,
        grad_out: ArrayView2<f64>,
    ) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
        let m = grad_out.nrows() as f64;
        let grad_gamma = (&grad_out * &normalized).sum_axis(Axis(0));
        let grad_beta = grad_out.sum_axis(Axis(0));
        let grad_norm = &grad_out * &self.gamma;
        let sum_g = grad_norm.sum_axis(Axis(0));
        let sum_gx = (&grad_norm * &normalized).sum_axis(Axis(0));
        // dx = inv_std / m * (m * g - sum(g) - xhat * sum(g * xhat))
        let mut grad_x = grad_norm * m - &sum_g;
        grad_x -= &(&normalized * &sum_gx);
        grad_x *= &(&inv_std / m);
        (grad_gamma, grad_beta, grad_x)
    }
}
