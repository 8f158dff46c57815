// SPDX-License-Identifier: Apache-2.0

//! A minimal dense-network substrate with explicit forward and backward
//! passes. All arithmetic is `f64`.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod layers;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_input};
pub use layers::{Activation, BatchNormLayer, DenseLayer};

/// Default batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Default batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("train-mode forward needs at least 2 rows for batch norm, got {0}")]
    BatchTooSmall(usize),
    #[error("stale cache: {0}")]
    StaleCache(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNormLayer),
}

impl Layer {
    fn out_width(&self) -> usize {
        match self {
            Layer::Dense(d) => d.out_dim(),
            Layer::BatchNorm(b) => b.width(),
        }
    }
}

/// Per-layer gradient, mirroring [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Dense {
        weights: Array2<f64>,
        bias: Array1<f64>,
    },
    BatchNorm {
        gamma: Array1<f64>,
        beta: Array1<f64>,
    },
}

/// Parameter gradients in the same order as [`Network::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Dense { weights, bias } => {
                    out.push(weights.as_slice().expect("standard layout"));
                    out.push(bias.as_slice().expect("standard layout"));
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice().expect("standard layout"));
                    out.push(beta.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (
                    LayerGrad::Dense { weights, bias },
                    LayerGrad::Dense {
                        weights: w2,
                        bias: b2,
                    },
                ) => {
                    *weights += w2;
                    *bias += b2;
                }
                (
                    LayerGrad::BatchNorm { gamma, beta },
                    LayerGrad::BatchNorm {
                        gamma: g2,
                        beta: b2,
                    },
                ) => {
                    *gamma += g2;
                    *beta += b2;
                }
                _ => panic!("gradient structures differ"),
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense {
        input: Array2<f64>,
        pre: Array2<f64>,
        output: Array2<f64>,
    },
    BatchNorm {
        normalized: Array2<f64>,
        inv_std: Array1<f64>,
        batch_mean: Array1<f64>,
        batch_var: Array1<f64>,
    },
    EvalOnly,
}

/// Activations recorded by [`Network::forward`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mode: Mode,
    version: u64,
    rows: usize,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// An ordered stack of dense and batch-norm layers.
///
/// `version` increments whenever parameters are handed out mutably, so a
/// cache from before an optimizer step is detected as stale.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    version: u64,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        let mut width = match &layers[0] {
            Layer::Dense(d) => d.in_dim(),
            Layer::BatchNorm(b) => b.width(),
        };
        for (i, layer) in layers.iter().enumerate() {
            let in_width = match layer {
                Layer::Dense(d) => d.in_dim(),
                Layer::BatchNorm(b) => b.width(),
            };
            if in_width != width {
                return Err(NnError::ShapeMismatch(format!(
                    "layer {i} expects width {in_width}, previous layer gives {width}"
                )));
            }
            width = layer.out_width();
        }
        Ok(Self { layers, version: 0 })
    }

    /// `input -> hidden1 (relu) -> hidden2 (relu) -> batch norm -> code_len (tanh)`.
    pub fn hash_net<R: Rng + ?Sized>(
        input_dim: usize,
        hidden1: usize,
        hidden2: usize,
        code_len: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(vec![
            Layer::Dense(DenseLayer::glorot(
                input_dim,
                hidden1,
                Activation::Relu,
                rng,
            )),
            Layer::Dense(DenseLayer::glorot(hidden1, hidden2, Activation::Relu, rng)),
            Layer::BatchNorm(BatchNormLayer::new(hidden2, BN_MOMENTUM, BN_EPS)),
            Layer::Dense(DenseLayer::glorot(hidden2, code_len, Activation::Tanh, rng)),
        ])
        .expect("consistent widths")
    }

    /// `code_len -> code_len (relu) -> 2*code_len (relu) -> batch norm -> out_width`.
    /// Outputs are logits; the logistic is applied by the adversarial losses.
    pub fn discriminator<R: Rng + ?Sized>(code_len: usize, out_width: usize, rng: &mut R) -> Self {
        Self::new(vec![
            Layer::Dense(DenseLayer::glorot(
                code_len,
                code_len,
                Activation::Relu,
                rng,
            )),
            Layer::Dense(DenseLayer::glorot(
                code_len,
                2 * code_len,
                Activation::Relu,
                rng,
            )),
            Layer::BatchNorm(BatchNormLayer::new(2 * code_len, BN_MOMENTUM, BN_EPS)),
            Layer::Dense(DenseLayer::glorot(
                2 * code_len,
                out_width,
                Activation::Identity,
                rng,
            )),
        ])
        .expect("consistent widths")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access; bumps the version so outstanding caches go stale.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Dense(d) => d.in_dim(),
            Layer::BatchNorm(b) => b.width(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_width()
    }

    fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice().expect("standard layout"));
                    out.push(d.bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(b) => {
                    out.push(b.gamma.as_slice().expect("standard layout"));
                    out.push(b.beta.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }

    /// Trainable tensors in a fixed order: per layer, weights then bias (or
    /// gamma then beta).
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice_mut().expect("standard layout"));
                    out.push(d.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(b) => {
                    out.push(b.gamma.as_slice_mut().expect("standard layout"));
                    out.push(b.beta.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => LayerGrad::Dense {
                        weights: Array2::zeros(d.weights.dim()),
                        bias: Array1::zeros(d.bias.len()),
                    },
                    Layer::BatchNorm(b) => LayerGrad::BatchNorm {
                        gamma: Array1::zeros(b.width()),
                        beta: Array1::zeros(b.width()),
                    },
                })
                .collect(),
        }
    }

    /// Runs the stack on an `M x input_dim` batch.
    ///
    /// Train mode normalizes with batch statistics and needs `M >= 2` when
    /// the network has batch norm; running statistics are *not* updated here,
    /// see [`Network::commit_batch_stats`]. Eval mode uses running
    /// statistics, so each output row depends only on its input row.
    pub fn forward(
        &self,
        batch: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, ForwardCache), NnError> {
        if batch.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "batch width {} != input dim {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let rows = batch.nrows();
        if mode == Mode::Train && rows < 2 && self.has_batch_norm() {
            return Err(NnError::BatchTooSmall(rows));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.to_owned();
        for layer in &self.layers {
            match (layer, mode) {
                (Layer::Dense(d), Mode::Train) => {
                    let (pre, out) = d.forward(x.view());
                    caches.push(LayerCache::Dense {
                        input: x,
                        pre,
                        output: out.clone(),
                    });
                    x = out;
                }
                (Layer::Dense(d), Mode::Eval) => {
                    x = d.forward(x.view()).1;
                    caches.push(LayerCache::EvalOnly);
                }
                (Layer::BatchNorm(b), Mode::Train) => {
                    let fwd = b.forward_train(x.view());
                    caches.push(LayerCache::BatchNorm {
                        normalized: fwd.normalized,
                        inv_std: fwd.inv_std,
                        batch_mean: fwd.mean,
                        batch_var: fwd.var,
                    });
                    x = fwd.output;
                }
                (Layer::BatchNorm(b), Mode::Eval) => {
                    x = b.forward_eval(x.view());
                    caches.push(LayerCache::EvalOnly);
                }
            }
        }
        Ok((
            x,
            ForwardCache {
                layers: caches,
                mode,
                version: self.version,
                rows,
            },
        ))
    }

    /// Folds the batch statistics recorded in a train-mode cache into the
    /// batch-norm running averages.
    pub fn commit_batch_stats(&mut self, cache: &ForwardCache) -> Result<(), NnError> {
        if cache.mode != Mode::Train {
            return Err(NnError::StaleCache(
                "eval-mode cache has no batch statistics",
            ));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(NnError::StaleCache("cache from a different network"));
        }
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (
                Layer::BatchNorm(b),
                LayerCache::BatchNorm {
                    batch_mean,
                    batch_var,
                    ..
                },
            ) = (layer, c)
            {
                b.update_running(batch_mean, batch_var, cache.rows);
            }
        }
        Ok(())
    }

    /// Gradients of `sum(output * grad_out)` with respect to every parameter
    /// and to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        if cache.mode != Mode::Train {
            return Err(NnError::StaleCache("backward needs a train-mode cache"));
        }
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(NnError::StaleCache("parameters changed since forward"));
        }
        if grad_out.dim() != (cache.rows, self.output_dim()) {
            return Err(NnError::ShapeMismatch(format!(
                "grad_out is {:?}, expected ({}, {})",
                grad_out.dim(),
                cache.rows,
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            match (layer, c) {
                (Layer::Dense(d), LayerCache::Dense { input, pre, output }) => {
                    let (gw, gb, gx) =
                        d.backward(input.view(), pre.view(), output.view(), g.view());
                    grads.push(LayerGrad::Dense {
                        weights: gw,
                        bias: gb,
                    });
                    g = gx;
                }
                (
                    Layer::BatchNorm(b),
                    LayerCache::BatchNorm {
                        normalized,
                        inv_std,
                        ..
                    },
                ) => {
                    let (gg, gbeta, gx) = b.backward(normalized.view(), inv_std.view(), g.view());
                    grads.push(LayerGrad::BatchNorm {
                        gamma: gg,
                        beta: gbeta,
                    });
                    g = gx;
                }
                _ => return Err(NnError::StaleCache("cache does not match layer kinds")),
            }
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::hash_net(5, 6, 7, 4, &mut rng);
        for p in net.params_mut() {
            p.fill(0.0);
        }
        let x = randn(&mut rng, 3, 5);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = net.forward(x.view(), mode).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn eval_is_row_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::hash_net(5, 8, 8, 4, &mut rng);
        // give the running stats something non-trivial
        let warm = randn(&mut rng, 6, 5);
        let (_, c) = net.forward(warm.view(), Mode::Train).unwrap();
        net.commit_batch_stats(&c).unwrap();
        let x = randn(&mut rng, 2, 5);
        let (both, _) = net.forward(x.view(), Mode::Eval).unwrap();
        for r in 0..2 {
            let (one, _) = net.forward(x.slice(s![r..r + 1, ..]), Mode::Eval).unwrap();
            assert_eq!(one.row(0), both.row(r));
        }
    }

    #[test]
    fn hash_outputs_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let net = Network::hash_net(6, 10, 12, 8, &mut rng);
            let x = randn(&mut rng, 4, 6) * 3.0;
            let (y, _) = net.forward(x.view(), Mode::Train).unwrap();
            assert!(y.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
    }

    #[test]
    fn shape_and_batch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::hash_net(5, 6, 7, 4, &mut rng);
        let bad = Array2::zeros((3, 4));
        assert!(matches!(
            net.forward(bad.view(), Mode::Eval),
            Err(NnError::ShapeMismatch(_))
        ));
        let one = Array2::zeros((1, 5));
        assert_eq!(
            net.forward(one.view(), Mode::Train).unwrap_err(),
            NnError::BatchTooSmall(1)
        );
        assert!(net.forward(one.view(), Mode::Eval).is_ok());
    }

    #[test]
    fn stale_cache_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::hash_net(5, 6, 7, 4, &mut rng);
        let x = randn(&mut rng, 3, 5);
        let (y, cache) = net.forward(x.view(), Mode::Train).unwrap();
        net.params_mut()[0][0] += 1.0;
        assert!(matches!(
            net.backward(&cache, y.view()),
            Err(NnError::StaleCache(_))
        ));
        let (y, eval_cache) = net.forward(x.view(), Mode::Eval).unwrap();
        assert!(matches!(
            net.backward(&eval_cache, y.view()),
            Err(NnError::StaleCache(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::hash_net(5, 6, 7, 4, &mut rng);
        let x = randn(&mut rng, 3, 5);
        let (y, cache) = net.forward(x.view(), Mode::Train).unwrap();
        let (g, gx) = net.backward(&cache, Array2::zeros(y.dim()).view()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_closed_form() {
        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.5]];
        let layer = DenseLayer::new(w, array![0.1, -0.2], Activation::Identity).unwrap();
        let net = Network::new(vec![Layer::Dense(layer)]).unwrap();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        let (_, cache) = net.forward(x.view(), Mode::Train).unwrap();
        let up = array![[1.0, -2.0], [0.5, 3.0]];
        let (g, gx) = net.backward(&cache, up.view()).unwrap();
        match &g.layers[0] {
            LayerGrad::Dense { weights, bias } => {
                assert_eq!(weights, &up.t().dot(&x));
                assert_eq!(bias, &up.sum_axis(Axis(0)));
            }
            _ => unreachable!(),
        }
        let w = match &net.layers()[0] {
            Layer::Dense(d) => d.weights.clone(),
            _ => unreachable!(),
        };
        assert_eq!(gx, up.dot(&w));
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bn = BatchNormLayer::new(5, BN_MOMENTUM, BN_EPS);
        let x = randn(&mut rng, 64, 5) * 4.0 + 3.0;
        let fwd = bn.forward_train(x.view());
        for col in fwd.normalized.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-5, "var {var}");
        }
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNormLayer::new(1, 0.1, BN_EPS);
        let x = array![[1.0], [3.0]];
        let fwd = bn.forward_train(x.view());
        bn.update_running(&fwd.mean, &fwd.var, 2);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance = 2
        assert!((bn.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
