// SPDX-License-Identifier: Apache-2.0

//! Finite-difference checks of every loss term through the networks.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{finite_diff_check, Layer, Mode, Network};
use crate::objectives::{
    anchored_contrastive_with_grad, bit_balance_grads, bit_balance_loss,
    discriminator_loss_with_grad, generator_loss_with_grad, inter_modal_with_grad,
    quantization_grads, quantization_loss, BatchCodes, ContrastiveConfig, Reduction,
};

/// Loss terms covered by [`gradient_suite`].
pub const GRAD_TERMS: [&str; 10] = [
    "c_inter",
    "c_inter_symmetric",
    "c_img",
    "c_txt",
    "a_disc",
    "a_gen",
    "q",
    "q_sum",
    "bb",
    "total",
];

/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRecord {
    pub term: String,
    pub network: String,
    pub seed: u64,
    pub params: usize,
    pub max_rel_err: f64,
}

type LossFn = Box<dyn Fn(ArrayView2<f64>) -> (f64, Array2<f64>)>;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn bipolar(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn(
        (rows, cols),
        |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 },
    )
}

/// Moves biases off zero. With zero biases a fully dead ReLU row feeds an
/// exact 0 into the next ReLU, where central differences see half the slope.
fn jitter_biases(net: &mut Network, rng: &mut ChaCha8Rng) {
    for layer in net.layers_mut() {
        if let Layer::Dense(d) = layer {
            d.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

/// Splits a `4m`-row hash output into the four views.
fn views(y: ArrayView2<f64>) -> [Array2<f64>; 4] {
    let m = y.nrows() / 4;
    [0, 1, 2, 3].map(|k| y.slice(s![k * m..(k + 1) * m, ..]).to_owned())
}

fn join(parts: [Array2<f64>; 4]) -> Array2<f64> {
    concatenate(Axis(0), &parts.each_ref().map(|p| p.view())).expect("same widths")
}

fn zeros_like(y: ArrayView2<f64>) -> [Array2<f64>; 4] {
    let m = y.nrows() / 4;
    [0, 1, 2, 3].map(|_| Array2::zeros((m, y.ncols())))
}

fn codes(y: ArrayView2<f64>, b: &Array2<f64>) -> BatchCodes {
    let [a, c, d, e] = views(y);
    BatchCodes::new(a, c, d, e, b.clone()).expect("tanh outputs and bipolar targets")
}

/// Generator term through a fixed discriminator, image views only.
fn gen_through(d: &Network, y: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let m = y.nrows() / 4;
    let img = y.slice(s![..2 * m, ..]);
    let (z, cache) = d.forward(img, Mode::Train).expect("valid batch");
    let (loss, gz) = generator_loss_with_grad(z.view());
    let (_, gin) = d.backward(&cache, gz.view()).expect("fresh cache");
    let mut grad = Array2::zeros(y.raw_dim());
    grad.slice_mut(s![..2 * m, ..]).assign(&gin);
    (loss, grad)
}

fn hash_term(term: &str, rng: &mut ChaCha8Rng, m: usize, bits: usize, d: Network) -> LossFn {
    let b = bipolar(rng, m, bits);
    let cfg = ContrastiveConfig {
        tau: rng.random_range(0.2..1.0),
        symmetric_inter: term == "c_inter_symmetric",
        ..Default::default()
    };
    match term {
        "c_inter" | "c_inter_symmetric" => Box::new(move |y| {
            let [hi, _, ht, _] = views(y);
            let (l, gf, gg) = inter_modal_with_grad(hi.view(), ht.view(), &cfg).expect("nonzero");
            let mut g = zeros_like(y);
            g[0] = gf;
            g[2] = gg;
            (l, join(g))
        }),
        "c_img" | "c_txt" => {
            let (a, p) = if term == "c_img" { (0, 1) } else { (2, 3) };
            Box::new(move |y| {
                let v = views(y);
                let (l, ga, gp) = anchored_contrastive_with_grad(v[a].view(), v[p].view(), cfg.tau)
                    .expect("nonzero");
                let mut g = zeros_like(y);
                g[a] = ga;
                g[p] = gp;
                (l, join(g))
            })
        }
        "a_gen" => Box::new(move |y| gen_through(&d, y)),
        "q" | "q_sum" => {
            let red = if term == "q" {
                Reduction::PerElement
            } else {
                Reduction::Sum
            };
            Box::new(move |y| {
                let c = codes(y, &b);
                (
                    quantization_loss(&c, red),
                    join(quantization_grads(&c, red)),
                )
            })
        }
        "bb" => Box::new(move |y| {
            let c = codes(y, &b);
            (
                bit_balance_loss(&c, Reduction::PerElement),
                join(bit_balance_grads(&c, Reduction::PerElement)),
            )
        }),
        "total" => {
            let (alpha, beta, gamma) = (0.3, 0.2, 0.1);
            Box::new(move |y| {
                let [hi, hia, ht, hta] = views(y);
                let out = crate::objectives::contrastive_total_with_grad(
                    hi.view(),
                    ht.view(),
                    hia.view(),
                    hta.view(),
                    &cfg,
                )
                .expect("nonzero");
                let c = codes(y, &b);
                let (gen, gen_grad) = gen_through(&d, y);
                let red = Reduction::PerElement;
                let mut grad = join([out.grad_f, out.grad_f_aug, out.grad_g, out.grad_g_aug]);
                grad.scaled_add(alpha, &gen_grad);
                grad.scaled_add(beta, &join(quantization_grads(&c, red)));
                grad.scaled_add(gamma, &join(bit_balance_grads(&c, red)));
                let loss = out.total
                    + alpha * gen
                    + beta * quantization_loss(&c, red)
                    + gamma * bit_balance_loss(&c, red);
                (loss, grad)
            })
        }
        other => unreachable!("not a hash-network term: {other}"),
    }
}

/// Analytic against central-difference gradients for every term in
/// [`GRAD_TERMS`], `rounds` times with fresh random networks and batches.
///
/// Hash-network terms are differentiated through a small hash network whose
/// `4m` output rows are read as the four views; the discriminator loss is
/// differentiated through a small discriminator.
pub fn gradient_suite(seed: u64, rounds: usize) -> Result<Vec<GradCheckRecord>> {
    let mut out = Vec::new();
    for round in 0..rounds {
        for (t, term) in GRAD_TERMS.iter().enumerate() {
            let case_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((round * GRAD_TERMS.len() + t) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let m = rng.random_range(2..5);
            let bits = rng.random_range(3..7);
            let (net, batch, loss, network) = if *term == "a_disc" {
                let mut d = Network::discriminator(bits, 1, &mut rng);
                jitter_biases(&mut d, &mut rng);
                let x = randn(&mut rng, 4 * m, bits).mapv(f64::tanh);
                let loss: LossFn = Box::new(move |z| {
                    let half = z.nrows() / 2;
                    let (l, gt, gi) = discriminator_loss_with_grad(
                        z.slice(s![..half, ..]),
                        z.slice(s![half.., ..]),
                    )
                    .expect("matching halves");
                    (
                        l,
                        concatenate(Axis(0), &[gt.view(), gi.view()]).expect("same widths"),
                    )
                });
                (d, x, loss, "discriminator")
            } else {
                let input = rng.random_range(3..6);
                let mut f = Network::hash_net(input, 5, 7, bits, &mut rng);
                let mut d = Network::discriminator(bits, 1, &mut rng);
                jitter_biases(&mut f, &mut rng);
                jitter_biases(&mut d, &mut rng);
                let x = randn(&mut rng, 4 * m, input);
                let loss = hash_term(term, &mut rng, m, bits, d);
                (f, x, loss, "hash")
            };
            let err = finite_diff_check(&net, batch.view(), loss, GRAD_STEP)?;
            out.push(GradCheckRecord {
                term: term.to_string(),
                network: network.to_string(),
                seed: case_seed,
                params: net.num_params(),
                max_rel_err: err,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes() {
        let records = gradient_suite(11, 5).unwrap();
        assert_eq!(records.len(), 5 * GRAD_TERMS.len());
        for r in &records {
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
