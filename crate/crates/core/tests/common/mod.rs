// SPDX-License-Identifier: Apache-2.0

//! Literal reference implementations used as oracles by the integration
//! tests. Everything here is written loop-by-loop on purpose.

#![allow(dead_code)]

use duch_core::nn::{Mode, Network};
use ndarray::{Array2, ArrayView2};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    (0..m.ncols()).map(|j| m[[i, j]]).collect()
}

/// `-1/M sum_j log( S(a_j, p_j) / (sum_{k != j} S(a_j, a_k) + sum_k S(a_j, p_k)) )`
/// with `S(u, v) = exp(cos(u, v) / tau)`.
pub fn anchored(anchor: &Array2<f64>, partner: &Array2<f64>, tau: f64) -> f64 {
    let m = anchor.nrows();
    let s = |u: &[f64], v: &[f64]| (cosine(u, v) / tau).exp();
    let mut total = 0.0;
    for j in 0..m {
        let a = row(anchor, j);
        let mut denom = 0.0;
        for k in 0..m {
            if k != j {
                denom += s(&a, &row(anchor, k));
            }
        }
        for k in 0..m {
            denom += s(&a, &row(partner, k));
        }
        total += -(s(&a, &row(partner, j)) / denom).ln();
    }
    total / m as f64
}

pub fn inter(f: &Array2<f64>, g: &Array2<f64>, tau: f64, symmetric: bool) -> f64 {
    if symmetric {
        0.5 * (anchored(f, g, tau) + anchored(g, f, tau))
    } else {
        anchored(f, g, tau)
    }
}

/// `sum over views of |B - H|_F^2`, optionally divided by `M * B`.
pub fn quantization(views: [&Array2<f64>; 4], b: &Array2<f64>, per_element: bool) -> f64 {
    let (m, bits) = b.dim();
    let mut s = 0.0;
    for h in views {
        for i in 0..m {
            for j in 0..bits {
                let d = b[[i, j]] - h[[i, j]];
                s += d * d;
            }
        }
    }
    if per_element {
        s / (m * bits) as f64
    } else {
        s
    }
}

/// `sum over views of sum_i (sum_j H_ij)^2`, optionally divided by `M * B`.
pub fn bit_balance(views: [&Array2<f64>; 4], per_element: bool) -> f64 {
    let (m, bits) = views[0].dim();
    let mut s = 0.0;
    for h in views {
        for i in 0..m {
            let mut r = 0.0;
            for j in 0..bits {
                r += h[[i, j]];
            }
            s += r * r;
        }
    }
    if per_element {
        s / (m * bits) as f64
    } else {
        s
    }
}

/// `-1/n sum_i [log p_text_i + log(1 - p_image_i)]` with clamping.
pub fn disc_loss(p_text: &[f64], p_image: &[f64]) -> f64 {
    let c = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    let mut s = 0.0;
    for i in 0..p_text.len() {
        s += c(p_text[i]).ln() + (1.0 - c(p_image[i])).ln();
    }
    -s / p_text.len() as f64
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Bit-by-bit mismatch count.
pub fn hamming(a: &[i8], b: &[i8]) -> u32 {
    let mut d = 0;
    for i in 0..a.len() {
        if a[i] != b[i] {
            d += 1;
        }
    }
    d
}

/// Every database position sorted by `(distance, position)`.
pub fn full_rank(query: &[i8], db: &Array2<i8>) -> Vec<usize> {
    let mut all: Vec<(u32, usize)> = Vec::new();
    for i in 0..db.nrows() {
        let r: Vec<i8> = db.row(i).to_vec();
        all.push((hamming(query, &r), i));
    }
    all.sort();
    all.into_iter().map(|(_, i)| i).collect()
}

/// AP@k with denominator `min(r, k)`; `None` when nothing is relevant.
pub fn ap_at_k(rel: &[bool], total_relevant: usize, k: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().take(k).enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total_relevant.min(k) as f64)
}

/// `(mAP@k, [(K, P@K)])` by exhaustive ranking.
pub fn evaluate(
    queries: &Array2<i8>,
    db: &Array2<i8>,
    q_labels: &[u32],
    db_labels: &[u32],
    k: usize,
) -> (f64, Vec<(usize, f64)>) {
    let rankings: Vec<Vec<usize>> = (0..queries.nrows())
        .map(|q| full_rank(&queries.row(q).to_vec(), db))
        .collect();
    let mut aps = Vec::new();
    for (q, r) in rankings.iter().enumerate() {
        let rel: Vec<bool> = r.iter().map(|&i| db_labels[i] == q_labels[q]).collect();
        let total = db_labels.iter().filter(|&&l| l == q_labels[q]).count();
        if let Some(ap) = ap_at_k(&rel, total, k) {
            aps.push(ap);
        }
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let mut curve = Vec::new();
    let mut cut = 5;
    while cut <= 200 && cut <= db.nrows() {
        let mut s = 0.0;
        for (q, r) in rankings.iter().enumerate() {
            let hits = r[..cut]
                .iter()
                .filter(|&&i| db_labels[i] == q_labels[q])
                .count();
            s += hits as f64 / cut as f64;
        }
        curve.push((cut, s / rankings.len() as f64));
        cut += 5;
    }
    (map, curve)
}

/// Central differences of `loss(net.forward(batch))` over every parameter.
pub fn central_diff<F>(net: &Network, batch: ArrayView2<f64>, loss: F, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(ArrayView2<f64>) -> f64,
{
    let mut probe = net.clone();
    let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::new();
    for (t, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for j in 0..len {
            let orig = probe.params()[t][j];
            probe.params_mut()[t][j] = orig + h;
            let plus = loss(probe.forward(batch, Mode::Train).unwrap().0.view());
            probe.params_mut()[t][j] = orig - h;
            let minus = loss(probe.forward(batch, Mode::Train).unwrap().0.view());
            probe.params_mut()[t][j] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    out
}
