// SPDX-License-Identifier: Apache-2.0

//! Loss terms of the hashing objective and the binary code update.
//!
//! Contrastive terms use the kernel `S(u, v) = exp(cos(u, v) / tau)`. For an
//! anchor matrix `A` and a partner matrix `C` (both `M x B`), row `j`
//! contributes
//!
//! ```text
//! -log S(a_j, c_j) / ( sum_{k != j} S(a_j, a_k) + sum_k S(a_j, c_k) )
//! ```
//!
//! and the loss is the mean over `j`. The inter-modal loss anchors on image
//! codes with text partners; the intra-modal losses anchor on the clean view
//! with the augmented view as partner.
//!
//! Every term that feeds training also has a `*_with_grad` form returning
//! gradients with respect to the code matrices.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("zero-norm row {row} in {which}")]
    ZeroVector { which: &'static str, row: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("binary codes must be exactly +1 or -1 (found {value} at ({row}, {col}))")]
    NonBipolar { row: usize, col: usize, value: f64 },
    #[error("continuous codes must lie in [-1, 1] (found {value} in {which})")]
    OutOfRange { which: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Average the image-anchored inter-modal term with its text-anchored
    /// mirror.
    pub symmetric_inter: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            symmetric_inter: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ObjectiveError::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Weights of the adversarial, quantization and bit-balance terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ObjectiveError::InvalidConfig(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How the quantization and bit-balance sums are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide by `M * B`.
    #[default]
    PerElement,
    /// Plain Frobenius sums.
    Sum,
}

impl Reduction {
    fn scale(self, rows: usize, cols: usize) -> f64 {
        match self {
            Reduction::PerElement => 1.0 / (rows * cols) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Continuous codes of the four views plus the batch rows of the binary code
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCodes {
    pub h_i: Array2<f64>,
    pub h_i_aug: Array2<f64>,
    pub h_t: Array2<f64>,
    pub h_t_aug: Array2<f64>,
    pub b: Array2<f64>,
}

impl BatchCodes {
    /// Checks that all five matrices share a shape, every `H` entry lies in
    /// `[-1, 1]` (the closed interval, so limit cases can be constructed) and
    /// `b` is exactly bipolar.
    pub fn new(
        h_i: Array2<f64>,
        h_i_aug: Array2<f64>,
        h_t: Array2<f64>,
        h_t_aug: Array2<f64>,
        b: Array2<f64>,
    ) -> Result<Self, ObjectiveError> {
        let shape = b.dim();
        for (name, h) in [
            ("h_i", &h_i),
            ("h_i_aug", &h_i_aug),
            ("h_t", &h_t),
            ("h_t_aug", &h_t_aug),
        ] {
            if h.dim() != shape {
                return Err(ObjectiveError::ShapeMismatch(format!(
                    "{name} is {:?}, b is {shape:?}",
                    h.dim()
                )));
            }
            if let Some(&value) = h.iter().find(|v| !(v.abs() <= 1.0)) {
                return Err(ObjectiveError::OutOfRange { which: name, value });
            }
        }
        if let Some(((row, col), &value)) = b.indexed_iter().find(|(_, &v)| v != 1.0 && v != -1.0) {
            return Err(ObjectiveError::NonBipolar { row, col, value });
        }
        Ok(Self {
            h_i,
            h_i_aug,
            h_t,
            h_t_aug,
            b,
        })
    }

    pub fn views(&self) -> [&Array2<f64>; 4] {
        [&self.h_i, &self.h_i_aug, &self.h_t, &self.h_t_aug]
    }

    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    pub fn bits(&self) -> usize {
        self.b.ncols()
    }
}

/// Per-term values for one training step, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    #[serde(rename = "L_C_inter")]
    pub c_inter: f64,
    #[serde(rename = "L_C_img")]
    pub c_img: f64,
    #[serde(rename = "L_C_txt")]
    pub c_txt: f64,
    #[serde(rename = "L_A_disc")]
    pub a_disc: f64,
    #[serde(rename = "L_A_gen")]
    pub a_gen: f64,
    #[serde(rename = "L_Q")]
    pub q: f64,
    #[serde(rename = "L_BB")]
    pub bb: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.c_inter,
            self.c_img,
            self.c_txt,
            self.a_disc,
            self.a_gen,
            self.q,
            self.bb,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `exp(cos(u, v) / tau)`.
pub fn similarity_kernel(
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    tau: f64,
) -> Result<f64, ObjectiveError> {
    if u.len() != v.len() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(ObjectiveError::InvalidConfig(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 {
        return Err(ObjectiveError::ZeroVector { which: "u", row: 0 });
    }
    if nv == 0.0 {
        return Err(ObjectiveError::ZeroVector { which: "v", row: 0 });
    }
    Ok((u.dot(&v) / (nu * nv) / tau).exp())
}

/// Row-normalized copy and the row norms.
fn normalize_rows(
    m: ArrayView2<f64>,
    which: &'static str,
) -> Result<(Array2<f64>, Array1<f64>), ObjectiveError> {
    let norms = m.map_axis(Axis(1), norm);
    if let Some(row) = norms.iter().position(|&n| n == 0.0) {
        return Err(ObjectiveError::ZeroVector { which, row });
    }
    let mut out = m.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        row /= n;
    }
    Ok((out, norms))
}

/// Gradient through `x_hat = x / |x|` for each row.
fn unnormalize_grad(grad_hat: &Array2<f64>, hat: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = grad_hat.clone();
    for ((mut g, h), &n) in out.rows_mut().into_iter().zip(hat.rows()).zip(norms) {
        let proj = g.dot(&h);
        Zip::from(&mut g)
            .and(&h)
            .for_each(|gv, &hv| *gv = (*gv - hv * proj) / n);
    }
    out
}

fn check_pair(a: ArrayView2<f64>, c: ArrayView2<f64>, tau: f64) -> Result<(), ObjectiveError> {
    if a.dim() != c.dim() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "anchor {:?} vs partner {:?}",
            a.dim(),
            c.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(ObjectiveError::ShapeMismatch("empty batch".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ObjectiveError::InvalidConfig(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    Ok(())
}

/// Anchored contrastive loss and its gradients with respect to the anchor
/// and partner matrices.
pub fn anchored_contrastive_with_grad(
    anchor: ArrayView2<f64>,
    partner: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>), ObjectiveError> {
    check_pair(anchor, partner, tau)?;
    let m = anchor.nrows();
    let (a_hat, a_norm) = normalize_rows(anchor, "anchor")?;
    let (c_hat, c_norm) = normalize_rows(partner, "partner")?;
    let logits_aa = a_hat.dot(&a_hat.t()) / tau;
    let logits_ac = a_hat.dot(&c_hat.t()) / tau;

    // d loss / d cos, filled row by row with softmax weights.
    let mut d_aa = Array2::<f64>::zeros((m, m));
    let mut d_ac = Array2::<f64>::zeros((m, m));
    let mut total = 0.0;
    let inv_m = 1.0 / m as f64;
    for j in 0..m {
        let row_aa = logits_aa.row(j);
        let row_ac = logits_ac.row(j);
        let mut max = f64::NEG_INFINITY;
        for k in 0..m {
            if k != j {
                max = max.max(row_aa[k]);
            }
            max = max.max(row_ac[k]);
        }
        let mut denom = 0.0;
        for k in 0..m {
            if k != j {
                denom += (row_aa[k] - max).exp();
            }
            denom += (row_ac[k] - max).exp();
        }
        total += max + denom.ln() - row_ac[j];
        for k in 0..m {
            if k != j {
                d_aa[[j, k]] = (row_aa[k] - max).exp() / denom * inv_m / tau;
            }
            d_ac[[j, k]] = (row_ac[k] - max).exp() / denom * inv_m / tau;
        }
        d_ac[[j, j]] -= inv_m / tau;
    }
    let grad_a_hat = d_aa.dot(&a_hat) + d_aa.t().dot(&a_hat) + d_ac.dot(&c_hat);
    let grad_c_hat = d_ac.t().dot(&a_hat);
    Ok((
        total * inv_m,
        unnormalize_grad(&grad_a_hat, &a_hat, &a_norm),
        unnormalize_grad(&grad_c_hat, &c_hat, &c_norm),
    ))
}

pub fn anchored_contrastive(
    anchor: ArrayView2<f64>,
    partner: ArrayView2<f64>,
    tau: f64,
) -> Result<f64, ObjectiveError> {
    Ok(anchored_contrastive_with_grad(anchor, partner, tau)?.0)
}

/// Image-anchored inter-modal loss; symmetrized when configured.
pub fn inter_modal_loss(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    cfg: &ContrastiveConfig,
) -> Result<f64, ObjectiveError> {
    Ok(inter_modal_with_grad(f, g, cfg)?.0)
}

pub fn inter_modal_with_grad(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>), ObjectiveError> {
    let (loss, gf, gg) = anchored_contrastive_with_grad(f, g, cfg.tau)?;
    if !cfg.symmetric_inter {
        return Ok((loss, gf, gg));
    }
    let (mirror, gg2, gf2) = anchored_contrastive_with_grad(g, f, cfg.tau)?;
    Ok((0.5 * (loss + mirror), 0.5 * (gf + gf2), 0.5 * (gg + gg2)))
}

/// Clean view anchors, augmented view is the partner. Never symmetrized.
pub fn intra_modal_loss(
    h: ArrayView2<f64>,
    h_aug: ArrayView2<f64>,
    cfg: &ContrastiveConfig,
) -> Result<f64, ObjectiveError> {
    anchored_contrastive(h, h_aug, cfg.tau)
}

/// Values and gradients of the three contrastive terms.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub inter: f64,
    pub img: f64,
    pub txt: f64,
    pub total: f64,
    pub grad_f: Array2<f64>,
    pub grad_g: Array2<f64>,
    pub grad_f_aug: Array2<f64>,
    pub grad_g_aug: Array2<f64>,
}

/// `inter + lambda1 * img + lambda2 * txt`. Terms with zero weight are still
/// evaluated for logging but contribute zero gradient.
pub fn contrastive_total_with_grad(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    f_aug: ArrayView2<f64>,
    g_aug: ArrayView2<f64>,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveOutput, ObjectiveError> {
    cfg.validate()?;
    let (inter, mut grad_f, mut grad_g) = inter_modal_with_grad(f, g, cfg)?;
    let (img, gf, gf_aug) = anchored_contrastive_with_grad(f, f_aug, cfg.tau)?;
    let (txt, gg, gg_aug) = anchored_contrastive_with_grad(g, g_aug, cfg.tau)?;
    grad_f.scaled_add(cfg.lambda1, &gf);
    grad_g.scaled_add(cfg.lambda2, &gg);
    Ok(ContrastiveOutput {
        inter,
        img,
        txt,
        total: inter + cfg.lambda1 * img + cfg.lambda2 * txt,
        grad_f,
        grad_g,
        grad_f_aug: gf_aug * cfg.lambda1,
        grad_g_aug: gg_aug * cfg.lambda2,
    })
}

pub fn contrastive_total(
    f: ArrayView2<f64>,
    g: ArrayView2<f64>,
    f_aug: ArrayView2<f64>,
    g_aug: ArrayView2<f64>,
    cfg: &ContrastiveConfig,
) -> Result<f64, ObjectiveError> {
    Ok(contrastive_total_with_grad(f, g, f_aug, g_aug, cfg)?.total)
}

/// Numerically stable logistic.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-mean[log D(text) + log(1 - D(image))]` over paired rows.
pub fn discriminator_loss(p_text: &[f64], p_image: &[f64]) -> Result<f64, ObjectiveError> {
    if p_text.len() != p_image.len() || p_text.is_empty() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{} text vs {} image probabilities",
            p_text.len(),
            p_image.len()
        )));
    }
    let sum: f64 = p_text
        .iter()
        .zip(p_image)
        .map(|(&t, &i)| clamp_prob(t).ln() + (1.0 - clamp_prob(i)).ln())
        .sum();
    Ok(-sum / p_text.len() as f64)
}

/// Non-saturating generator term `-mean[log D(image)]`.
pub fn generator_adversarial_loss(p_image: &[f64]) -> f64 {
    let sum: f64 = p_image.iter().map(|&p| clamp_prob(p).ln()).sum();
    -sum / p_image.len() as f64
}

/// `d/dz [-log clamp(sigmoid(z))]`; zero where the clamp is active.
fn neg_log_sigmoid_grad(z: f64) -> f64 {
    let p = logistic(z);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p - 1.0
    }
}

/// `d/dz [-log(1 - clamp(sigmoid(z)))]`.
fn neg_log_one_minus_sigmoid_grad(z: f64) -> f64 {
    let p = logistic(z);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p
    }
}

/// Discriminator loss from raw logits, with logit gradients.
pub fn discriminator_loss_with_grad(
    z_text: ArrayView2<f64>,
    z_image: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), ObjectiveError> {
    if z_text.dim() != z_image.dim() {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "text logits {:?} vs image logits {:?}",
            z_text.dim(),
            z_image.dim()
        )));
    }
    let p_text: Vec<f64> = z_text.iter().map(|&z| logistic(z)).collect();
    let p_image: Vec<f64> = z_image.iter().map(|&z| logistic(z)).collect();
    let loss = discriminator_loss(&p_text, &p_image)?;
    let n = z_text.len() as f64;
    let gt = z_text.mapv(|z| neg_log_sigmoid_grad(z) / n);
    let gi = z_image.mapv(|z| neg_log_one_minus_sigmoid_grad(z) / n);
    Ok((loss, gt, gi))
}

/// Generator term from image logits, with logit gradient.
pub fn generator_loss_with_grad(z_image: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let p: Vec<f64> = z_image.iter().map(|&z| logistic(z)).collect();
    let n = z_image.len() as f64;
    (
        generator_adversarial_loss(&p),
        z_image.mapv(|z| neg_log_sigmoid_grad(z) / n),
    )
}

/// Sum of `|B - H|_F^2` over the four views.
pub fn quantization_loss(codes: &BatchCodes, reduction: Reduction) -> f64 {
    let scale = reduction.scale(codes.rows(), codes.bits());
    codes
        .views()
        .iter()
        .map(|h| (&codes.b - *h).mapv(|d| d * d).sum())
        .sum::<f64>()
        * scale
}

pub fn quantization_grads(codes: &BatchCodes, reduction: Reduction) -> [Array2<f64>; 4] {
    let scale = reduction.scale(codes.rows(), codes.bits());
    codes.views().map(|h| (h - &codes.b) * (2.0 * scale))
}

/// Sum over the four views of the squared row sums.
pub fn bit_balance_loss(codes: &BatchCodes, reduction: Reduction) -> f64 {
    let scale = reduction.scale(codes.rows(), codes.bits());
    codes
        .views()
        .iter()
        .map(|h| h.sum_axis(Axis(1)).mapv(|s| s * s).sum())
        .sum::<f64>()
        * scale
}

pub fn bit_balance_grads(codes: &BatchCodes, reduction: Reduction) -> [Array2<f64>; 4] {
    let scale = reduction.scale(codes.rows(), codes.bits());
    codes.views().map(|h| {
        let sums = h.sum_axis(Axis(1)) * (2.0 * scale);
        let mut g = Array2::zeros(h.dim());
        for (mut row, &s) in g.rows_mut().into_iter().zip(&sums) {
            row.fill(s);
        }
        g
    })
}

/// `sign` with `sign(0) = +1`.
pub fn bipolar_sign(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

/// `sign(((H_i + H_i') / 2 + (H_t + H_t') / 2) / 2)` elementwise.
pub fn binary_update(
    h_i: ArrayView2<f64>,
    h_i_aug: ArrayView2<f64>,
    h_t: ArrayView2<f64>,
    h_t_aug: ArrayView2<f64>,
) -> Result<Array2<i8>, ObjectiveError> {
    let shape = h_i.dim();
    for (name, m) in [("h_i_aug", &h_i_aug), ("h_t", &h_t), ("h_t_aug", &h_t_aug)] {
        if m.dim() != shape {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "{name} is {:?}, h_i is {shape:?}",
                m.dim()
            )));
        }
    }
    Ok(Zip::from(h_i)
        .and(h_i_aug)
        .and(h_t)
        .and(h_t_aug)
        .map_collect(|&a, &b, &c, &d| bipolar_sign(((a + b) / 2.0 + (c + d) / 2.0) / 2.0)))
}

/// Value of the hashing objective for one batch.
///
/// `d_image` holds discriminator probabilities for the image rows (clean and
/// augmented). `a_disc` in the breakdown is left at zero; the trainer fills
/// it from the discriminator step.
pub fn total_loss(
    codes: &BatchCodes,
    d_image: &[f64],
    contrastive: &ContrastiveConfig,
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<LossBreakdown, ObjectiveError> {
    weights.validate()?;
    let c = contrastive_total_with_grad(
        codes.h_i.view(),
        codes.h_t.view(),
        codes.h_i_aug.view(),
        codes.h_t_aug.view(),
        contrastive,
    )?;
    let a_gen = generator_adversarial_loss(d_image);
    let q = quantization_loss(codes, reduction);
    let bb = bit_balance_loss(codes, reduction);
    Ok(LossBreakdown {
        step: 0,
        c_inter: c.inter,
        c_img: c.img,
        c_txt: c.txt,
        a_disc: 0.0,
        a_gen,
        q,
        bb,
        total: c.total + weights.alpha * a_gen + weights.beta * q + weights.gamma * bb,
    })
}
