// SPDX-License-Identifier: Apache-2.0

//! Alternating discriminator / hash-network training.
//!
//! Each batch runs the four views through the hash networks in train mode,
//! takes `disc_steps` discriminator steps on the (detached) codes, then one
//! hash-network step on the weighted objective including the generator term,
//! and finally refreshes the batch rows of the code matrix.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PairedDataset};
use crate::nn::checkpoint::{
    self, adam_from_tensors, adam_tensors, network_from_tensors, network_tensors, CheckpointError,
    NamedTensor, TensorMap,
};
use crate::nn::{AdamConfig, AdamState, Mode, Network, NnError};
use crate::objectives::{
    binary_update, bit_balance_grads, bit_balance_loss, contrastive_total_with_grad,
    discriminator_loss_with_grad, generator_loss_with_grad, quantization_grads, quantization_loss,
    BatchCodes, ContrastiveConfig, LossBreakdown, LossWeights, ObjectiveError, Reduction,
};

/// Rows per chunk when encoding in eval mode.
const ENCODE_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error("non-finite loss at step {step}")]
    NumericalDivergence { step: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// No adversarial term.
    NA,
    /// No quantization term.
    NQ,
    /// No bit-balance term.
    NB,
    /// No intra-modal contrastive terms.
    CL,
    /// Image intra-modal term only.
    #[serde(rename = "CL_I")]
    ClI,
    /// Text intra-modal term only.
    #[serde(rename = "CL_T")]
    ClT,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NA,
        Ablation::NQ,
        Ablation::NB,
        Ablation::CL,
        Ablation::ClI,
        Ablation::ClT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NA => "NA",
            Ablation::NQ => "NQ",
            Ablation::NB => "NB",
            Ablation::CL => "CL",
            Ablation::ClI => "CL_I",
            Ablation::ClT => "CL_T",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TrainError::ConfigInvalid(format!("unknown ablation flag {s:?}")))
    }
}

/// When the code matrix is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeUpdate {
    /// Batch rows after every hash step.
    #[default]
    PerBatch,
    /// Whole matrix from an eval pass at the end of each epoch.
    PerEpoch,
}

/// First hidden width of a hash network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenWidth {
    /// The reference width (512 image, 768 text) when the input has exactly
    /// that dimension, else the input dimension.
    #[default]
    Auto,
    Fixed(usize),
}

impl HiddenWidth {
    pub fn resolve(self, input_dim: usize, reference: usize) -> usize {
        match self {
            HiddenWidth::Fixed(w) => w,
            HiddenWidth::Auto if input_dim == reference => reference,
            HiddenWidth::Auto => input_dim,
        }
    }
}

pub const REFERENCE_HIDDEN_IMG: usize = 512;
pub const REFERENCE_HIDDEN_TXT: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub code_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub symmetric_inter: bool,
    pub hash_wd: f64,
    pub disc_wd: f64,
    pub hash_betas: (f64, f64),
    pub disc_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub ablation: BTreeSet<Ablation>,
    /// Discriminator steps per hash step; 0 freezes the discriminator.
    pub disc_steps: usize,
    pub code_update: CodeUpdate,
    pub reduction: Reduction,
    pub hidden_img: HiddenWidth,
    pub hidden_txt: HiddenWidth,
    pub hidden2: usize,
    pub disc_out_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            code_len: 64,
            batch_size: 256,
            epochs: 100,
            lr: 1e-4,
            lr_decay_factor: 0.2,
            lr_decay_every: 50,
            alpha: 0.01,
            beta: 0.001,
            gamma: 0.01,
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 0.5,
            symmetric_inter: false,
            hash_wd: 5e-4,
            disc_wd: 1e-4,
            hash_betas: (0.9, 0.999),
            disc_betas: (0.5, 0.9),
            adam_eps: 1e-7,
            seed: 0,
            ablation: BTreeSet::new(),
            disc_steps: 1,
            code_update: CodeUpdate::PerBatch,
            reduction: Reduction::PerElement,
            hidden_img: HiddenWidth::Auto,
            hidden_txt: HiddenWidth::Auto,
            hidden2: 4096,
            disc_out_width: 1,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .trim()
        .parse()
        .map_err(|_| TrainError::ConfigInvalid(format!("{key}: cannot parse {value:?}")))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64), TrainError> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(TrainError::ConfigInvalid(format!(
            "{key}: expected two comma-separated numbers, got {value:?}"
        )));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_hidden(key: &str, value: &str) -> Result<HiddenWidth, TrainError> {
    if value.trim() == "auto" {
        Ok(HiddenWidth::Auto)
    } else {
        Ok(HiddenWidth::Fixed(parse_num(key, value)?))
    }
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`].
    pub const KEYS: [&'static str; 27] = [
        "code_len",
        "batch_size",
        "epochs",
        "lr",
        "lr_decay_factor",
        "lr_decay_every",
        "alpha",
        "beta",
        "gamma",
        "lambda1",
        "lambda2",
        "tau",
        "symmetric_inter",
        "hash_wd",
        "disc_wd",
        "hash_betas",
        "disc_betas",
        "adam_eps",
        "seed",
        "ablation",
        "disc_steps",
        "code_update",
        "reduction",
        "hidden_img",
        "hidden_txt",
        "hidden2",
        "disc_out_width",
    ];

    /// Sets one field from its textual form. Pairs are `a,b`; `ablation` is a
    /// comma list of flags or `none`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value.trim();
        match key {
            "code_len" => self.code_len = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_num(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "symmetric_inter" => self.symmetric_inter = parse_num(key, v)?,
            "hash_wd" => self.hash_wd = parse_num(key, v)?,
            "disc_wd" => self.disc_wd = parse_num(key, v)?,
            "hash_betas" => self.hash_betas = parse_pair(key, v)?,
            "disc_betas" => self.disc_betas = parse_pair(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "ablation" => {
                self.ablation = if v.is_empty() || v == "none" {
                    BTreeSet::new()
                } else {
                    v.split(',')
                        .map(|f| f.trim().parse())
                        .collect::<Result<_, _>>()?
                };
            }
            "disc_steps" => self.disc_steps = parse_num(key, v)?,
            "code_update" => {
                self.code_update = match v {
                    "per_batch" => CodeUpdate::PerBatch,
                    "per_epoch" => CodeUpdate::PerEpoch,
                    _ => {
                        return Err(TrainError::ConfigInvalid(format!(
                            "code_update must be per_batch or per_epoch, got {v:?}"
                        )))
                    }
                }
            }
            "reduction" => {
                self.reduction = match v {
                    "per_element" => Reduction::PerElement,
                    "sum" => Reduction::Sum,
                    _ => {
                        return Err(TrainError::ConfigInvalid(format!(
                            "reduction must be per_element or sum, got {v:?}"
                        )))
                    }
                }
            }
            "hidden_img" => self.hidden_img = parse_hidden(key, v)?,
            "hidden_txt" => self.hidden_txt = parse_hidden(key, v)?,
            "hidden2" => self.hidden2 = parse_num(key, v)?,
            "disc_out_width" => self.disc_out_width = parse_num(key, v)?,
            _ => return Err(TrainError::ConfigInvalid(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        cfg.apply_lines(text)?;
        Ok(cfg)
    }

    pub fn apply_lines(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::ConfigInvalid(format!("line {}: expected key=value", i + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Loss weights after the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        };
        if self.ablation.contains(&Ablation::NA) {
            w.alpha = 0.0;
        }
        if self.ablation.contains(&Ablation::NQ) {
            w.beta = 0.0;
        }
        if self.ablation.contains(&Ablation::NB) {
            w.gamma = 0.0;
        }
        w
    }

    /// Contrastive settings after the ablation flags.
    pub fn effective_contrastive(&self) -> ContrastiveConfig {
        let mut c = ContrastiveConfig {
            tau: self.tau,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            symmetric_inter: self.symmetric_inter,
        };
        if self.ablation.contains(&Ablation::CL) {
            c.lambda1 = 0.0;
            c.lambda2 = 0.0;
        }
        if self.ablation.contains(&Ablation::ClI) {
            c.lambda2 = 0.0;
        }
        if self.ablation.contains(&Ablation::ClT) {
            c.lambda1 = 0.0;
        }
        c
    }

    fn hash_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.hash_betas.0,
            beta2: self.hash_betas.1,
            eps: self.adam_eps,
            weight_decay: self.hash_wd,
        }
    }

    fn disc_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.disc_betas.0,
            beta2: self.disc_betas.1,
            eps: self.adam_eps,
            weight_decay: self.disc_wd,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::ConfigInvalid(msg));
        if !(8..=4096).contains(&self.code_len) {
            return bad(format!(
                "code_len must lie in 8..=4096, got {}",
                self.code_len
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!(
                "lr_decay_factor must lie in (0, 1), got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive".into());
        }
        if self.hidden2 == 0 || self.disc_out_width == 0 {
            return bad("layer widths must be positive".into());
        }
        for w in [self.hidden_img, self.hidden_txt] {
            if w == HiddenWidth::Fixed(0) {
                return bad("layer widths must be positive".into());
            }
        }
        self.hash_adam()
            .validate()
            .and_then(|_| self.disc_adam().validate())
            .map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        self.effective_weights()
            .validate()
            .and_then(|_| self.effective_contrastive().validate())
            .map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }
}

/// `lr * lr_decay_factor^floor(epoch / lr_decay_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_every.max(1)) as i32;
    cfg.lr * cfg.lr_decay_factor.powi(k)
}

/// Dataset-wide binary codes for the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub codes: Array2<i8>,
    pub version: u64,
}

/// Training views converted to `f64` once.
#[derive(Debug, Clone)]
struct TrainViews {
    images: Array2<f64>,
    texts: Array2<f64>,
    images_aug: Array2<f64>,
    texts_aug: Array2<f64>,
}

impl TrainViews {
    fn from_dataset(ds: &PairedDataset) -> Self {
        Self {
            images: ds.images.to_f64(),
            texts: ds.texts.to_f64(),
            images_aug: ds.images_aug.to_f64(),
            texts_aug: ds.texts_aug.to_f64(),
        }
    }

    fn len(&self) -> usize {
        self.images.nrows()
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    #[serde(flatten)]
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub f: Network,
    pub g: Network,
    pub d: Network,
    pub opt_f: AdamState,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub codes: CodeMatrix,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches.
    pub step: u64,
    views: TrainViews,
}

/// `sign(forward(x))` in eval mode with `sign(0) = +1`.
pub fn encode_dataset(net: &Network, x: ArrayView2<f64>) -> Result<Array2<i8>, NnError> {
    Ok(forward_eval(net, x)?.mapv(|v| if v < 0.0 { -1 } else { 1 }))
}

fn forward_eval(net: &Network, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
    if x.ncols() != net.input_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "input width {} != network input dim {}",
            x.ncols(),
            net.input_dim()
        )));
    }
    let mut out = Array2::zeros((x.nrows(), net.output_dim()));
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + ENCODE_CHUNK).min(x.nrows());
        let (h, _) = net.forward(x.slice(s![start..end, ..]), Mode::Eval)?;
        out.slice_mut(s![start..end, ..]).assign(&h);
        start = end;
    }
    Ok(out)
}

fn stack(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(0), &[a, b]).expect("same widths")
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in steps {
        m.c_inter += b.c_inter / n;
        m.c_img += b.c_img / n;
        m.c_txt += b.c_txt / n;
        m.a_disc += b.a_disc / n;
        m.a_gen += b.a_gen / n;
        m.q += b.q / n;
        m.bb += b.bb / n;
        m.total += b.total / n;
    }
    m.step = steps.last().map_or(0, |b| b.step);
    m
}

/// Builds the networks, optimizers and the initial code matrix.
pub fn init_training(ds: &PairedDataset, cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    ds.validate()?;
    if ds.len() < 2 {
        return Err(TrainError::ConfigInvalid(format!(
            "need at least 2 training pairs, got {}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim_img = ds.images.dim();
    let dim_txt = ds.texts.dim();
    let f = Network::hash_net(
        dim_img,
        cfg.hidden_img.resolve(dim_img, REFERENCE_HIDDEN_IMG),
        cfg.hidden2,
        cfg.code_len,
        &mut rng,
    );
    let g = Network::hash_net(
        dim_txt,
        cfg.hidden_txt.resolve(dim_txt, REFERENCE_HIDDEN_TXT),
        cfg.hidden2,
        cfg.code_len,
        &mut rng,
    );
    let d = Network::discriminator(cfg.code_len, cfg.disc_out_width, &mut rng);
    let views = TrainViews::from_dataset(ds);
    let codes = full_code_update(&f, &g, &views)?;
    Ok(TrainState {
        opt_f: AdamState::for_network(cfg.hash_adam(), &f),
        opt_g: AdamState::for_network(cfg.hash_adam(), &g),
        opt_d: AdamState::for_network(cfg.disc_adam(), &d),
        config: cfg.clone(),
        f,
        g,
        d,
        codes: CodeMatrix { codes, version: 0 },
        epoch: 0,
        step: 0,
        views,
    })
}

fn full_code_update(f: &Network, g: &Network, v: &TrainViews) -> Result<Array2<i8>, TrainError> {
    let hi = forward_eval(f, v.images.view())?;
    let hia = forward_eval(f, v.images_aug.view())?;
    let ht = forward_eval(g, v.texts.view())?;
    let hta = forward_eval(g, v.texts_aug.view())?;
    Ok(binary_update(hi.view(), hia.view(), ht.view(), hta.view())?)
}

impl TrainState {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.len() == 0
    }

    /// Seed-deterministic batch order for an epoch.
    pub fn batch_order(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut rng);
        perm.chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// One batch: discriminator step(s), hash step, code refresh.
    pub fn train_batch(&mut self, idx: &[usize]) -> Result<LossBreakdown, TrainError> {
        let m = idx.len();
        if m < 2 {
            return Err(TrainError::Nn(NnError::BatchTooSmall(m)));
        }
        let weights = self.config.effective_weights();
        let contrastive = self.config.effective_contrastive();
        let reduction = self.config.reduction;
        let v = &self.views;

        let xi = stack(
            v.images.select(Axis(0), idx).view(),
            v.images_aug.select(Axis(0), idx).view(),
        );
        let xt = stack(
            v.texts.select(Axis(0), idx).view(),
            v.texts_aug.select(Axis(0), idx).view(),
        );
        let (hi_all, cache_f) = self.f.forward(xi.view(), Mode::Train)?;
        let (ht_all, cache_g) = self.g.forward(xt.view(), Mode::Train)?;
        if hi_all.iter().chain(ht_all.iter()).any(|v| !v.is_finite()) {
            return Err(TrainError::NumericalDivergence { step: self.step });
        }
        self.f.commit_batch_stats(&cache_f)?;
        self.g.commit_batch_stats(&cache_g)?;

        // discriminator: text rows are "real", image rows "fake"
        let mut a_disc = 0.0;
        let din = stack(ht_all.view(), hi_all.view());
        for k in 0..self.config.disc_steps {
            let (z, cache_d) = self.d.forward(din.view(), Mode::Train)?;
            self.d.commit_batch_stats(&cache_d)?;
            let (loss, gt, gi) =
                discriminator_loss_with_grad(z.slice(s![..2 * m, ..]), z.slice(s![2 * m.., ..]))?;
            if k == 0 {
                a_disc = loss;
            }
            if !loss.is_finite() {
                return Err(TrainError::NumericalDivergence { step: self.step });
            }
            let (grads, _) = self
                .d
                .backward(&cache_d, stack(gt.view(), gi.view()).view())?;
            self.opt_d.step(&mut self.d, &grads)?;
        }

        // generator term through the current discriminator
        let (z_img, cache_dg) = self.d.forward(hi_all.view(), Mode::Train)?;
        let (a_gen, gz) = generator_loss_with_grad(z_img.view());
        let (_, grad_hi_adv) = self.d.backward(&cache_dg, gz.view())?;

        let h_i = hi_all.slice(s![..m, ..]).to_owned();
        let h_i_aug = hi_all.slice(s![m.., ..]).to_owned();
        let h_t = ht_all.slice(s![..m, ..]).to_owned();
        let h_t_aug = ht_all.slice(s![m.., ..]).to_owned();
        let b = self.codes.codes.select(Axis(0), idx).mapv(|c| c as f64);
        let batch = BatchCodes::new(h_i, h_i_aug, h_t, h_t_aug, b)?;

        let c = contrastive_total_with_grad(
            batch.h_i.view(),
            batch.h_t.view(),
            batch.h_i_aug.view(),
            batch.h_t_aug.view(),
            &contrastive,
        )?;
        let q = quantization_loss(&batch, reduction);
        let bb = bit_balance_loss(&batch, reduction);
        let breakdown = LossBreakdown {
            step: self.step,
            c_inter: c.inter,
            c_img: c.img,
            c_txt: c.txt,
            a_disc,
            a_gen,
            q,
            bb,
            total: c.total + weights.alpha * a_gen + weights.beta * q + weights.gamma * bb,
        };
        if !breakdown.is_finite() {
            return Err(TrainError::NumericalDivergence { step: self.step });
        }

        let qg = quantization_grads(&batch, reduction);
        let bg = bit_balance_grads(&batch, reduction);
        let combine = |base: &Array2<f64>, view: usize| {
            let mut out = base.clone();
            out.scaled_add(weights.beta, &qg[view]);
            out.scaled_add(weights.gamma, &bg[view]);
            out
        };
        let mut grad_hi = stack(
            combine(&c.grad_f, 0).view(),
            combine(&c.grad_f_aug, 1).view(),
        );
        grad_hi.scaled_add(weights.alpha, &grad_hi_adv);
        let grad_ht = stack(
            combine(&c.grad_g, 2).view(),
            combine(&c.grad_g_aug, 3).view(),
        );

        let (gf, _) = self.f.backward(&cache_f, grad_hi.view())?;
        let (gg, _) = self.g.backward(&cache_g, grad_ht.view())?;
        self.opt_f.step(&mut self.f, &gf)?;
        self.opt_g.step(&mut self.g, &gg)?;

        if self.config.code_update == CodeUpdate::PerBatch {
            let fresh = binary_update(
                batch.h_i.view(),
                batch.h_i_aug.view(),
                batch.h_t.view(),
                batch.h_t_aug.view(),
            )?;
            for (r, &i) in idx.iter().enumerate() {
                self.codes.codes.row_mut(i).assign(&fresh.row(r));
            }
            self.codes.version += 1;
        }
        self.step += 1;
        Ok(breakdown)
    }

    /// One pass over the training set.
    pub fn train_epoch(&mut self) -> Result<EpochLog, TrainError> {
        let lr = lr_schedule(self.epoch, &self.config);
        self.opt_f.set_lr(lr);
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
        let mut steps = Vec::new();
        for idx in self.batch_order(self.epoch) {
            steps.push(self.train_batch(&idx)?);
        }
        if self.config.code_update == CodeUpdate::PerEpoch {
            self.codes.codes = full_code_update(&self.f, &self.g, &self.views)?;
            self.codes.version += 1;
        }
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            batches: steps.len(),
            mean: mean_breakdown(&steps),
        };
        self.epoch += 1;
        Ok(log)
    }

    pub fn model(&self) -> HashModel {
        HashModel {
            f: self.f.clone(),
            g: self.g.clone(),
        }
    }

    /// Everything needed to resume: networks, optimizer moments, codes and
    /// counters. The config itself is stored separately by the caller.
    pub fn checkpoint_tensors(&self) -> Vec<NamedTensor> {
        let mut t = Vec::new();
        t.extend(network_tensors("f", &self.f));
        t.extend(network_tensors("g", &self.g));
        t.extend(network_tensors("d", &self.d));
        t.extend(adam_tensors("opt_f", &self.opt_f));
        t.extend(adam_tensors("opt_g", &self.opt_g));
        t.extend(adam_tensors("opt_d", &self.opt_d));
        t.push(NamedTensor::matrix(
            "codes",
            &self.codes.codes.mapv(|c| c as f64),
        ));
        t.push(NamedTensor::scalar(
            "codes.version",
            self.codes.version as f64,
        ));
        t.push(NamedTensor::scalar("train.epoch", self.epoch as f64));
        t.push(NamedTensor::scalar("train.step", self.step as f64));
        t
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        Ok(checkpoint::save(&self.checkpoint_tensors(), path)?)
    }

    /// Restores a state saved with [`TrainState::save_checkpoint`].
    pub fn resume(
        ds: &PairedDataset,
        cfg: &TrainConfig,
        path: impl AsRef<Path>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        ds.validate()?;
        let map = TensorMap::new(checkpoint::load(path)?)?;
        let f = network_from_tensors("f", &map)?;
        let g = network_from_tensors("g", &map)?;
        let d = network_from_tensors("d", &map)?;
        if f.input_dim() != ds.images.dim() || g.input_dim() != ds.texts.dim() {
            return Err(TrainError::ConfigInvalid(
                "checkpoint input dims do not match the dataset".into(),
            ));
        }
        if f.output_dim() != cfg.code_len {
            return Err(TrainError::ConfigInvalid(format!(
                "checkpoint code length {} != config code_len {}",
                f.output_dim(),
                cfg.code_len
            )));
        }
        let codes = map.matrix("codes")?;
        if codes.dim() != (ds.len(), cfg.code_len) {
            return Err(TrainError::ConfigInvalid(
                "checkpoint code matrix does not match the dataset".into(),
            ));
        }
        Ok(Self {
            config: cfg.clone(),
            opt_f: adam_from_tensors("opt_f", &map)?,
            opt_g: adam_from_tensors("opt_g", &map)?,
            opt_d: adam_from_tensors("opt_d", &map)?,
            f,
            g,
            d,
            codes: CodeMatrix {
                codes: codes.mapv(|c| if c < 0.0 { -1 } else { 1 }),
                version: map.scalar("codes.version")? as u64,
            },
            epoch: map.scalar("train.epoch")? as usize,
            step: map.scalar("train.step")? as u64,
            views: TrainViews::from_dataset(ds),
        })
    }
}

/// Trained hash networks for encoding new data.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    pub f: Network,
    pub g: Network,
}

impl HashModel {
    pub fn code_len(&self) -> usize {
        self.f.output_dim()
    }

    pub fn encode_images(&self, x: ArrayView2<f64>) -> Result<Array2<i8>, NnError> {
        encode_dataset(&self.f, x)
    }

    pub fn encode_texts(&self, x: ArrayView2<f64>) -> Result<Array2<i8>, NnError> {
        encode_dataset(&self.g, x)
    }

    /// Reads the hash networks out of a training checkpoint.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let map = TensorMap::new(checkpoint::load(path)?)?;
        let f = network_from_tensors("f", &map)?;
        let g = network_from_tensors("g", &map)?;
        if f.output_dim() != g.output_dim() {
            return Err(TrainError::ConfigInvalid(
                "image and text networks disagree on code length".into(),
            ));
        }
        Ok(Self { f, g })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    /// One JSON object per epoch.
    pub log: Option<PathBuf>,
}

/// Runs `cfg.epochs` epochs from scratch.
pub fn train(
    ds: &PairedDataset,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(TrainState, TrainReport), TrainError> {
    let start = Instant::now();
    let mut state = init_training(ds, cfg)?;
    let mut log_file = match &outputs.log {
        Some(p) => Some(fs::File::create(p).map_err(io_err(p))?),
        None => None,
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let log = state.train_epoch()?;
        if let (Some(file), Some(path)) = (log_file.as_mut(), outputs.log.as_ref()) {
            let line = serde_json::to_string(&log).expect("plain data serializes");
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        epochs.push(log);
    }
    if let Some(p) = &outputs.checkpoint {
        state.save_checkpoint(p)?;
    }
    let report = TrainReport {
        seed: cfg.seed,
        epochs,
        checkpoint: outputs.checkpoint.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}
