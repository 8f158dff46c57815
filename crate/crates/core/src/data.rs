// SPDX-License-Identifier: Apache-2.0

//! Embedding files, paired datasets, deterministic splits and a synthetic
//! clustered-data generator.
//!
//! The `DUC1` embedding file layout is:
//!
//! | bytes    | content                                         |
//! |----------|-------------------------------------------------|
//! | 0..4     | magic `DUC1`                                    |
//! | 4        | modality (0 = image, 1 = text)                  |
//! | 5..9     | row count, `u32` little-endian                  |
//! | 9..13    | dimension, `u32` little-endian                  |
//! | 13..     | `count * dim` `f32` little-endian, row-major    |

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DUC1";
const HEADER_LEN: usize = 13;

/// Maximum rejection attempts per class center in [`generate_synthetic`].
pub const MAX_CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic at byte offset 0: expected DUC1")]
    BadMagic,
    #[error("unknown modality byte {value} at byte offset 4")]
    BadModality { value: u8 },
    #[error("file truncated at byte offset {offset}: expected {expected} bytes")]
    TruncatedFile { offset: usize, expected: usize },
    #[error("{extra} trailing bytes after payload at byte offset {offset}")]
    TrailingData { offset: usize, extra: usize },
    #[error("non-finite value at byte offset {offset}")]
    NonFiniteValue { offset: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteElement { row: usize, col: usize },
    #[error("embedding set must have at least one row and one column (got {count}x{dim})")]
    EmptySet { count: usize, dim: usize },
    #[error("dataset inconsistent: {0}")]
    Inconsistent(String),
    #[error("need at least {min} samples to split, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic parameters: {0}")]
    InvalidSynthetic(String),
    #[error("could not place {classes} centers {min_angle_deg} degrees apart in dimension {dim}")]
    CenterSeparationFailure {
        classes: usize,
        dim: usize,
        min_angle_deg: f64,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_tag(value: u8) -> Option<Self> {
        match value {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }
}

/// An `N x dim` matrix of finite `f32` embeddings for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    modality: Modality,
    data: Array2<f32>,
}

impl EmbeddingSet {
    pub fn new(modality: Modality, data: Array2<f32>) -> Result<Self, DataError> {
        let (count, dim) = data.dim();
        if count == 0 || dim == 0 {
            return Err(DataError::EmptySet { count, dim });
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFiniteElement { row, col });
        }
        Ok(Self { modality, data })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn count(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    /// Widened copy used by the training math.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            modality: self.modality,
            data: self.data.select(Axis(0), indices),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.push(self.modality.tag());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(DataError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(DataError::TruncatedFile {
                offset: bytes.len(),
                expected: HEADER_LEN,
            });
        }
        let modality =
            Modality::from_tag(bytes[4]).ok_or(DataError::BadModality { value: bytes[4] })?;
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if count == 0 || dim == 0 {
            return Err(DataError::EmptySet { count, dim });
        }
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| DataError::Inconsistent(format!("header {count}x{dim} overflows")))?;
        if bytes.len() < expected {
            return Err(DataError::TruncatedFile {
                offset: bytes.len(),
                expected,
            });
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingData {
                offset: expected,
                extra: bytes.len() - expected,
            });
        }
        let mut values = Vec::with_capacity(count * dim);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(DataError::NonFiniteValue {
                    offset: HEADER_LEN + 4 * i,
                });
            }
            values.push(v);
        }
        let data = Array2::from_shape_vec((count, dim), values)
            .map_err(|e| DataError::Inconsistent(e.to_string()))?;
        Ok(Self { modality, data })
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    EmbeddingSet::from_bytes(&bytes)
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, set.to_bytes()).map_err(io_err(path))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let trimmed = line.trim();
        let label = trimmed.parse::<u32>().map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("bad label {trimmed:?}: {e}"),
        })?;
        labels.push(label);
    }
    Ok(labels)
}

pub fn write_labels(labels: &[u32], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_ids(path: impl AsRef<Path>) -> Result<Vec<String>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let token = line.trim();
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("id must be a single non-empty token, got {line:?}"),
            });
        }
        ids.push(token.to_string());
    }
    Ok(ids)
}

pub fn write_ids(ids: &[String], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    file.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Aligned image/text embeddings, their augmented views, ids, and optional
/// evaluation-only class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub images: EmbeddingSet,
    pub texts: EmbeddingSet,
    pub images_aug: EmbeddingSet,
    pub texts_aug: EmbeddingSet,
    pub labels: Option<Vec<u32>>,
    pub ids: Vec<String>,
}

/// File names used inside a dataset directory.
pub mod layout {
    pub const IMAGES: &str = "images.duc1";
    pub const TEXTS: &str = "texts.duc1";
    pub const IMAGES_AUG: &str = "images_aug.duc1";
    pub const TEXTS_AUG: &str = "texts_aug.duc1";
    pub const LABELS: &str = "labels.txt";
    pub const IDS: &str = "ids.txt";
}

impl PairedDataset {
    pub fn new(
        images: EmbeddingSet,
        texts: EmbeddingSet,
        images_aug: EmbeddingSet,
        texts_aug: EmbeddingSet,
        labels: Option<Vec<u32>>,
        ids: Vec<String>,
    ) -> Result<Self, DataError> {
        let ds = Self {
            images,
            texts,
            images_aug,
            texts_aug,
            labels,
            ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.images.count();
        let sets = [
            ("texts", &self.texts),
            ("images_aug", &self.images_aug),
            ("texts_aug", &self.texts_aug),
        ];
        for (name, set) in sets {
            if set.count() != n {
                return Err(DataError::Inconsistent(format!(
                    "{name} has {} rows, images has {n}",
                    set.count()
                )));
            }
        }
        if self.images.modality() != Modality::Image
            || self.images_aug.modality() != Modality::Image
        {
            return Err(DataError::Inconsistent(
                "image sets must have image modality".into(),
            ));
        }
        if self.texts.modality() != Modality::Text || self.texts_aug.modality() != Modality::Text {
            return Err(DataError::Inconsistent(
                "text sets must have text modality".into(),
            ));
        }
        if self.images.dim() != self.images_aug.dim() {
            return Err(DataError::Inconsistent(format!(
                "image dim {} != augmented image dim {}",
                self.images.dim(),
                self.images_aug.dim()
            )));
        }
        if self.texts.dim() != self.texts_aug.dim() {
            return Err(DataError::Inconsistent(format!(
                "text dim {} != augmented text dim {}",
                self.texts.dim(),
                self.texts_aug.dim()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(DataError::Inconsistent(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
        }
        if self.ids.len() != n {
            return Err(DataError::Inconsistent(format!(
                "{} ids for {n} samples",
                self.ids.len()
            )));
        }
        let unique: HashSet<&str> = self.ids.iter().map(String::as_str).collect();
        if unique.len() != n {
            return Err(DataError::Inconsistent("ids are not unique".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples at `indices`, preserving the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            texts: self.texts.select(indices),
            images_aug: self.images_aug.select(indices),
            texts_aug: self.texts_aug.select(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Writes the four embedding files, `ids.txt`, and `labels.txt` when
    /// labels are present.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_embeddings(&self.images, dir.join(layout::IMAGES))?;
        write_embeddings(&self.texts, dir.join(layout::TEXTS))?;
        write_embeddings(&self.images_aug, dir.join(layout::IMAGES_AUG))?;
        write_embeddings(&self.texts_aug, dir.join(layout::TEXTS_AUG))?;
        write_ids(&self.ids, dir.join(layout::IDS))?;
        if let Some(labels) = &self.labels {
            write_labels(labels, dir.join(layout::LABELS))?;
        }
        Ok(())
    }

    /// Loads a directory written by [`PairedDataset::save_dir`]. Missing
    /// augmented files fall back to the un-augmented views; a missing ids file
    /// falls back to row indices.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let dir = dir.as_ref();
        let images = load_embeddings(dir.join(layout::IMAGES))?;
        let texts = load_embeddings(dir.join(layout::TEXTS))?;
        let images_aug = match dir.join(layout::IMAGES_AUG) {
            p if p.exists() => load_embeddings(p)?,
            _ => images.clone(),
        };
        let texts_aug = match dir.join(layout::TEXTS_AUG) {
            p if p.exists() => load_embeddings(p)?,
            _ => texts.clone(),
        };
        let labels_path = dir.join(layout::LABELS);
        let labels = if labels_path.exists() {
            Some(read_labels(labels_path)?)
        } else {
            None
        };
        let ids_path = dir.join(layout::IDS);
        let ids = if ids_path.exists() {
            read_ids(ids_path)?
        } else {
            (0..images.count()).map(|i| i.to_string()).collect()
        };
        Self::new(images, texts, images_aug, texts_aug, labels, ids)
    }
}

/// Train/query/retrieval proportions as integer parts of their sum, so the
/// three fractions always add up to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: u32,
    pub query: u32,
    pub retrieval: u32,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 50,
            query: 10,
            retrieval: 40,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(train: u32, query: u32, retrieval: u32, seed: u64) -> Result<Self, DataError> {
        if train == 0 || query == 0 || retrieval == 0 {
            return Err(DataError::InvalidSplit(
                "every fraction must be positive".into(),
            ));
        }
        Ok(Self {
            train,
            query,
            retrieval,
            seed,
        })
    }

    /// Parses decimal fractions such as `0.5,0.1,0.4`. The fractions must sum
    /// to one exactly in decimal arithmetic.
    pub fn from_decimal_fractions(fracs: &[&str; 3], seed: u64) -> Result<Self, DataError> {
        let scale_digits = fracs
            .iter()
            .map(|f| f.trim().split_once('.').map_or(0, |(_, d)| d.len()))
            .max()
            .unwrap_or(0);
        if scale_digits > 9 {
            return Err(DataError::InvalidSplit("too many decimal digits".into()));
        }
        let scale = 10u64.pow(scale_digits as u32);
        let mut parts = [0u64; 3];
        for (slot, text) in parts.iter_mut().zip(fracs) {
            let text = text.trim();
            let (int, frac) = text.split_once('.').unwrap_or((text, ""));
            let bad = || DataError::InvalidSplit(format!("bad fraction {text:?}"));
            let int: u64 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| bad())?
            };
            let frac_val: u64 = if frac.is_empty() {
                0
            } else {
                frac.parse().map_err(|_| bad())?
            };
            *slot = int * scale + frac_val * 10u64.pow((scale_digits - frac.len()) as u32);
        }
        if parts.iter().sum::<u64>() != scale {
            return Err(DataError::InvalidSplit(format!(
                "fractions {fracs:?} do not sum to 1"
            )));
        }
        let to_u32 =
            |v: u64| u32::try_from(v).map_err(|_| DataError::InvalidSplit("overflow".into()));
        Self::new(
            to_u32(parts[0])?,
            to_u32(parts[1])?,
            to_u32(parts[2])?,
            seed,
        )
    }

    fn total(&self) -> u64 {
        u64::from(self.train) + u64::from(self.query) + u64::from(self.retrieval)
    }

    /// `(train, query, retrieval)` sizes for `n` samples; floors for the first
    /// two, remainder to retrieval.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let total = self.total();
        let n_train = (n as u64 * u64::from(self.train) / total) as usize;
        let n_query = (n as u64 * u64::from(self.query) / total) as usize;
        (n_train, n_query, n - n_train - n_query)
    }

    /// Index sets of the three partitions, each in ascending order.
    pub fn partition(&self, n: usize) -> Result<[Vec<usize>; 3], DataError> {
        if n < 10 {
            return Err(DataError::TooFewSamples { min: 10, got: n });
        }
        if self.train == 0 || self.query == 0 || self.retrieval == 0 {
            return Err(DataError::InvalidSplit(
                "every fraction must be positive".into(),
            ));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        perm.shuffle(&mut rng);
        let (n_train, n_query, _) = self.sizes(n);
        let mut train = perm[..n_train].to_vec();
        let mut query = perm[n_train..n_train + n_query].to_vec();
        let mut retrieval = perm[n_train + n_query..].to_vec();
        train.sort_unstable();
        query.sort_unstable();
        retrieval.sort_unstable();
        Ok([train, query, retrieval])
    }
}

/// The three partitions of a dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: PairedDataset,
    pub query: PairedDataset,
    pub retrieval: PairedDataset,
}

pub fn split_dataset(ds: &PairedDataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    let [train, query, retrieval] = spec.partition(ds.len())?;
    Ok(Splits {
        train: ds.subset(&train),
        query: ds.subset(&query),
        retrieval: ds.subset(&retrieval),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim_img: usize,
    pub dim_txt: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Cosine above which two candidate centers are rejected (60 degrees).
const MAX_CENTER_COSINE: f64 = 0.5;

fn unit_centers(
    rng: &mut ChaCha8Rng,
    classes: usize,
    dim: usize,
) -> Result<Vec<Vec<f64>>, DataError> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while centers.len() < classes {
        let mut placed = false;
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            // f32 storage perturbs cosines slightly; keep a small margin.
            let ok = centers.iter().all(|c| {
                let cos: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                cos < MAX_CENTER_COSINE - 1e-4
            });
            if ok {
                centers.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::CenterSeparationFailure {
                classes,
                dim,
                min_angle_deg: 60.0,
            });
        }
    }
    Ok(centers)
}

/// Draws a labelled clustered dataset: one unit center per class per
/// modality, samples are center plus isotropic Gaussian noise, augmented
/// views are independent noise draws around the same center.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PairedDataset, DataError> {
    let SyntheticSpec {
        num_classes,
        per_class,
        dim_img,
        dim_txt,
        noise_sigma,
        seed,
    } = *spec;
    if num_classes < 2 {
        return Err(DataError::InvalidSynthetic(
            "num_classes must be >= 2".into(),
        ));
    }
    if per_class < 2 {
        return Err(DataError::InvalidSynthetic("per_class must be >= 2".into()));
    }
    if dim_img == 0 || dim_txt == 0 {
        return Err(DataError::InvalidSynthetic(
            "dimensions must be positive".into(),
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DataError::InvalidSynthetic(
            "noise_sigma must be >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img_centers = unit_centers(&mut rng, num_classes, dim_img)?;
    let txt_centers = unit_centers(&mut rng, num_classes, dim_txt)?;

    let n = num_classes * per_class;
    let mut images = Array2::<f32>::zeros((n, dim_img));
    let mut texts = Array2::<f32>::zeros((n, dim_txt));
    let mut images_aug = Array2::<f32>::zeros((n, dim_img));
    let mut texts_aug = Array2::<f32>::zeros((n, dim_txt));
    let mut labels = Vec::with_capacity(n);

    let fill = |row: ndarray::ArrayViewMut1<f32>, center: &[f64], rng: &mut ChaCha8Rng| {
        for (dst, &c) in row.into_iter().zip(center) {
            let noise: f64 = StandardNormal.sample(rng);
            *dst = (c + noise_sigma * noise) as f32;
        }
    };
    for i in 0..n {
        let class = i / per_class;
        fill(images.row_mut(i), &img_centers[class], &mut rng);
        fill(texts.row_mut(i), &txt_centers[class], &mut rng);
        fill(images_aug.row_mut(i), &img_centers[class], &mut rng);
        fill(texts_aug.row_mut(i), &txt_centers[class], &mut rng);
        labels.push(class as u32);
    }
    let width = n.to_string().len();
    let ids = (0..n).map(|i| format!("s{i:0width$}")).collect();
    PairedDataset::new(
        EmbeddingSet::new(Modality::Image, images)?,
        EmbeddingSet::new(Modality::Text, texts)?,
        EmbeddingSet::new(Modality::Image, images_aug)?,
        EmbeddingSet::new(Modality::Text, texts_aug)?,
        Some(labels),
        ids,
    )
}
