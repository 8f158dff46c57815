// SPDX-License-Identifier: Apache-2.0

//! `DUM1` checkpoint files: a named list of `f64` tensors.
//!
//! Layout: magic `DUM1`, `u32` LE tensor count, then per tensor a `u32` LE
//! name length, the UTF-8 name, a `u8` rank, `rank` `u32` LE dims and the
//! row-major `f64` LE payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::{Activation, AdamConfig, AdamState, BatchNormLayer, DenseLayer, Layer, Network};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DUM1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected DUM1")]
    BadMagic,
    #[error("checkpoint truncated at byte offset {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last tensor")]
    TrailingData(usize),
    #[error("tensor name is not valid UTF-8 at byte offset {0}")]
    BadName(usize),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected}")]
    BadShape {
        name: String,
        got: Vec<usize>,
        expected: String,
    },
    #[error("duplicate tensor {0:?}")]
    Duplicate(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![],
            data: vec![value],
        }
    }

    pub fn vector(name: impl Into<String>, data: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len()],
            data: data.to_vec(),
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName(name_at))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingData(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save(tensors: &[NamedTensor], path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Name-indexed view over a decoded checkpoint.
pub struct TensorMap {
    map: BTreeMap<String, NamedTensor>,
}

impl TensorMap {
    pub fn new(tensors: Vec<NamedTensor>) -> Result<Self, CheckpointError> {
        let mut map = BTreeMap::new();
        for t in tensors {
            let name = t.name.clone();
            if map.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Duplicate(name));
            }
        }
        Ok(Self { map })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor, CheckpointError> {
        self.map
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        let t = self.get(name)?;
        if !t.dims.is_empty() {
            return Err(CheckpointError::BadShape {
                name: name.into(),
                got: t.dims.clone(),
                expected: "scalar".into(),
            });
        }
        Ok(t.data[0])
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>, CheckpointError> {
        let t = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(CheckpointError::BadShape {
                name: name.into(),
                got: t.dims.clone(),
                expected: "rank 1".into(),
            });
        }
        Ok(Array1::from(t.data.clone()))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>, CheckpointError> {
        let t = self.get(name)?;
        if t.dims.len() != 2 {
            return Err(CheckpointError::BadShape {
                name: name.into(),
                got: t.dims.clone(),
                expected: "rank 2".into(),
            });
        }
        Ok(Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone()).expect("dims match"))
    }
}

fn activation_code(a: Activation) -> f64 {
    match a {
        Activation::Relu => 0.0,
        Activation::Tanh => 1.0,
        Activation::Identity => 2.0,
    }
}

fn activation_from_code(name: &str, v: f64) -> Result<Activation, CheckpointError> {
    match v as i64 {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Tanh),
        2 => Ok(Activation::Identity),
        _ => Err(CheckpointError::BadShape {
            name: name.into(),
            got: vec![],
            expected: "activation code 0, 1 or 2".into(),
        }),
    }
}

/// Tensors for every layer of `net`, named `{prefix}.{layer}.{field}`.
pub fn network_tensors(prefix: &str, net: &Network) -> Vec<NamedTensor> {
    let mut out = vec![NamedTensor::scalar(
        format!("{prefix}.num_layers"),
        net.layers().len() as f64,
    )];
    for (i, layer) in net.layers().iter().enumerate() {
        let p = format!("{prefix}.{i}");
        match layer {
            Layer::Dense(d) => {
                out.push(NamedTensor::matrix(format!("{p}.weight"), &d.weights));
                out.push(NamedTensor::vector(
                    format!("{p}.bias"),
                    d.bias.as_slice().unwrap(),
                ));
                out.push(NamedTensor::scalar(
                    format!("{p}.activation"),
                    activation_code(d.activation),
                ));
            }
            Layer::BatchNorm(b) => {
                out.push(NamedTensor::vector(
                    format!("{p}.gamma"),
                    b.gamma.as_slice().unwrap(),
                ));
                out.push(NamedTensor::vector(
                    format!("{p}.beta"),
                    b.beta.as_slice().unwrap(),
                ));
                out.push(NamedTensor::vector(
                    format!("{p}.running_mean"),
                    b.running_mean.as_slice().unwrap(),
                ));
                out.push(NamedTensor::vector(
                    format!("{p}.running_var"),
                    b.running_var.as_slice().unwrap(),
                ));
                out.push(NamedTensor::scalar(format!("{p}.momentum"), b.momentum));
                out.push(NamedTensor::scalar(format!("{p}.eps"), b.eps));
            }
        }
    }
    out
}

pub fn network_from_tensors(prefix: &str, map: &TensorMap) -> Result<Network, CheckpointError> {
    let n = map.scalar(&format!("{prefix}.num_layers"))? as usize;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let p = format!("{prefix}.{i}");
        if map.contains(&format!("{p}.weight")) {
            let act_name = format!("{p}.activation");
            let layer = DenseLayer::new(
                map.matrix(&format!("{p}.weight"))?,
                map.vector(&format!("{p}.bias"))?,
                activation_from_code(&act_name, map.scalar(&act_name)?)?,
            )
            .map_err(|e| CheckpointError::BadShape {
                name: p.clone(),
                got: vec![],
                expected: e.to_string(),
            })?;
            layers.push(Layer::Dense(layer));
        } else {
            layers.push(Layer::BatchNorm(BatchNormLayer {
                gamma: map.vector(&format!("{p}.gamma"))?,
                beta: map.vector(&format!("{p}.beta"))?,
                running_mean: map.vector(&format!("{p}.running_mean"))?,
                running_var: map.vector(&format!("{p}.running_var"))?,
                momentum: map.scalar(&format!("{p}.momentum"))?,
                eps: map.scalar(&format!("{p}.eps"))?,
            }));
        }
    }
    Network::new(layers).map_err(|e| CheckpointError::BadShape {
        name: prefix.into(),
        got: vec![],
        expected: e.to_string(),
    })
}

pub fn adam_tensors(prefix: &str, state: &AdamState) -> Vec<NamedTensor> {
    let c = &state.config;
    let mut out = vec![
        NamedTensor::scalar(format!("{prefix}.step"), state.step_count as f64),
        NamedTensor::scalar(format!("{prefix}.lr"), c.lr),
        NamedTensor::scalar(format!("{prefix}.beta1"), c.beta1),
        NamedTensor::scalar(format!("{prefix}.beta2"), c.beta2),
        NamedTensor::scalar(format!("{prefix}.eps"), c.eps),
        NamedTensor::scalar(format!("{prefix}.weight_decay"), c.weight_decay),
        NamedTensor::scalar(
            format!("{prefix}.num_tensors"),
            state.first_moment.len() as f64,
        ),
    ];
    for (i, (m, v)) in state
        .first_moment
        .iter()
        .zip(&state.second_moment)
        .enumerate()
    {
        out.push(NamedTensor::vector(format!("{prefix}.m.{i}"), m));
        out.push(NamedTensor::vector(format!("{prefix}.v.{i}"), v));
    }
    out
}

pub fn adam_from_tensors(prefix: &str, map: &TensorMap) -> Result<AdamState, CheckpointError> {
    let config = AdamConfig {
        lr: map.scalar(&format!("{prefix}.lr"))?,
        beta1: map.scalar(&format!("{prefix}.beta1"))?,
        beta2: map.scalar(&format!("{prefix}.beta2"))?,
        eps: map.scalar(&format!("{prefix}.eps"))?,
        weight_decay: map.scalar(&format!("{prefix}.weight_decay"))?,
    };
    let n = map.scalar(&format!("{prefix}.num_tensors"))? as usize;
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for i in 0..n {
        first.push(map.vector(&format!("{prefix}.m.{i}"))?.to_vec());
        second.push(map.vector(&format!("{prefix}.v.{i}"))?.to_vec());
    }
    Ok(AdamState {
        config,
        first_moment: first,
        second_moment: second,
        step_count: map.scalar(&format!("{prefix}.step"))? as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn network_and_adam_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::hash_net(3, 4, 5, 2, &mut rng);
        let mut adam = AdamState::for_network(AdamConfig::hash_default(), &net);
        adam.first_moment[0][1] = 0.25;
        adam.step_count = 7;
        let mut tensors = network_tensors("image", &net);
        tensors.extend(adam_tensors("adam.image", &adam));
        let decoded = decode(&encode(&tensors)).unwrap();
        assert_eq!(decoded, tensors);
        let map = TensorMap::new(decoded).unwrap();
        assert_eq!(network_from_tensors("image", &map).unwrap(), net);
        assert_eq!(adam_from_tensors("adam.image", &map).unwrap(), adam);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode(&[NamedTensor::vector("x", &[1.0, 2.0])]);
        assert!(matches!(decode(b"DUMX"), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode(&extra),
            Err(CheckpointError::TrailingData(1))
        ));
        let map = TensorMap::new(decode(&bytes).unwrap()).unwrap();
        assert!(matches!(map.scalar("y"), Err(CheckpointError::Missing(_))));
        assert!(matches!(
            map.matrix("x"),
            Err(CheckpointError::BadShape { .. })
        ));
    }
}
