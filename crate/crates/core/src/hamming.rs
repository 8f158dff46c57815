// SPDX-License-Identifier: Apache-2.0

//! Bit-packed binary codes with exact Hamming top-K search.
//!
//! Bit `b` of a code lives in word `b / 64` at bit position `b % 64`
//! (LSB first); `+1` maps to a set bit, `-1` to a clear bit. Padding bits
//! past `code_len` are always zero, so distances are plain XOR popcounts.
//!
//! `DUB1` code files: magic `DUB1`, `u32` LE `num_codes`, `u32` LE
//! `code_len`, then `num_codes * words_per_code` `u64` LE words, then one
//! `u32` LE length-prefixed UTF-8 id per code.

use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CODE_MAGIC: &[u8; 4] = b"DUB1";

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("entry ({row}, {col}) is {value}, expected +1 or -1")]
    NonBipolarEntry { row: usize, col: usize, value: i64 },
    #[error("code length mismatch: {0} vs {1} words")]
    LengthMismatch(usize, usize),
    #[error("index is empty")]
    EmptyIndex,
    #[error("K must be at least 1")]
    InvalidK,
    #[error("{ids} ids for {codes} codes")]
    IdCount { ids: usize, codes: usize },
    #[error("code length must be positive")]
    ZeroCodeLength,
    #[error("bad magic: expected DUB1")]
    BadMagic,
    #[error("code file truncated at byte offset {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes in code file")]
    TrailingData(usize),
    #[error("nonzero padding bits in row {0}")]
    DirtyPadding(usize),
    #[error("id at byte offset {0} is not valid UTF-8")]
    BadId(usize),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

pub fn words_for(code_len: usize) -> usize {
    code_len.div_ceil(64)
}

fn padding_mask(code_len: usize) -> u64 {
    match code_len % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Packs one bipolar row.
pub fn pack_row(code: &[i8]) -> Result<Vec<u64>, IndexError> {
    let mut words = vec![0u64; words_for(code.len())];
    for (b, &v) in code.iter().enumerate() {
        match v {
            1 => words[b / 64] |= 1 << (b % 64),
            -1 => {}
            other => {
                return Err(IndexError::NonBipolarEntry {
                    row: 0,
                    col: b,
                    value: other.into(),
                })
            }
        }
    }
    Ok(words)
}

/// XOR popcount over equal-length packed rows.
pub fn hamming_distance(a: &[u64], b: &[u64]) -> Result<u32, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::LengthMismatch(a.len(), b.len()));
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
fn hamming_unchecked(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub position: usize,
    pub distance: u32,
}

/// Ranked hits, ascending distance, ties by ascending database position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

impl QueryResult {
    pub fn positions(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.position).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodeIndex {
    code_len: usize,
    words_per_code: usize,
    storage: Vec<u64>,
    ids: Vec<String>,
}

impl PackedCodeIndex {
    /// Packs an `N x B` matrix of `+1`/`-1` entries.
    pub fn pack(codes: ArrayView2<i8>, ids: Vec<String>) -> Result<Self, IndexError> {
        let (n, code_len) = codes.dim();
        if code_len == 0 {
            return Err(IndexError::ZeroCodeLength);
        }
        if ids.len() != n {
            return Err(IndexError::IdCount {
                ids: ids.len(),
                codes: n,
            });
        }
        let words_per_code = words_for(code_len);
        let mut storage = vec![0u64; n * words_per_code];
        for ((r, c), &v) in codes.indexed_iter() {
            match v {
                1 => storage[r * words_per_code + c / 64] |= 1 << (c % 64),
                -1 => {}
                other => {
                    return Err(IndexError::NonBipolarEntry {
                        row: r,
                        col: c,
                        value: other.into(),
                    })
                }
            }
        }
        Ok(Self {
            code_len,
            words_per_code,
            storage,
            ids,
        })
    }

    /// Packs with ids `"0"`, `"1"`, ...
    pub fn pack_anonymous(codes: ArrayView2<i8>) -> Result<Self, IndexError> {
        let ids = (0..codes.nrows()).map(|i| i.to_string()).collect();
        Self::pack(codes, ids)
    }

    pub fn from_words(
        code_len: usize,
        storage: Vec<u64>,
        ids: Vec<String>,
    ) -> Result<Self, IndexError> {
        if code_len == 0 {
            return Err(IndexError::ZeroCodeLength);
        }
        let words_per_code = words_for(code_len);
        if storage.len() != ids.len() * words_per_code {
            return Err(IndexError::IdCount {
                ids: ids.len(),
                codes: storage.len() / words_per_code,
            });
        }
        let mask = padding_mask(code_len);
        for (r, row) in storage.chunks_exact(words_per_code).enumerate() {
            if row[words_per_code - 1] & !mask != 0 {
                return Err(IndexError::DirtyPadding(r));
            }
        }
        Ok(Self {
            code_len,
            words_per_code,
            storage,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn storage(&self) -> &[u64] {
        &self.storage
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.storage[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.storage.chunks_exact(self.words_per_code)
    }

    pub fn unpack(&self) -> Array2<i8> {
        Array2::from_shape_fn((self.len(), self.code_len), |(r, c)| {
            if self.row(r)[c / 64] >> (c % 64) & 1 == 1 {
                1
            } else {
                -1
            }
        })
    }

    fn check_query(&self, query: &[u64], k: usize) -> Result<(), IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.len() != self.words_per_code {
            return Err(IndexError::LengthMismatch(query.len(), self.words_per_code));
        }
        Ok(())
    }

    /// Bounded max-heap over `(distance, position)` for rows in `range`.
    fn select(&self, query: &[u64], k: usize, range: std::ops::Range<usize>) -> Vec<(u32, usize)> {
        let mut heap: BinaryHeap<(u32, usize)> = BinaryHeap::with_capacity(k + 1);
        for pos in range {
            let d = hamming_unchecked(query, self.row(pos));
            if heap.len() < k {
                heap.push((d, pos));
            } else if let Some(&top) = heap.peek() {
                if (d, pos) < top {
                    heap.pop();
                    heap.push((d, pos));
                }
            }
        }
        heap.into_sorted_vec()
    }

    fn to_result(&self, ranked: Vec<(u32, usize)>) -> QueryResult {
        QueryResult {
            hits: ranked
                .into_iter()
                .map(|(distance, position)| Hit {
                    id: self.ids[position].clone(),
                    position,
                    distance,
                })
                .collect(),
        }
    }

    /// The `min(k, len)` nearest codes.
    pub fn top_k(&self, query: &[u64], k: usize) -> Result<QueryResult, IndexError> {
        self.check_query(query, k)?;
        Ok(self.to_result(self.select(query, k, 0..self.len())))
    }

    /// [`top_k`](Self::top_k) computed over `shards` contiguous row ranges in
    /// parallel, merged by `(distance, position)`. Identical output.
    pub fn top_k_sharded(
        &self,
        query: &[u64],
        k: usize,
        shards: usize,
    ) -> Result<QueryResult, IndexError> {
        self.check_query(query, k)?;
        let shards = shards.clamp(1, self.len());
        let chunk = self.len().div_ceil(shards);
        let mut merged: Vec<(u32, usize)> = (0..shards)
            .into_par_iter()
            .map(|s| {
                let start = s * chunk;
                let end = ((s + 1) * chunk).min(self.len());
                self.select(query, k, start..end)
            })
            .flatten()
            .collect();
        merged.sort_unstable();
        merged.truncate(k);
        Ok(self.to_result(merged))
    }

    /// Every database row ranked by a stable sort on distance.
    pub fn full_ranking(&self, query: &[u64]) -> Result<Vec<(usize, u32)>, IndexError> {
        self.check_query(query, 1)?;
        let mut all: Vec<(usize, u32)> = self
            .rows()
            .enumerate()
            .map(|(i, row)| (i, hamming_unchecked(query, row)))
            .collect();
        all.sort_by_key(|&(_, d)| d);
        Ok(all)
    }

    /// One top-K search per row of `queries`, in query order.
    pub fn search_all(
        &self,
        queries: &PackedCodeIndex,
        k: usize,
    ) -> Result<Vec<QueryResult>, IndexError> {
        if queries.code_len != self.code_len {
            return Err(IndexError::LengthMismatch(queries.code_len, self.code_len));
        }
        (0..queries.len())
            .into_par_iter()
            .map(|q| self.top_k(queries.row(q), k))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.storage.len() * 8);
        out.extend_from_slice(CODE_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.code_len as u32).to_le_bytes());
        for w in &self.storage {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 4 || &bytes[..4] != CODE_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8], IndexError> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(IndexError::Truncated(bytes.len()));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let num = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let code_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if code_len == 0 {
            return Err(IndexError::ZeroCodeLength);
        }
        let wpc = words_for(code_len);
        let payload = take(num * wpc * 8)?;
        let storage: Vec<u64> = payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut ids = Vec::with_capacity(num);
        for _ in 0..num {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| IndexError::BadId(raw.as_ptr() as usize - bytes.as_ptr() as usize))?;
            ids.push(id.to_string());
        }
        if pos != bytes.len() {
            return Err(IndexError::TrailingData(bytes.len() - pos));
        }
        Self::from_words(code_len, storage, ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Summary of a code file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub num_codes: usize,
    pub code_len: usize,
    pub words_per_code: usize,
    pub distinct_codes: usize,
    /// Fraction of codes with each bit set.
    pub bit_ones_fraction: Vec<f64>,
}

impl PackedCodeIndex {
    pub fn stats(&self) -> IndexStats {
        let mut distinct: Vec<&[u64]> = self.rows().collect();
        distinct.sort_unstable();
        distinct.dedup();
        let n = self.len().max(1) as f64;
        let bit_ones_fraction = (0..self.code_len)
            .map(|b| {
                self.rows()
                    .filter(|row| row[b / 64] >> (b % 64) & 1 == 1)
                    .count() as f64
                    / n
            })
            .collect();
        IndexStats {
            num_codes: self.len(),
            code_len: self.code_len,
            words_per_code: self.words_per_code,
            distinct_codes: distinct.len(),
            bit_ones_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_codes(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Array2<i8> {
        Array2::from_shape_fn((n, b), |_| if rng.random_bool(0.5) { 1 } else { -1 })
    }

    #[test]
    fn bit_layout() {
        let idx = PackedCodeIndex::pack_anonymous(array![[1i8, -1, 1, 1]].view()).unwrap();
        assert_eq!(idx.row(0), &[0b1101]);
        let neg = PackedCodeIndex::pack_anonymous(Array2::from_elem((1, 70), -1i8).view()).unwrap();
        assert_eq!(neg.row(0), &[0, 0]);
        assert_eq!(pack_row(&[1, -1, 1, 1]).unwrap(), vec![0b1101]);
    }

    #[test]
    fn non_bipolar_rejected() {
        let err = PackedCodeIndex::pack_anonymous(array![[1i8, 0]].view()).unwrap_err();
        assert_eq!(
            err,
            IndexError::NonBipolarEntry {
                row: 0,
                col: 1,
                value: 0
            }
        );
    }

    #[test]
    fn distance_examples() {
        let a = pack_row(&[1; 16]).unwrap();
        let b = pack_row(&[-1; 16]).unwrap();
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        assert_eq!(hamming_distance(&a, &b).unwrap(), 16);
        assert!(hamming_distance(&a, &[0, 0]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codes = random_codes(&mut rng, 30, 20);
        let idx = PackedCodeIndex::pack_anonymous(codes.view()).unwrap();
        let q = idx.row(7).to_vec();
        let res = idx.top_k(&q, 100).unwrap();
        assert_eq!(res.hits.len(), 30);
        assert_eq!(res.hits[0].distance, 0);
        assert!(res.hits.windows(2).all(|w| w[0].distance <= w[1].distance));
        let full: Vec<usize> = idx.full_ranking(&q).unwrap().iter().map(|x| x.0).collect();
        assert_eq!(res.positions(), full);
        assert_eq!(idx.top_k(&q, 0).unwrap_err(), IndexError::InvalidK);
        let empty = PackedCodeIndex::pack_anonymous(Array2::<i8>::zeros((0, 20)).view()).unwrap();
        assert_eq!(empty.top_k(&q, 1).unwrap_err(), IndexError::EmptyIndex);
    }

    #[test]
    fn ties_follow_position() {
        let codes = array![[1i8, 1], [-1, -1], [1, 1], [1, -1], [1, 1]];
        let idx = PackedCodeIndex::pack_anonymous(codes.view()).unwrap();
        let q = pack_row(&[1, 1]).unwrap();
        assert_eq!(idx.top_k(&q, 3).unwrap().positions(), vec![0, 2, 4]);
        assert_eq!(idx.top_k(&q, 4).unwrap().positions(), vec![0, 2, 4, 3]);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes = random_codes(&mut rng, 9, 70);
        let ids: Vec<String> = (0..9).map(|i| format!("id-{i}")).collect();
        let idx = PackedCodeIndex::pack(codes.view(), ids).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(PackedCodeIndex::from_bytes(&bytes).unwrap(), idx);
        assert_eq!(
            PackedCodeIndex::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err(),
            IndexError::Truncated(bytes.len() - 1)
        );
        let mut dirty = bytes.clone();
        // high padding bit of row 0 word 1
        dirty[12 + 15] |= 0x80;
        assert_eq!(
            PackedCodeIndex::from_bytes(&dirty).unwrap_err(),
            IndexError::DirtyPadding(0)
        );
        assert_eq!(
            PackedCodeIndex::from_bytes(b"DUBX").unwrap_err(),
            IndexError::BadMagic
        );
    }

    #[test]
    fn sharded_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes = random_codes(&mut rng, 257, 24);
        let idx = PackedCodeIndex::pack_anonymous(codes.view()).unwrap();
        for q in 0..10 {
            let query = idx.row(q * 13).to_vec();
            for shards in [1, 3, 8, 1000] {
                assert_eq!(
                    idx.top_k_sharded(&query, 17, shards).unwrap(),
                    idx.top_k(&query, 17).unwrap()
                );
            }
        }
    }

    #[test]
    fn stats_counts() {
        let codes = array![[1i8, -1], [1, -1], [1, 1]];
        let s = PackedCodeIndex::pack_anonymous(codes.view())
            .unwrap()
            .stats();
        assert_eq!(s.distinct_codes, 2);
        assert_eq!(s.bit_ones_fraction, vec![1.0, 1.0 / 3.0]);
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(n in 1usize..12, b in 1usize..150, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes = random_codes(&mut rng, n, b);
            let idx = PackedCodeIndex::pack_anonymous(codes.view()).unwrap();
            prop_assert_eq!(idx.unpack(), codes);
            let mask = padding_mask(b);
            for row in idx.rows() {
                prop_assert_eq!(row[row.len() - 1] & !mask, 0);
            }
        }

        #[test]
        fn metric_axioms(b in 1usize..200, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes = random_codes(&mut rng, 3, b);
            let idx = PackedCodeIndex::pack_anonymous(codes.view()).unwrap();
            let d = |i: usize, j: usize| hamming_distance(idx.row(i), idx.row(j)).unwrap();
            prop_assert_eq!(d(0, 0), 0);
            prop_assert_eq!(d(0, 1), d(1, 0));
            prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2));
            prop_assert!(d(0, 1) as usize <= b);
        }
    }
}
