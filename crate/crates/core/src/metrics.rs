// SPDX-License-Identifier: Apache-2.0

//! Label-based retrieval metrics over Hamming rankings.
//!
//! Average precision at cutoff `k` for query `i` is
//! `(1 / r) * sum_{j <= k} P_i(j) * rel_i(j)`, where `P_i(j)` is the
//! precision of the first `j` results. The normalizer `r` is either
//! `min(r_i, k)` ([`ApMode::MinRk`], default) or `r_i` ([`ApMode::Literal`]),
//! with `r_i` the number of relevant database items.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hamming::{IndexError, PackedCodeIndex};

/// Cutoffs of the precision curve.
pub const CURVE_STEP: usize = 5;
pub const CURVE_MAX: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("no query has a relevant item in the database")]
    NoEvaluableQueries,
    #[error("K = {k} exceeds ranking length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{0}")]
    Mismatch(String),
    #[error("unknown direction {0:?} (expected i2t or t2i)")]
    UnknownDirection(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl FromStr for Direction {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "i2t" | "image_to_text" => Ok(Direction::ImageToText),
            "t2i" | "text_to_image" => Ok(Direction::TextToImage),
            _ => Err(MetricError::UnknownDirection(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    #[default]
    MinRk,
    Literal,
}

/// Relevance by class-label equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceOracle {
    query_labels: Vec<u32>,
    db_labels: Vec<u32>,
}

impl RelevanceOracle {
    pub fn new(query_labels: Vec<u32>, db_labels: Vec<u32>) -> Self {
        Self {
            query_labels,
            db_labels,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.query_labels.len()
    }

    pub fn db_len(&self) -> usize {
        self.db_labels.len()
    }

    pub fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.query_labels[query] == self.db_labels[item]
    }

    /// `r_i`: relevant items in the whole database.
    pub fn relevant_count(&self, query: usize) -> usize {
        let q = self.query_labels[query];
        self.db_labels.iter().filter(|&&l| l == q).count()
    }
}

/// AP of one ranking truncated at `k`; `None` when the query has no relevant
/// database item.
pub fn average_precision_at_k(
    ranking: &[usize],
    oracle: &RelevanceOracle,
    query: usize,
    k: usize,
    mode: ApMode,
) -> Result<Option<f64>, MetricError> {
    if ranking.is_empty() {
        return Err(MetricError::EmptyRanking);
    }
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let r = oracle.relevant_count(query);
    if r == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, &item) in ranking.iter().take(k).enumerate() {
        if oracle.is_relevant(query, item) {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    let denom = match mode {
        ApMode::MinRk => r.min(k),
        ApMode::Literal => r,
    };
    Ok(Some(sum / denom as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Mean AP over queries with at least one relevant item, summed in query
/// order.
pub fn mean_average_precision(
    rankings: &[Vec<usize>],
    oracle: &RelevanceOracle,
    k: usize,
    mode: ApMode,
) -> Result<MapSummary, MetricError> {
    if rankings.len() != oracle.num_queries() {
        return Err(MetricError::Mismatch(format!(
            "{} rankings for {} queries",
            rankings.len(),
            oracle.num_queries()
        )));
    }
    let aps: Vec<Option<f64>> = rankings
        .par_iter()
        .enumerate()
        .map(|(i, r)| average_precision_at_k(r, oracle, i, k, mode))
        .collect::<Result<_, _>>()?;
    let (mut sum, mut evaluated) = (0.0, 0usize);
    for ap in aps.iter().flatten() {
        sum += ap;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(MetricError::NoEvaluableQueries);
    }
    Ok(MapSummary {
        map: sum / evaluated as f64,
        evaluated,
        excluded: aps.len() - evaluated,
    })
}

/// Fraction of relevant items among the first `k` of `ranking`.
pub fn precision_at_k(
    ranking: &[usize],
    oracle: &RelevanceOracle,
    query: usize,
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if k > ranking.len() {
        return Err(MetricError::KTooLarge {
            k,
            len: ranking.len(),
        });
    }
    let rel = ranking[..k]
        .iter()
        .filter(|&&item| oracle.is_relevant(query, item))
        .count();
    Ok(rel as f64 / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub direction: Direction,
    pub map_at_k: f64,
    pub k: usize,
    /// `(K, P@K)` for `K = 5, 10, ..., 200` up to the database size; P@K is
    /// averaged over every query.
    pub precision_curve: Vec<(usize, f64)>,
    pub num_queries: usize,
    /// Queries without any relevant database item, left out of the mAP.
    pub excluded_queries: usize,
    pub ap_mode: ApMode,
}

impl MetricReport {
    /// `K,P` rows with a header line.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("K,P\n");
        for (k, p) in &self.precision_curve {
            let _ = writeln!(out, "{k},{p}");
        }
        out
    }
}

/// Ranks `db_codes` for every query code and scores the rankings.
///
/// For [`Direction::ImageToText`] the queries are image codes and the
/// database holds text codes; [`Direction::TextToImage`] is the reverse. The
/// caller supplies the matching pair.
pub fn evaluate_direction(
    query_codes: &PackedCodeIndex,
    db_codes: &PackedCodeIndex,
    oracle: &RelevanceOracle,
    direction: Direction,
    k: usize,
    mode: ApMode,
) -> Result<MetricReport, MetricError> {
    if query_codes.code_len() != db_codes.code_len() {
        return Err(MetricError::Mismatch(format!(
            "query codes have {} bits, database codes {}",
            query_codes.code_len(),
            db_codes.code_len()
        )));
    }
    if oracle.num_queries() != query_codes.len() || oracle.db_len() != db_codes.len() {
        return Err(MetricError::Mismatch(format!(
            "labels cover {}x{}, codes are {}x{}",
            oracle.num_queries(),
            oracle.db_len(),
            query_codes.len(),
            db_codes.len()
        )));
    }
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let depth = k.max(CURVE_MAX).min(db_codes.len());
    let rankings: Vec<Vec<usize>> = db_codes
        .search_all(query_codes, depth)?
        .into_iter()
        .map(|r| r.positions())
        .collect();
    let summary = mean_average_precision(&rankings, oracle, k, mode)?;
    let mut precision_curve = Vec::new();
    for cutoff in (CURVE_STEP..=CURVE_MAX.min(db_codes.len())).step_by(CURVE_STEP) {
        let mut sum = 0.0;
        for (q, r) in rankings.iter().enumerate() {
            sum += precision_at_k(r, oracle, q, cutoff)?;
        }
        precision_curve.push((cutoff, sum / rankings.len() as f64));
    }
    Ok(MetricReport {
        direction,
        map_at_k: summary.map,
        k,
        precision_curve,
        num_queries: rankings.len(),
        excluded_queries: summary.excluded,
        ap_mode: mode,
    })
}
