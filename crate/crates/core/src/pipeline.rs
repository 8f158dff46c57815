// SPDX-License-Identifier: Apache-2.0

//! Encode-and-evaluate glue shared by the CLI and the test suites.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, PairedDataset, Splits};
use crate::error::Result;
use crate::hamming::PackedCodeIndex;
use crate::metrics::{evaluate_direction, ApMode, Direction, MetricReport, RelevanceOracle};
use crate::trainer::{train, HashModel, TrainConfig, TrainError, TrainOutputs};

/// Packed image and text codes for one dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSplit {
    pub images: PackedCodeIndex,
    pub texts: PackedCodeIndex,
}

pub fn encode_split(model: &HashModel, ds: &PairedDataset) -> Result<EncodedSplit> {
    let img = model.encode_images(ds.images.to_f64().view())?;
    let txt = model.encode_texts(ds.texts.to_f64().view())?;
    Ok(EncodedSplit {
        images: PackedCodeIndex::pack(img.view(), ds.ids.clone())?,
        texts: PackedCodeIndex::pack(txt.view(), ds.ids.clone())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t: MetricReport,
    pub t2i: MetricReport,
}

fn labels(ds: &PairedDataset) -> Result<Vec<u32>> {
    Ok(ds
        .labels
        .clone()
        .ok_or_else(|| DataError::Inconsistent("evaluation needs class labels".into()))?)
}

/// Scores both directions from already encoded splits.
pub fn evaluate_encoded(
    query: &EncodedSplit,
    db: &EncodedSplit,
    query_labels: Vec<u32>,
    db_labels: Vec<u32>,
    k: usize,
    mode: ApMode,
) -> Result<RetrievalReport> {
    let oracle = RelevanceOracle::new(query_labels, db_labels);
    Ok(RetrievalReport {
        i2t: evaluate_direction(
            &query.images,
            &db.texts,
            &oracle,
            Direction::ImageToText,
            k,
            mode,
        )?,
        t2i: evaluate_direction(
            &query.texts,
            &db.images,
            &oracle,
            Direction::TextToImage,
            k,
            mode,
        )?,
    })
}

/// Image-to-text and text-to-image retrieval of `query` against `db`.
pub fn evaluate_model(
    model: &HashModel,
    query: &PairedDataset,
    db: &PairedDataset,
    k: usize,
    mode: ApMode,
) -> Result<RetrievalReport> {
    let q = encode_split(model, query)?;
    let d = encode_split(model, db)?;
    evaluate_encoded(&q, &d, labels(query)?, labels(db)?, k, mode)
}

/// Subdirectory names used by [`save_splits`] and [`load_splits`].
pub const SPLIT_DIRS: [&str; 3] = ["train", "query", "retrieval"];

pub fn save_splits(splits: &Splits, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (name, ds) in SPLIT_DIRS
        .iter()
        .zip([&splits.train, &splits.query, &splits.retrieval])
    {
        ds.save_dir(dir.join(name))?;
    }
    Ok(())
}

pub fn load_splits(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let [train, query, retrieval] = SPLIT_DIRS.map(|name| PairedDataset::load_dir(dir.join(name)));
    Ok(Splits {
        train: train?,
        query: query?,
        retrieval: retrieval?,
    })
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub map_i2t: f64,
    pub map_t2i: f64,
}

/// Trains and evaluates once per value of `axis`, all with the template's
/// seed. With `parallel` the runs share a thread pool; results keep the
/// order of `values` either way.
pub fn sweep(
    template: &TrainConfig,
    splits: &Splits,
    axis: &str,
    values: &[String],
    k: usize,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if !TrainConfig::KEYS.contains(&axis) {
        return Err(TrainError::ConfigInvalid(format!("unknown sweep axis {axis:?}")).into());
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = template.clone();
            cfg.set(axis, v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let run = |(value, cfg): (&String, &TrainConfig)| -> Result<SweepRow> {
        let (state, _) = train(&splits.train, cfg, &TrainOutputs::default())?;
        let report = evaluate_model(
            &state.model(),
            &splits.query,
            &splits.retrieval,
            k,
            ApMode::default(),
        )?;
        Ok(SweepRow {
            value: value.clone(),
            map_i2t: report.i2t.map_at_k,
            map_t2i: report.t2i.map_at_k,
        })
    };
    if parallel {
        values.par_iter().zip(configs.par_iter()).map(run).collect()
    } else {
        values.iter().zip(configs.iter()).map(run).collect()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,mAP_i2t,mAP_t2i\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.map_i2t, r.map_t2i));
    }
    out
}
