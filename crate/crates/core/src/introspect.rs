//! Attention profiles and categorical embedding export.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{CategoricalEncoder, Sample};
use crate::error::{Error, Result};
use crate::eval::EVAL_BATCH;
use crate::model::{Batch, HybridModel};
use crate::rng::RngState;

/// z-value of a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DayStat {
    /// Days before the anchor, `-T..=-1`.
    pub offset: i64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProfile {
    pub days: Vec<DayStat>,
    /// Set when `n < 2`, so the interval has zero width by convention.
    pub degenerate: bool,
}

impl AttentionProfile {
    /// Per-day mean ± 1.96 standard errors over rows of attention weights.
    pub fn from_weights(weights: &[Vec<f64>]) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::Data("no attention weights to profile".into()))?;
        let t = first.len();
        if weights.iter().any(|w| w.len() != t) {
            return Err(Error::Shape("attention rows differ in length".into()));
        }
        let n = weights.len();
        let mut days = Vec::with_capacity(t);
        for d in 0..t {
            let column: Vec<f64> = weights.iter().map(|w| w[d]).collect();
            let mean = crate::stats::mean(&column);
            let half = if n > 1 {
                Z_95 * crate::stats::sample_std(&column) / (n as f64).sqrt()
            } else {
                0.0
            };
            days.push(DayStat {
                offset: d as i64 - t as i64,
                mean,
                ci_low: mean - half,
                ci_high: mean + half,
                n,
            });
        }
        Ok(Self {
            days,
            degenerate: n < 2,
        })
    }
}

/// Eval-mode attention weights for every sample, in sample order.
pub fn attention_weights(model: &HybridModel, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    if !model.has_attention() {
        return Err(Error::Config("model was built without attention".into()));
    }
    let parts = samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let batch = Batch::from_samples(chunk)?;
            let out = model.forward(&batch, false, &mut RngState::new(0))?;
            let alpha = out
                .attention
                .ok_or_else(|| Error::Config("forward pass returned no attention".into()))?;
            Ok((0..chunk.len())
                .map(|r| alpha.row(r).to_vec())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn collect_attention(model: &HybridModel, samples: &[Sample]) -> Result<AttentionProfile> {
    AttentionProfile::from_weights(&attention_weights(model, samples)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub fips: String,
    pub vector: Vec<f64>,
    /// One label per categorical column.
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    pub columns: Vec<String>,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingExport {
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.vector.clone()).collect()
    }
}

/// Categorical codes of each distinct county among `samples`.
pub fn county_codes(samples: &[Sample]) -> BTreeMap<String, Vec<usize>> {
    samples
        .iter()
        .map(|s| (s.fips.clone(), s.categorical.clone()))
        .collect()
}

/// Reduced embeddings `e′` per county, labelled through `encoder`.
pub fn export_embeddings(
    model: &HybridModel,
    counties: &BTreeMap<String, Vec<usize>>,
    encoder: &CategoricalEncoder,
) -> Result<EmbeddingExport> {
    if !model.has_embeddings() {
        return Err(Error::Config(
            "model was built without the static embedding path".into(),
        ));
    }
    if counties.is_empty() {
        return Err(Error::Data("no counties to export".into()));
    }
    let codes: Vec<Vec<usize>> = counties.values().cloned().collect();
    let e = model.reduced_embeddings(&codes)?;
    let rows = counties
        .iter()
        .enumerate()
        .map(|(i, (fips, c))| EmbeddingRow {
            fips: fips.clone(),
            vector: e.row(i).to_vec(),
            labels: c
                .iter()
                .enumerate()
                .map(|(col, &code)| {
                    encoder
                        .labels
                        .get(col)
                        .and_then(|_| encoder.decode(col, code))
                        .unwrap_or("unknown")
                        .to_string()
                })
                .collect(),
        })
        .collect();
    Ok(EmbeddingExport {
        columns: encoder.columns.clone(),
        rows,
    })
}
