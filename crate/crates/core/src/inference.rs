//! Hierarchical inference: score every finest cell by combining its own
//! similarity with those of its ancestors, then decode a location.
//!
//! In the default mode each level's cosine similarities become a softmax
//! distribution at that level's learned temperature, and a finest cell's
//! joint score is the product of the probabilities of its ancestors
//! (itself included), renormalized over all finest cells. The product is
//! formed in log space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{dot, ParamStore, Real, Tensor};
use crate::geodesy::{cell_center, spherical_mean, CellId, GeoPoint};
use crate::geoembed::{GeoEmbedError, GeoRepresentation};
use crate::model::Model;
use crate::partition::PartitionHierarchy;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("hierarchy integrity violation: {0}")]
    Integrity(String),
    #[error(transparent)]
    Geo(#[from] GeoEmbedError),
    #[error("feature has dimension {got}, expected {want}")]
    Dimension { got: usize, want: usize },
    #[error("no features to predict from")]
    NoFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// Product of per-level softmax probabilities, renormalized.
    Softmax,
    /// Product of raw cosine similarities, not renormalized.
    RawProduct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub integration: Integration,
    pub top_k: usize,
    /// Keep per-level probability vectors in each prediction.
    pub per_level: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            integration: Integration::Softmax,
            top_k: 5,
            per_level: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierPrediction {
    /// Joint score of each finest cell, in canonical order.
    pub joint: Vec<f64>,
    /// Best `top_k` finest cells, descending; ties keep canonical order.
    pub ranked: Vec<(CellId, f64)>,
    pub cell: CellId,
    pub score: f64,
    pub location: GeoPoint,
    pub per_level: Option<Vec<Vec<f64>>>,
}

/// Cell → GPS rule: spherical mean of member locations, or the cell center
/// when there are none or their mean vector nearly vanishes.
pub fn decode_location(cell: &CellId, members: &[GeoPoint]) -> GeoPoint {
    spherical_mean(members.iter().copied()).unwrap_or_else(|| cell_center(cell))
}

/// Per-level probabilities combined over every finest cell's ancestors.
///
/// `sims[l]` holds the similarities of level `l`, `links[f][l]` the ancestor
/// of finest cell `f` at level `l`.
pub fn integrate(
    sims: &[Vec<f64>],
    taus: &[f64],
    links: &[Vec<usize>],
    mode: Integration,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), InferenceError> {
    let levels = sims.len();
    if taus.len() != levels {
        return Err(InferenceError::Integrity(format!("{} temperatures for {levels} levels", taus.len())));
    }
    for (f, row) in links.iter().enumerate() {
        if row.len() != levels {
            return Err(InferenceError::Integrity(format!("finest cell {f} links {} of {levels} levels", row.len())));
        }
        if let Some(l) = (0..levels).find(|&l| row[l] >= sims[l].len()) {
            return Err(InferenceError::Integrity(format!("finest cell {f} has no ancestor at level {l}")));
        }
    }
    match mode {
        Integration::Softmax => {
            let log_probs: Vec<Vec<f64>> = sims.iter().zip(taus).map(|(s, &t)| log_softmax(s, t)).collect();
            let mut joint: Vec<f64> = links
                .iter()
                .map(|row| row.iter().enumerate().map(|(l, &i)| log_probs[l][i]).sum())
                .collect();
            let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            joint.iter_mut().for_each(|x| *x = (*x - max).exp());
            let total: f64 = joint.iter().sum();
            joint.iter_mut().for_each(|x| *x /= total);
            let probs = log_probs.into_iter().map(|lp| lp.into_iter().map(f64::exp).collect()).collect();
            Ok((joint, probs))
        }
        Integration::RawProduct => {
            let joint = links
                .iter()
                .map(|row| row.iter().enumerate().map(|(l, &i)| sims[l][i]).product())
                .collect();
            Ok((joint, sims.to_vec()))
        }
    }
}

fn log_softmax(s: &[f64], tau: f64) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max / tau + s.iter().map(|&x| ((x - max) / tau).exp()).sum::<f64>().ln();
    s.iter().map(|&x| x / tau - lse).collect()
}

/// Index of the largest value; the first one wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Frozen view of a model and hierarchy for answering queries.
pub struct Predictor<'h> {
    hierarchy: &'h PartitionHierarchy,
    /// Normalized embeddings per level, in f64.
    levels: Vec<Tensor<f64>>,
    taus: Vec<f64>,
    config: InferenceConfig,
}

impl<'h> Predictor<'h> {
    pub fn new<T: Real>(
        hierarchy: &'h PartitionHierarchy,
        geo: &GeoRepresentation,
        store: &ParamStore<T>,
        config: InferenceConfig,
    ) -> Result<Self, InferenceError> {
        if geo.num_levels() != hierarchy.num_levels() {
            return Err(InferenceError::Integrity(format!(
                "representation has {} levels, hierarchy {}",
                geo.num_levels(),
                hierarchy.num_levels()
            )));
        }
        for (l, (lv, p)) in geo.levels.iter().zip(hierarchy.levels()).enumerate() {
            if lv.cells.len() != p.len() || lv.cells.iter().zip(p.cells()).any(|(a, b)| *a != b.id) {
                return Err(InferenceError::Integrity(format!("level {l} rows do not match the partition cells")));
            }
        }
        let levels = (0..geo.num_levels())
            .map(|l| geo.all_normalized(store, l).map(|m| m.cast::<f64>()))
            .collect::<Result<Vec<_>, _>>()?;
        let taus = (0..geo.num_levels())
            .map(|l| geo.temperature(store, l).map(|t| t.as_f64()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            hierarchy,
            levels,
            taus,
            config,
        })
    }

    pub fn from_model<T: Real>(
        hierarchy: &'h PartitionHierarchy,
        model: &Model<T>,
        config: InferenceConfig,
    ) -> Result<Self, InferenceError> {
        Self::new(hierarchy, &model.geo, &model.store, config)
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.taus
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), InferenceError> {
        let want = self.levels[0].cols();
        if v.len() != want {
            return Err(InferenceError::Dimension { got: v.len(), want });
        }
        Ok(())
    }

    /// Cosine similarity of `v` (unit norm) with every cell of `level`.
    pub fn level_scores(&self, v: &[f64], level: usize) -> Result<Vec<f64>, InferenceError> {
        self.check_dim(v)?;
        let m = self.levels.get(level).ok_or(GeoEmbedError::Level {
            level,
            levels: self.levels.len(),
        })?;
        Ok((0..m.rows()).map(|r| dot(m.row(r), v)).collect())
    }

    /// Joint score per finest cell and the per-level vectors behind it.
    pub fn hierarchical_scores(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), InferenceError> {
        let sims = (0..self.levels.len())
            .map(|l| self.level_scores(v, l))
            .collect::<Result<Vec<_>, _>>()?;
        integrate(&sims, &self.taus, self.hierarchy.links(), self.config.integration)
    }

    fn finish(&self, joint: Vec<f64>, per_level: Option<Vec<Vec<f64>>>) -> HierPrediction {
        let finest = self.hierarchy.finest();
        let mut order: Vec<usize> = (0..joint.len()).collect();
        order.sort_by(|&a, &b| joint[b].total_cmp(&joint[a]).then(a.cmp(&b)));
        let best = argmax(&joint);
        let ranked = order
            .iter()
            .take(self.config.top_k.max(1))
            .map(|&i| (finest.cells()[i].id, joint[i]))
            .collect();
        let cell = &finest.cells()[best];
        HierPrediction {
            score: joint[best],
            cell: cell.id,
            location: cell.decoded_location,
            ranked,
            joint,
            per_level: per_level.filter(|_| self.config.per_level),
        }
    }

    pub fn predict(&self, v: &[f64]) -> Result<HierPrediction, InferenceError> {
        let (joint, per_level) = self.hierarchical_scores(v)?;
        Ok(self.finish(joint, Some(per_level)))
    }

    /// Averages the joint vectors of several features of one query.
    pub fn predict_multi(&self, features: &[Vec<f64>]) -> Result<HierPrediction, InferenceError> {
        let (first, rest) = features.split_first().ok_or(InferenceError::NoFeatures)?;
        if rest.is_empty() {
            return self.predict(first);
        }
        let mut acc = self.hierarchical_scores(first)?.0;
        for v in rest {
            for (a, x) in acc.iter_mut().zip(self.hierarchical_scores(v)?.0) {
                *a += x;
            }
        }
        let k = features.len() as f64;
        acc.iter_mut().for_each(|x| *x /= k);
        Ok(self.finish(acc, None))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedCell {
    pub cell_id: CellId,
    pub score: f64,
}

/// One prediction as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub query_id: String,
    pub lat: f64,
    pub lon: f64,
    pub cell_id: CellId,
    pub joint_score: f64,
    pub top_k: Vec<RankedCell>,
}

impl PredictionRecord {
    pub fn new(query_id: impl Into<String>, p: &HierPrediction) -> Self {
        Self {
            query_id: query_id.into(),
            lat: p.location.lat(),
            lon: p.location.lon(),
            cell_id: p.cell,
            joint_score: p.score,
            top_k: p
                .ranked
                .iter()
                .map(|&(cell_id, score)| RankedCell { cell_id, score })
                .collect(),
        }
    }
}
