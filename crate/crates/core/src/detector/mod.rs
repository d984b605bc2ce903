//! Class-agnostic moving-object detection: motion scores, thresholding and clustering.

mod dbscan;

pub use dbscan::dbscan;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::CostVolume;
use crate::error::{Error, Result};
use crate::motion::{FlowEmbedding, SceneFlow};
use crate::network::WeightStore;
use crate::nn::{self, Activation, MlpCache, TensorMap};
use crate::radar::RadarFrame;
use crate::scalar::Scalar;

pub const CLASSIFIER_LAYERS: usize = 2;

/// Per-point moving probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScores<T> {
    pub scores: Vec<T>,
}

/// Binary moving/static mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionMask {
    pub mask: Vec<u8>,
}

impl MotionMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m != 0).count()
    }
}

/// One detected moving object.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster<T> {
    /// Frame-local indices, ascending.
    pub point_indices: Vec<usize>,
    pub flow_rows: Array2<T>,
    pub embedding_rows: Array2<T>,
}

impl<T: Scalar> Cluster<T> {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    /// Builds a cluster from explicit indices, gathering flow and embedding rows.
    pub fn from_indices(indices: Vec<usize>, flow: &SceneFlow<T>, emb: &FlowEmbedding<T>) -> Self {
        Cluster {
            flow_rows: flow.vectors.select(ndarray::Axis(0), &indices),
            embedding_rows: emb.per_point.select(ndarray::Axis(0), &indices),
            point_indices: indices,
        }
    }
}

pub type DetectionSet<T> = Vec<Cluster<T>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Points scoring strictly above this are moving.
    pub zeta_mov: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_points: usize,
    /// Weights of the (position, flow, embedding) blocks; the embedding weight is divided by √channels.
    pub feature_scales: [f64; 3],
    /// Leading embedding channels used for clustering.
    pub embedding_channels: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            zeta_mov: 0.5,
            dbscan_eps: 1.5,
            dbscan_min_points: 2,
            feature_scales: [1.0, 1.0, 0.1],
            embedding_channels: 16,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta_mov > 0.0 && self.zeta_mov < 1.0) {
            return Err(Error::Config("zeta_mov must lie in (0, 1)".into()));
        }
        if !(self.dbscan_eps > 0.0) {
            return Err(Error::Config("dbscan_eps must be > 0".into()));
        }
        if self.dbscan_min_points < 1 {
            return Err(Error::Config("dbscan_min_points must be ≥ 1".into()));
        }
        if self.feature_scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("feature_scales must be ≥ 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn classify_with_cache<T: Scalar>(
    h: ArrayView2<'_, T>,
    weights: &TensorMap<T>,
) -> Result<(MotionScores<T>, MlpCache<T>)> {
    let (out, cache) = nn::mlp_forward("classifier", CLASSIFIER_LAYERS, Activation::Sigmoid, h, weights)?;
    if out.ncols() != 1 {
        return Err(Error::Contract("motion classifier must emit one value per point".into()));
    }
    Ok((
        MotionScores {
            scores: out.column(0).to_vec(),
        },
        cache,
    ))
}

/// Gradient of the scores flows back to `H`.
pub(crate) fn classify_backward<T: Scalar>(
    cache: &MlpCache<T>,
    dscores: &[T],
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<Array2<T>> {
    let d = Array2::from_shape_fn((dscores.len(), 1), |(i, _)| dscores[i]);
    nn::mlp_backward("classifier", Activation::Sigmoid, cache, d.view(), weights, grads)
}

/// Row-wise MLP with logistic output over the cost volume.
pub fn classify_motion<T: Scalar>(h: &CostVolume<T>, weights: &WeightStore<T>) -> Result<MotionScores<T>> {
    classify_with_cache(h.per_point.view(), weights.tensors()).map(|(s, _)| s)
}

/// `m_i = 1` iff `c_i > zeta_mov`.
pub fn threshold_mask<T: Scalar>(scores: &MotionScores<T>, zeta_mov: f64) -> MotionMask {
    MotionMask {
        mask: scores.scores.iter().map(|c| u8::from(c.as_f64() > zeta_mov)).collect(),
    }
}

/// Scaled clustering features `[position, flow, embedding[..channels] · s/√channels]` for the given rows.
pub fn clustering_features<T: Scalar>(
    frame: &RadarFrame<T>,
    rows: &[usize],
    flow: &SceneFlow<T>,
    emb: &FlowEmbedding<T>,
    cfg: &DetectConfig,
) -> Array2<T> {
    let ch = cfg.embedding_channels.min(emb.per_point.ncols());
    let [sp, sf, se] = cfg.feature_scales;
    let se = if ch > 0 { se / (ch as f64).sqrt() } else { 0.0 };
    let (sp, sf, se) = (T::of(sp), T::of(sf), T::of(se));
    Array2::from_shape_fn((rows.len(), 6 + ch), |(r, k)| {
        let i = rows[r];
        match k {
            0..=2 => frame.points[i].position[k] * sp,
            3..=5 => flow.vectors[[i, k - 3]] * sf,
            _ => emb.per_point[[i, k - 6]] * se,
        }
    })
}

/// DBSCAN over the masked points. Clusters are ordered by smallest member index.
pub fn cluster_moving<T: Scalar>(
    frame: &RadarFrame<T>,
    mask: &MotionMask,
    flow: &SceneFlow<T>,
    emb: &FlowEmbedding<T>,
    cfg: &DetectConfig,
) -> Result<DetectionSet<T>> {
    let n = frame.len();
    if mask.mask.len() != n || flow.vectors.nrows() != n || emb.per_point.nrows() != n {
        return Err(Error::Contract(format!(
            "cluster_moving: lengths differ (points {n}, mask {}, flow {}, embedding {})",
            mask.mask.len(),
            flow.vectors.nrows(),
            emb.per_point.nrows()
        )));
    }
    let moving: Vec<usize> = (0..n).filter(|&i| mask.mask[i] != 0).collect();
    if moving.is_empty() {
        return Ok(Vec::new());
    }
    let feats = clustering_features(frame, &moving, flow, emb, cfg);
    let labels = dbscan(feats.view(), T::of(cfg.dbscan_eps), cfg.dbscan_min_points);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_clusters];
    for (r, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            members[*l].push(moving[r]);
        }
    }
    Ok(members
        .into_iter()
        .map(|idx| Cluster::from_indices(idx, flow, emb))
        .collect())
}
