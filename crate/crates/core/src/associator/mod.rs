//! Data association: cluster descriptors, learned pairwise affinity, Sinkhorn
//! normalization, match extraction and the track lifecycle.

mod matching;
mod sinkhorn;

pub use matching::{assign_gated, extract_matches, greedy_assign, hungarian, AssignMethod, Match};
pub use sinkhorn::sinkhorn;
pub(crate) use sinkhorn::{sinkhorn_backward, sinkhorn_with_cache};

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::detector::Cluster;
use crate::error::{Error, Result};
use crate::geometry::{cast3, sub, Vec3};
use crate::network::WeightStore;
use crate::nn::{self, Activation, MlpCache, TensorMap};
use crate::radar::RadarFrame;
use crate::scalar::Scalar;

pub const AFFINITY_LAYERS: usize = 3;

/// Fixed-width summary of one cluster: position mean and population variance,
/// then the column-wise max over `[flow, embedding]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDescriptor<T> {
    pub values: Array1<T>,
}

impl<T: Scalar> ClusterDescriptor<T> {
    pub fn width(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DescriptorCache {
    /// Frame point index selected by the max-pool, per pooled column.
    argmax: Vec<usize>,
}

/// Descriptor of the points `indices` given frame-level flow and embedding matrices.
pub(crate) fn descriptor_with_cache<T: Scalar>(
    indices: &[usize],
    positions: &[Vec3<T>],
    flow: ArrayView2<'_, T>,
    emb: ArrayView2<'_, T>,
) -> Result<(ClusterDescriptor<T>, DescriptorCache)> {
    if indices.is_empty() {
        return Err(Error::Contract("descriptor of an empty cluster".into()));
    }
    let n = T::from_usize_lossy(indices.len());
    let mut mean = [T::zero(); 3];
    for &i in indices {
        for k in 0..3 {
            mean[k] += positions[i][k];
        }
    }
    mean = mean.map(|v| v / n);
    let mut var = [T::zero(); 3];
    for &i in indices {
        let d = sub(positions[i], mean);
        for k in 0..3 {
            var[k] += d[k] * d[k];
        }
    }
    var = var.map(|v| v / n);
    let pooled = flow.ncols() + emb.ncols();
    let mut values = Array1::zeros(6 + pooled);
    for k in 0..3 {
        values[k] = mean[k];
        values[3 + k] = var[k];
    }
    let mut argmax = Vec::with_capacity(pooled);
    for c in 0..pooled {
        let get = |i: usize| {
            if c < flow.ncols() {
                flow[[i, c]]
            } else {
                emb[[i, c - flow.ncols()]]
            }
        };
        let mut best = indices[0];
        for &i in &indices[1..] {
            if get(i) > get(best) {
                best = i;
            }
        }
        values[6 + c] = get(best);
        argmax.push(best);
    }
    Ok((ClusterDescriptor { values }, DescriptorCache { argmax }))
}

/// Routes the pooled part of `ddesc` to the selected rows of `dflow` / `demb`.
pub(crate) fn descriptor_backward<T: Scalar>(
    cache: &DescriptorCache,
    ddesc: &Array1<T>,
    dflow: &mut Array2<T>,
    demb: &mut Array2<T>,
) {
    let fw = dflow.ncols();
    for (c, &i) in cache.argmax.iter().enumerate() {
        let g = ddesc[6 + c];
        if c < fw {
            dflow[[i, c]] += g;
        } else {
            demb[[i, c - fw]] += g;
        }
    }
}

/// Descriptor of a detected cluster within its frame.
pub fn aggregate_descriptor<T: Scalar>(cluster: &Cluster<T>, frame: &RadarFrame<T>) -> Result<ClusterDescriptor<T>> {
    if cluster.point_indices.iter().any(|&i| i >= frame.len()) {
        return Err(Error::Contract("cluster index outside the frame".into()));
    }
    let positions: Vec<Vec3<T>> = cluster.point_indices.iter().map(|&i| frame.points[i].position).collect();
    let local: Vec<usize> = (0..positions.len()).collect();
    descriptor_with_cache(&local, &positions, cluster.flow_rows.view(), cluster.embedding_rows.view()).map(|(d, _)| d)
}

#[derive(Debug, Clone)]
pub(crate) struct AffinityCache<T> {
    k: usize,
    m: usize,
    mlp: Option<MlpCache<T>>,
}

pub(crate) fn affinity_with_cache<T: Scalar>(
    desc_new: &[ClusterDescriptor<T>],
    desc_tracks: &[ClusterDescriptor<T>],
    weights: &TensorMap<T>,
) -> Result<(Array2<T>, AffinityCache<T>)> {
    let (k, m) = (desc_new.len(), desc_tracks.len());
    let width = weights.mat("affinity.layer0.w")?.nrows();
    if let Some(d) = desc_new.iter().chain(desc_tracks).find(|d| d.width() != width) {
        return Err(Error::Contract(format!(
            "descriptor width {} does not match affinity input width {width}",
            d.width()
        )));
    }
    if k == 0 || m == 0 {
        return Ok((Array2::zeros((k, m)), AffinityCache { k, m, mlp: None }));
    }
    let x = Array2::from_shape_fn((k * m, width), |(r, c)| desc_new[r / m].values[c] - desc_tracks[r % m].values[c]);
    let (out, cache) = nn::mlp_forward("affinity", AFFINITY_LAYERS, Activation::Identity, x.view(), weights)?;
    let raw = Array2::from_shape_fn((k, m), |(a, b)| out[[a * m + b, 0]]);
    Ok((raw, AffinityCache { k, m, mlp: Some(cache) }))
}

/// Gradients with respect to the new-detection descriptors; track descriptors are constants.
pub(crate) fn affinity_backward<T: Scalar>(
    cache: &AffinityCache<T>,
    draw: ArrayView2<'_, T>,
    weights: &TensorMap<T>,
    grads: &mut TensorMap<T>,
) -> Result<Vec<Array1<T>>> {
    let width = weights.mat("affinity.layer0.w")?.nrows();
    let mut out = vec![Array1::zeros(width); cache.k];
    let Some(mlp) = &cache.mlp else { return Ok(out) };
    let m = cache.m;
    let dy = Array2::from_shape_fn((cache.k * m, 1), |(r, _)| draw[[r / m, r % m]]);
    let dx = nn::mlp_backward("affinity", Activation::Identity, mlp, dy.view(), weights, grads)?;
    for (r, row) in dx.rows().into_iter().enumerate() {
        out[r / m] += &row;
    }
    Ok(out)
}

/// Raw logits: entry `(k, m)` is the affinity MLP applied to `desc_new[k] − desc_tracks[m]`.
pub fn affinity<T: Scalar>(
    desc_new: &[ClusterDescriptor<T>],
    desc_tracks: &[ClusterDescriptor<T>],
    weights: &WeightStore<T>,
) -> Result<Array2<T>> {
    affinity_with_cache(desc_new, desc_tracks, weights.tensors()).map(|(a, _)| a)
}

/// Affinity logits and their Sinkhorn-normalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<T> {
    pub raw: Array2<T>,
    pub normalized: Array2<T>,
}

/// Which association path the tracker uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    Learned,
    Greedy,
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocConfig {
    pub matcher: Matcher,
    pub sinkhorn_iterations: usize,
    pub temperature: f64,
    pub match_threshold: f64,
    pub new_track_confidence: f64,
    /// Frames an unmatched track survives; 0 removes it immediately.
    pub max_missed: usize,
    /// Largest centroid distance accepted by the baseline matchers, meters.
    pub gate_distance: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        AssocConfig {
            matcher: Matcher::Learned,
            sinkhorn_iterations: 30,
            temperature: 1.0,
            match_threshold: 0.5,
            new_track_confidence: 0.5,
            max_missed: 0,
            gate_distance: 2.0,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sinkhorn_iterations == 0 {
            return Err(Error::Config("sinkhorn_iterations must be ≥ 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) || !(0.0..=1.0).contains(&self.new_track_confidence) {
            return Err(Error::Config("match_threshold and new_track_confidence must lie in [0, 1]".into()));
        }
        if !(self.gate_distance > 0.0) {
            return Err(Error::Config("gate_distance must be > 0".into()));
        }
        Ok(())
    }
}

/// A detection ready for association.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub point_indices: Vec<usize>,
    pub descriptor: ClusterDescriptor<T>,
    pub centroid: Vec3<T>,
    pub mean_flow: Vec3<T>,
}

impl<T: Scalar> Detection<T> {
    pub fn from_cluster(cluster: &Cluster<T>, frame: &RadarFrame<T>) -> Result<Self> {
        let descriptor = aggregate_descriptor(cluster, frame)?;
        let n = T::from_usize_lossy(cluster.len());
        let mut mean_flow = [T::zero(); 3];
        for row in cluster.flow_rows.rows() {
            for k in 0..3 {
                mean_flow[k] += row[k] / n;
            }
        }
        Ok(Detection {
            point_indices: cluster.point_indices.clone(),
            centroid: [descriptor.values[0], descriptor.values[1], descriptor.values[2]],
            descriptor,
            mean_flow,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track<T> {
    pub id: u64,
    pub descriptor: ClusterDescriptor<T>,
    pub point_indices: Vec<usize>,
    pub confidence: f64,
    /// Frames since birth.
    pub age: u64,
    pub last_seen: u64,
    pub centroid: Vec3<T>,
    /// Centroid displacement per frame at the last update.
    pub velocity: Vec3<T>,
    pub mean_flow: Vec3<T>,
    pub missed: usize,
}

impl<T: Scalar> Track<T> {
    /// Constant-velocity centroid prediction for `frame_index`.
    pub fn predicted_centroid(&self, frame_index: u64) -> Vec3<T> {
        let gap = T::of(frame_index.saturating_sub(self.last_seen) as f64);
        let mut c = self.centroid;
        for k in 0..3 {
            c[k] += self.velocity[k] * gap;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet<T> {
    pub tracks: Vec<Track<T>>,
    pub next_id: u64,
}

impl<T> Default for TrackSet<T> {
    fn default() -> Self {
        TrackSet {
            tracks: Vec::new(),
            next_id: 0,
        }
    }
}

impl<T: Scalar> TrackSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn descriptors(&self) -> Vec<ClusterDescriptor<T>> {
        self.tracks.iter().map(|t| t.descriptor.clone()).collect()
    }
}

/// Applies one frame of matches: matched detections continue their track with
/// the match score as confidence, unmatched detections start new tracks and
/// unmatched tracks are dropped once they exceed `cfg.max_missed`.
pub fn update_tracks<T: Scalar>(
    tracks: &TrackSet<T>,
    detections: &[Detection<T>],
    matches: &[Match],
    frame_index: u64,
    cfg: &AssocConfig,
) -> Result<TrackSet<T>> {
    let mut seen = HashSet::new();
    for t in &tracks.tracks {
        if !seen.insert(t.id) {
            return Err(Error::Contract(format!("duplicate track id {}", t.id)));
        }
        if t.id >= tracks.next_id {
            return Err(Error::Contract(format!("track id {} not below next_id {}", t.id, tracks.next_id)));
        }
    }
    let mut det_match = vec![None; detections.len()];
    let mut track_used = vec![false; tracks.len()];
    for m in matches {
        if m.det >= detections.len() || m.track >= tracks.len() {
            return Err(Error::Contract(format!("match ({}, {}) out of range", m.det, m.track)));
        }
        if det_match[m.det].is_some() || track_used[m.track] {
            return Err(Error::Contract("matches are not one-to-one".into()));
        }
        det_match[m.det] = Some(*m);
        track_used[m.track] = true;
    }
    let mut next_id = tracks.next_id;
    let mut out = Vec::with_capacity(detections.len());
    for (d, det) in detections.iter().enumerate() {
        let track = match det_match[d] {
            Some(m) => {
                let old = &tracks.tracks[m.track];
                let gap = T::of(frame_index.saturating_sub(old.last_seen).max(1) as f64);
                Track {
                    id: old.id,
                    descriptor: det.descriptor.clone(),
                    point_indices: det.point_indices.clone(),
                    confidence: m.score.clamp(0.0, 1.0),
                    age: old.age + frame_index.saturating_sub(old.last_seen),
                    last_seen: frame_index,
                    centroid: det.centroid,
                    velocity: sub(det.centroid, old.centroid).map(|v| v / gap),
                    mean_flow: det.mean_flow,
                    missed: 0,
                }
            }
            None => {
                let id = next_id;
                next_id += 1;
                Track {
                    id,
                    descriptor: det.descriptor.clone(),
                    point_indices: det.point_indices.clone(),
                    confidence: cfg.new_track_confidence,
                    age: 0,
                    last_seen: frame_index,
                    centroid: det.centroid,
                    velocity: [T::zero(); 3],
                    mean_flow: det.mean_flow,
                    missed: 0,
                }
            }
        };
        out.push(track);
    }
    for (m, t) in tracks.tracks.iter().enumerate() {
        if !track_used[m] && t.missed < cfg.max_missed {
            let mut kept = t.clone();
            kept.missed += 1;
            out.push(kept);
        }
    }
    Ok(TrackSet { tracks: out, next_id })
}

/// Constant-velocity baseline: cost is the distance between each detection
/// centroid and each track's predicted centroid.
pub fn baseline_match<T: Scalar>(
    tracks: &TrackSet<T>,
    detections: &[Detection<T>],
    frame_index: u64,
    method: AssignMethod,
    gate: f64,
) -> Vec<Match> {
    let cost = Array2::from_shape_fn((detections.len(), tracks.len()), |(k, m)| {
        let p = tracks.tracks[m].predicted_centroid(frame_index);
        crate::geometry::norm(sub(detections[k].centroid, p)).as_f64()
    });
    assign_gated(cost.view(), method, gate)
}

/// Learned association: affinity logits, Sinkhorn, thresholded greedy extraction.
pub fn learned_match<T: Scalar>(
    tracks: &TrackSet<T>,
    detections: &[Detection<T>],
    weights: &WeightStore<T>,
    cfg: &AssocConfig,
) -> Result<(AffinityMatrix<T>, Vec<Match>)> {
    let new: Vec<ClusterDescriptor<T>> = detections.iter().map(|d| d.descriptor.clone()).collect();
    let raw = affinity(&new, &tracks.descriptors(), weights)?;
    if raw.is_empty() {
        return Ok((
            AffinityMatrix {
                normalized: raw.clone(),
                raw,
            },
            Vec::new(),
        ));
    }
    let normalized = sinkhorn(raw.view(), cfg.sinkhorn_iterations, cfg.temperature)?;
    let matches = extract_matches(normalized.view(), cfg.match_threshold);
    Ok((AffinityMatrix { raw, normalized }, matches))
}

/// One line of track output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame_index: u64,
    pub track_id: i64,
    pub confidence: f64,
    pub point_indices: Vec<usize>,
    pub centroid: [f64; 3],
    pub mean_flow: [f64; 3],
}

impl TrackRecord {
    pub fn from_track<T: Scalar>(t: &Track<T>) -> Self {
        TrackRecord {
            frame_index: t.last_seen,
            track_id: t.id as i64,
            confidence: t.confidence,
            point_indices: t.point_indices.clone(),
            centroid: cast3(t.centroid),
            mean_flow: cast3(t.mean_flow),
        }
    }
}

pub fn write_records(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::parse(path, e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<TrackRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrackRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        out.push(r);
    }
    Ok(out)
}
