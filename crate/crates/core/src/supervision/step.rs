//! One supervised frame: forward through the whole network with teacher-forced
//! detections, the three losses, and reverse-mode gradients for every tensor.

use ndarray::{Array1, Array2};

use super::labels::{affinity_target, inherit_ids, moving_object_sets, PointLabels};
use super::losses::{loss_aff, loss_flow, loss_seg, LossConfig, LossParts};
use crate::associator::{
    affinity_backward, affinity_with_cache, descriptor_backward, descriptor_with_cache, sinkhorn_backward,
    sinkhorn_with_cache, AssocConfig, ClusterDescriptor,
};
use crate::error::{Error, Result};
use crate::motion::GruState;
use crate::network::{backward, forward_with_cache, NetworkOutput, OutputGrads, PrevFrame, WeightStore};
use crate::nn::TensorMap;
use crate::radar::RadarFrame;
use crate::scalar::Scalar;

/// Which loss the gradients are taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Flow,
    Segmentation,
    Affinity,
    /// The weighted multi-task sum.
    Total,
}

impl Objective {
    fn weights(self, cfg: &LossConfig) -> [f64; 3] {
        match self {
            Objective::Flow => [1.0, 0.0, 0.0],
            Objective::Segmentation => [0.0, 1.0, 0.0],
            Objective::Affinity => [0.0, 0.0, 1.0],
            Objective::Total => [cfg.alpha1, cfg.alpha2, cfg.alpha3],
        }
    }
}

/// A ground-truth object from the previous frame acting as a track.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTrack<T> {
    pub gt_id: Option<i64>,
    pub point_indices: Vec<usize>,
    pub descriptor: ClusterDescriptor<T>,
}

/// Everything a step needs besides the weights. Previous-frame quantities are constants.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a, T> {
    pub frame: &'a RadarFrame<T>,
    pub prev: Option<&'a PrevFrame<T>>,
    pub gru: &'a GruState<T>,
    pub labels: &'a PointLabels<T>,
    pub prev_tracks: &'a [TeacherTrack<T>],
}

#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub parts: LossParts,
    /// Value of the selected objective.
    pub objective: f64,
    pub grads: TensorMap<T>,
    pub output: NetworkOutput<T>,
    /// This frame's teacher detections, to be used as tracks by the next step.
    pub tracks: Vec<TeacherTrack<T>>,
}

/// Settings shared by every step of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub loss: LossConfig,
    pub inherit_iou: f64,
    pub sinkhorn_iterations: usize,
    pub temperature: f64,
}

impl StepConfig {
    pub fn new(loss: &LossConfig, inherit_iou: f64, assoc: &AssocConfig) -> Self {
        StepConfig {
            loss: loss.clone(),
            inherit_iou,
            sinkhorn_iterations: assoc.sinkhorn_iterations,
            temperature: assoc.temperature,
        }
    }
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig::new(&LossConfig::default(), 0.25, &AssocConfig::default())
    }
}

/// Forward, losses and (unless `with_grads` is false) gradients of `objective`.
pub fn step<T: Scalar>(
    weights: &WeightStore<T>,
    ctx: StepContext<'_, T>,
    cfg: &StepConfig,
    objective: Objective,
    with_grads: bool,
) -> Result<StepResult<T>> {
    let arch = weights.architecture();
    let tensors = weights.tensors();
    let n = ctx.frame.len();
    let labels = ctx.labels;
    if labels.flow.nrows() != n || labels.motion_mask.len() != n || labels.point_object_id.len() != n {
        return Err(Error::Contract(format!("labels do not match the {n}-point frame")));
    }
    let (out, cache) = forward_with_cache(arch, tensors, ctx.frame, ctx.prev, ctx.gru)?;
    let eps = cfg.loss.log_epsilon;

    let (l_flow, d_flow) = loss_flow(out.flow.vectors.view(), labels.flow.view())?;
    let (l_seg, d_seg) = loss_seg(&out.scores.scores, &labels.motion_mask, cfg.loss.beta, eps)?;

    let positions = ctx.frame.positions();
    let sets = moving_object_sets(&labels.point_object_id, &labels.motion_mask);
    let det_sets: Vec<Vec<usize>> = sets.iter().map(|(_, s)| s.clone()).collect();
    let det_ids = inherit_ids(&det_sets, &labels.point_object_id, cfg.inherit_iou);
    let mut descs = Vec::with_capacity(det_sets.len());
    let mut desc_caches = Vec::with_capacity(det_sets.len());
    for s in &det_sets {
        let (d, c) = descriptor_with_cache(s, &positions, out.flow.vectors.view(), out.embedding.per_point.view())?;
        descs.push(d);
        desc_caches.push(c);
    }
    let track_descs: Vec<ClusterDescriptor<T>> = ctx.prev_tracks.iter().map(|t| t.descriptor.clone()).collect();
    let track_ids: Vec<Option<i64>> = ctx.prev_tracks.iter().map(|t| t.gt_id).collect();
    let target = affinity_target(&det_ids, &track_ids);
    let (raw, aff_cache) = affinity_with_cache(&descs, &track_descs, tensors)?;
    let (l_aff, sink) = if raw.is_empty() {
        (T::zero(), None)
    } else {
        let (p, sc) = sinkhorn_with_cache(raw.view(), cfg.sinkhorn_iterations, cfg.temperature)?;
        let (l, d) = loss_aff(p.view(), target.view(), eps)?;
        (l, Some((sc, d)))
    };

    let parts = LossParts {
        flow: l_flow.as_f64(),
        seg: l_seg.as_f64(),
        aff: l_aff.as_f64(),
    };
    let [w1, w2, w3] = objective.weights(&cfg.loss);
    let value = w1 * parts.flow + w2 * parts.seg + w3 * parts.aff;

    let mut grads = tensors.zeros_like();
    if with_grads && n > 0 {
        let mut dflow = d_flow * T::of(w1);
        let mut demb = Array2::zeros(out.embedding.per_point.raw_dim());
        if let Some((sc, d_aff)) = &sink {
            if w3 != 0.0 {
                let draw = sinkhorn_backward(sc, (d_aff * T::of(w3)).view());
                let ddesc = affinity_backward(&aff_cache, draw.view(), tensors, &mut grads)?;
                for (c, dd) in desc_caches.iter().zip(&ddesc) {
                    descriptor_backward(c, dd, &mut dflow, &mut demb);
                }
            }
        }
        let up = OutputGrads {
            scores: Some(d_seg.iter().map(|g| *g * T::of(w2)).collect()),
            flow: Some(dflow),
            embedding: Some(demb),
        };
        backward(&cache, &up, tensors, &mut grads)?;
    }

    let tracks = det_ids
        .iter()
        .zip(det_sets)
        .zip(descs)
        .map(|((id, pts), d)| TeacherTrack {
            gt_id: *id,
            point_indices: pts,
            descriptor: ClusterDescriptor {
                values: Array1::from(d.values.to_vec()),
            },
        })
        .collect();
    Ok(StepResult {
        parts,
        objective: value,
        grads,
        output: out,
        tracks,
    })
}
