//! Two-stage training: segmentation-only warm-up of the encoder, cost volume
//! and classifier, then end-to-end training of every tensor on the full loss.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{point_labels, LabelConfig, PointLabels};
use super::losses::{loss_total, LossParts};
use super::step::{step, Objective, StepConfig, StepContext, TeacherTrack};
use crate::error::{Error, Result};
use crate::motion::GruState;
use crate::network::{is_stage1_tensor, PrevFrame, WeightStore};
use crate::nn::Adam;
use crate::radar::{BoxAnnotation, RadarFrame, Sequence};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub lr_decay_per_epoch: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stage1_epochs: 16,
            stage1_lr: 1e-3,
            stage2_epochs: 8,
            stage2_lr: 8e-4,
            lr_decay_per_epoch: 0.97,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config("lr_decay_per_epoch must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Frames of one sequence with their point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence<T> {
    pub frames: Vec<RadarFrame<T>>,
    pub labels: Vec<PointLabels<T>>,
}

/// Labels of a sequence's first frame: zero flow, and an object's points count
/// as moving when that object is moving in the next frame.
pub(crate) fn first_frame_labels<T: Scalar>(
    frame: &RadarFrame<T>,
    boxes: &[BoxAnnotation<T>],
    next: &PointLabels<T>,
) -> PointLabels<T> {
    let ids = super::labels::point_object_ids(frame, boxes);
    let moving: std::collections::HashSet<i64> = next
        .point_object_id
        .iter()
        .zip(&next.motion_mask)
        .filter(|(id, m)| **id >= 0 && **m != 0)
        .map(|(id, _)| *id)
        .collect();
    PointLabels {
        flow: ndarray::Array2::zeros((frame.len(), 3)),
        motion_mask: ids.iter().map(|id| u8::from(moving.contains(id))).collect(),
        point_object_id: ids,
    }
}

/// Derives point labels for every frame from poses and box annotations.
pub fn prepare_sequence<T: Scalar>(seq: &Sequence<T>, cfg: &LabelConfig) -> Result<TrainingSequence<T>> {
    let mut labels = Vec::with_capacity(seq.len());
    for t in 1..seq.len() {
        let (a, b) = (&seq.frames[t - 1], &seq.frames[t]);
        labels.push(point_labels(&b.frame, &a.frame, &b.boxes, &a.boxes, cfg)?);
    }
    if let Some(f0) = seq.frames.first() {
        let first = match labels.first() {
            Some(next) => first_frame_labels(&f0.frame, &f0.boxes, next),
            None => first_frame_labels(
                &f0.frame,
                &f0.boxes,
                &PointLabels {
                    flow: ndarray::Array2::zeros((0, 3)),
                    motion_mask: Vec::new(),
                    point_object_id: Vec::new(),
                },
            ),
        };
        labels.insert(0, first);
    }
    Ok(TrainingSequence {
        frames: seq.frames.iter().map(|f| f.frame.clone()).collect(),
        labels,
    })
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub l_flow: f64,
    pub l_seg: f64,
    pub l_aff: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: u8,
    pub epoch: usize,
    pub l_flow: f64,
    pub l_seg: f64,
    pub l_aff: f64,
    pub l_total: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub weights: WeightStore<T>,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

/// Settings of a training run beyond the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub step: StepConfig,
    /// Frame-index gap above which the recurrent state and previous frame are dropped.
    pub max_frame_gap: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            step: StepConfig::default(),
            max_frame_gap: 1,
        }
    }
}

/// Runs one stage in place. Stage 1 optimizes the segmentation loss over the
/// encoder, cost volume and classifier only; stage 2 optimizes the full loss over every tensor.
pub fn train_stage<T: Scalar>(
    weights: &mut WeightStore<T>,
    data: &[TrainingSequence<T>],
    stage: u8,
    epochs: usize,
    lr: f64,
    decay: f64,
    settings: &TrainSettings,
    log: &mut Vec<LogRow>,
    summaries: &mut Vec<EpochSummary>,
) -> Result<()> {
    let objective = if stage == 1 { Objective::Segmentation } else { Objective::Total };
    let trainable = |name: &str| stage != 1 || is_stage1_tensor(name);
    let mut adam = Adam::new(lr);
    let mut global_step = 0usize;
    for epoch in 0..epochs {
        adam.lr = lr * decay.powi(epoch as i32);
        let mut sum = LossParts::default();
        let mut sum_total = 0.0;
        let mut steps = 0usize;
        for seq in data {
            let arch = weights.architecture().clone();
            let mut gru = GruState::new(arch.gru_dim());
            let mut prev: Option<PrevFrame<T>> = None;
            let mut tracks: Vec<TeacherTrack<T>> = Vec::new();
            let mut last_index: Option<u64> = None;
            for (frame, labels) in seq.frames.iter().zip(&seq.labels) {
                if let Some(li) = last_index {
                    if frame.frame_index.saturating_sub(li) > settings.max_frame_gap {
                        gru.reset();
                        prev = None;
                        tracks.clear();
                    }
                }
                last_index = Some(frame.frame_index);
                let supervised = prev.is_some() && !frame.is_empty();
                let r = step(
                    weights,
                    StepContext {
                        frame,
                        prev: prev.as_ref(),
                        gru: &gru,
                        labels,
                        prev_tracks: &tracks,
                    },
                    &settings.step,
                    objective,
                    supervised,
                )
                .map_err(|e| match e {
                    // Frames are validated on load, so a non-finite value here comes from the weights.
                    Error::Validation(message) if message.contains("non-finite") => Error::Divergence {
                        stage: stage.into(),
                        epoch,
                        step: global_step,
                        message,
                    },
                    e => e,
                })?;
                if supervised {
                    let total = loss_total(&r.parts, &settings.step.loss);
                    let diverged = |message: String| Error::Divergence {
                        stage: stage.into(),
                        epoch,
                        step: global_step,
                        message,
                    };
                    let outputs_finite = r.output.scores.scores.iter().all(|c| c.is_finite())
                        && r.output.flow.vectors.iter().all(|v| v.is_finite());
                    if !(r.objective.is_finite() && total.is_finite() && outputs_finite) {
                        return Err(diverged(format!("non-finite loss {:?}", r.parts)));
                    }
                    if let Some(name) = r.grads.all_finite() {
                        return Err(diverged(format!("non-finite gradient in {name}")));
                    }
                    adam.step(weights.tensors_mut(), &r.grads, trainable);
                    if let Some(name) = weights.tensors().all_finite() {
                        return Err(diverged(format!("non-finite weights in {name}")));
                    }
                    log.push(LogRow {
                        stage: stage.into(),
                        epoch,
                        step: global_step,
                        l_flow: r.parts.flow,
                        l_seg: r.parts.seg,
                        l_aff: r.parts.aff,
                        l_total: total,
                        lr: adam.lr,
                    });
                    sum.flow += r.parts.flow;
                    sum.seg += r.parts.seg;
                    sum.aff += r.parts.aff;
                    sum_total += total;
                    steps += 1;
                    global_step += 1;
                }
                prev = Some(r.output.prev_frame(frame));
                gru = r.output.gru;
                tracks = r.tracks;
            }
        }
        let k = steps.max(1) as f64;
        summaries.push(EpochSummary {
            stage,
            epoch,
            l_flow: sum.flow / k,
            l_seg: sum.seg / k,
            l_aff: sum.aff / k,
            l_total: sum_total / k,
            lr: adam.lr,
            steps,
        });
        log::info!(
            "stage {stage} epoch {epoch}: L_seg {:.4} L_total {:.4}",
            sum.seg / k,
            sum_total / k
        );
    }
    Ok(())
}

/// Both stages in sequence.
pub fn train<T: Scalar>(
    init: WeightStore<T>,
    data: &[TrainingSequence<T>],
    schedule: &TrainSchedule,
    settings: &TrainSettings,
) -> Result<TrainOutcome<T>> {
    schedule.validate()?;
    settings.step.loss.validate()?;
    let mut weights = init;
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let d = schedule.lr_decay_per_epoch;
    train_stage(&mut weights, data, 1, schedule.stage1_epochs, schedule.stage1_lr, d, settings, &mut log, &mut epochs)?;
    train_stage(&mut weights, data, 2, schedule.stage2_epochs, schedule.stage2_lr, d, settings, &mut log, &mut epochs)?;
    Ok(TrainOutcome { weights, log, epochs })
}

/// CSV with one row per optimizer step.
pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "stage,epoch,step,l_flow,l_seg,l_aff,l_total,lr").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.8},{:.8},{:.8},{:.8},{:.8e}",
            r.stage, r.epoch, r.step, r.l_flow, r.l_seg, r.l_aff, r.l_total, r.lr
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// CSV with one row per epoch.
pub fn write_epoch_log(path: &Path, rows: &[EpochSummary]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "stage,epoch,steps,l_flow,l_seg,l_aff,l_total,lr").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.8},{:.8},{:.8},{:.8},{:.8e}",
            r.stage, r.epoch, r.steps, r.l_flow, r.l_seg, r.l_aff, r.l_total, r.lr
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
