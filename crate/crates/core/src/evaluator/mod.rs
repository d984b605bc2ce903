//! Point-based IoU matching and the CLEAR / AMOTA metric families.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::associator::TrackRecord;
use crate::error::{Error, Result};
use crate::radar::FrameTruth;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Objects with fewer points are dropped from both sides before matching.
    pub min_points_valid: usize,
    pub recall_steps: usize,
    /// Compute the recall-swept family (sAMOTA, AMOTA, AMOTP).
    pub confidence_sweep: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.25,
            min_points_valid: 5,
            recall_steps: 40,
            confidence_sweep: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("eval.iou_threshold must lie in (0, 1]".into()));
        }
        if self.min_points_valid < 1 {
            return Err(Error::Config("eval.min_points_valid must be ≥ 1".into()));
        }
        if self.recall_steps < 2 {
            return Err(Error::Config("eval.recall_steps must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// `|a ∩ b| / |a ∪ b|` over point index sets; 0 when both are empty.
pub fn point_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    iou_sets(&a, &b)
}

fn iou_sets(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A ground-truth object or a prediction within one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalObject {
    pub id: i64,
    pub points: Vec<usize>,
    /// 1 for ground truth.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub frame_index: u64,
    pub gt: Vec<EvalObject>,
    pub pred: Vec<EvalObject>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSequence {
    pub name: String,
    pub frames: Vec<EvalFrame>,
}

/// Moving ground-truth objects of one frame: points sharing an object id with the motion flag set.
pub fn gt_objects<T: Scalar>(truth: &FrameTruth<T>) -> Vec<EvalObject> {
    let mut sets: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, (&id, &m)) in truth.object_id.iter().zip(&truth.motion_mask).enumerate() {
        if id >= 0 && m != 0 {
            sets.entry(id).or_default().push(i);
        }
    }
    sets.into_iter()
        .map(|(id, points)| EvalObject {
            id,
            points,
            confidence: 1.0,
        })
        .collect()
}

/// Pairs ground truth with track records by frame index.
///
/// `frames` lists `(frame_index, point_count, truth)` in sequence order.
pub fn build_sequence<T: Scalar>(
    name: &str,
    frames: &[(u64, usize, &FrameTruth<T>)],
    records: &[TrackRecord],
) -> Result<EvalSequence> {
    let mut slot: BTreeMap<u64, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(frames.len());
    for (k, (fi, _, truth)) in frames.iter().enumerate() {
        if slot.insert(*fi, k).is_some() {
            return Err(Error::Validation(format!("sequence {name}: frame index {fi} appears twice")));
        }
        out.push(EvalFrame {
            frame_index: *fi,
            gt: gt_objects(truth),
            pred: Vec::new(),
        });
    }
    for r in records {
        let Some(&k) = slot.get(&r.frame_index) else {
            return Err(Error::Validation(format!(
                "sequence {name}: track record for unknown frame {}",
                r.frame_index
            )));
        };
        let n = frames[k].1;
        if let Some(bad) = r.point_indices.iter().find(|&&i| i >= n) {
            return Err(Error::Validation(format!(
                "sequence {name}: frame {} has {n} points, record references point {bad}",
                r.frame_index
            )));
        }
        if !r.confidence.is_finite() {
            return Err(Error::Validation(format!(
                "sequence {name}: frame {}: non-finite confidence",
                r.frame_index
            )));
        }
        out[k].pred.push(EvalObject {
            id: r.track_id,
            points: r.point_indices.clone(),
            confidence: r.confidence,
        });
    }
    Ok(EvalSequence {
        name: name.to_string(),
        frames: out,
    })
}

/// CLEAR accumulators of one frame, or summed over many.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub id_switches: usize,
    pub matched_iou_sum: f64,
    pub gt_count: usize,
}

impl FrameResult {
    pub fn add(&mut self, o: &FrameResult) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.id_switches += o.id_switches;
        self.matched_iou_sum += o.matched_iou_sum;
        self.gt_count += o.gt_count;
    }

    pub fn mota(&self) -> Option<f64> {
        (self.gt_count > 0).then(|| 1.0 - (self.fp + self.fn_ + self.id_switches) as f64 / self.gt_count as f64)
    }

    pub fn moda(&self) -> Option<f64> {
        (self.gt_count > 0).then(|| 1.0 - (self.fp + self.fn_) as f64 / self.gt_count as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.gt_count > 0).then(|| self.tp as f64 / self.gt_count as f64)
    }

    /// Mean IoU of matched pairs; 0 without matches.
    pub fn motp(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.matched_iou_sum / self.tp as f64
        }
    }
}

/// Result of matching one frame. `pairs` holds `(gt id, predicted id, iou)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub result: FrameResult,
    pub pairs: Vec<(i64, i64, f64)>,
    /// Ids of the ground-truth objects that survived the validity filter.
    pub valid_gt: Vec<i64>,
}

fn valid_sets(objs: &[&EvalObject], min_points: usize) -> Vec<(i64, BTreeSet<usize>)> {
    objs.iter()
        .map(|o| (o.id, o.points.iter().copied().collect::<BTreeSet<usize>>()))
        .filter(|(_, s)| s.len() >= min_points)
        .collect()
}

fn check_unique(objs: &[&EvalObject], side: &str, frame_index: u64) -> Result<()> {
    let mut seen = BTreeSet::new();
    for o in objs {
        if !seen.insert(o.id) {
            return Err(Error::Validation(format!("frame {frame_index}: duplicate {side} id {}", o.id)));
        }
    }
    Ok(())
}

/// Greedy matching by descending IoU; ties go to the lower ground-truth id, then the lower predicted id.
///
/// Id switches are not known from a single frame and are left at 0.
pub fn match_frame(
    frame_index: u64,
    gt: &[&EvalObject],
    pred: &[&EvalObject],
    cfg: &EvalConfig,
) -> Result<FrameMatch> {
    check_unique(gt, "ground-truth", frame_index)?;
    check_unique(pred, "predicted", frame_index)?;
    let g = valid_sets(gt, cfg.min_points_valid);
    let p = valid_sets(pred, cfg.min_points_valid);
    let mut cand = Vec::new();
    for (gi, (gid, gs)) in g.iter().enumerate() {
        for (pi, (pid, ps)) in p.iter().enumerate() {
            let iou = iou_sets(gs, ps);
            if iou >= cfg.iou_threshold {
                cand.push((iou, *gid, *pid, gi, pi));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut g_used = vec![false; g.len()];
    let mut p_used = vec![false; p.len()];
    let mut pairs = Vec::new();
    for (iou, gid, pid, gi, pi) in cand {
        if !g_used[gi] && !p_used[pi] {
            g_used[gi] = true;
            p_used[pi] = true;
            pairs.push((gid, pid, iou));
        }
    }
    pairs.sort_by_key(|x| x.0);
    let tp = pairs.len();
    Ok(FrameMatch {
        result: FrameResult {
            tp,
            fp: p.len() - tp,
            fn_: g.len() - tp,
            id_switches: 0,
            matched_iou_sum: pairs.iter().map(|x| x.2).sum(),
            gt_count: g.len(),
        },
        pairs,
        valid_gt: g.iter().map(|x| x.0).collect(),
    })
}

/// Per-trajectory span: frames where the object is valid and frames where it is matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrajectorySpan {
    pub valid_frames: usize,
    pub matched_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceTally {
    pub frames: Vec<FrameResult>,
    pub trajectories: BTreeMap<i64, TrajectorySpan>,
}

impl SequenceTally {
    pub fn total(&self) -> FrameResult {
        let mut t = FrameResult::default();
        for f in &self.frames {
            t.add(f);
        }
        t
    }
}

/// Matches every frame in order, keeping predictions with confidence ≥ `min_confidence`.
///
/// An id switch is counted when a ground-truth object is matched to a different
/// predicted id than at its previous matched frame.
pub fn evaluate_sequence(seq: &EvalSequence, cfg: &EvalConfig, min_confidence: Option<f64>) -> Result<SequenceTally> {
    let mut last: BTreeMap<i64, i64> = BTreeMap::new();
    let mut tally = SequenceTally::default();
    for f in &seq.frames {
        let gt: Vec<&EvalObject> = f.gt.iter().collect();
        let pred: Vec<&EvalObject> = f
            .pred
            .iter()
            .filter(|o| min_confidence.is_none_or(|c| o.confidence >= c))
            .collect();
        let m = match_frame(f.frame_index, &gt, &pred, cfg)
            .map_err(|e| Error::Validation(format!("sequence {}: {e}", seq.name)))?;
        let mut r = m.result;
        for id in &m.valid_gt {
            tally.trajectories.entry(*id).or_default().valid_frames += 1;
        }
        for (gid, pid, _) in &m.pairs {
            tally.trajectories.entry(*gid).or_default().matched_frames += 1;
            if let Some(prev) = last.insert(*gid, *pid) {
                if prev != *pid {
                    r.id_switches += 1;
                }
            }
        }
        tally.frames.push(r);
    }
    Ok(tally)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClearMetrics {
    pub mota: Option<f64>,
    pub moda: Option<f64>,
    pub mt: Option<f64>,
    pub ml: Option<f64>,
    pub counts: FrameResult,
    pub trajectories: usize,
}

/// MOTA, MODA and the mostly-tracked / mostly-lost fractions (≥ 80 % / ≤ 20 % of the valid span).
pub fn clear_metrics(tallies: &[SequenceTally]) -> ClearMetrics {
    let mut counts = FrameResult::default();
    let (mut n, mut mt, mut ml) = (0usize, 0usize, 0usize);
    for t in tallies {
        counts.add(&t.total());
        for s in t.trajectories.values().filter(|s| s.valid_frames > 0) {
            n += 1;
            let ratio = s.matched_frames as f64 / s.valid_frames as f64;
            if ratio >= 0.8 {
                mt += 1;
            } else if ratio <= 0.2 {
                ml += 1;
            }
        }
    }
    let frac = |k: usize| (n > 0).then(|| k as f64 / n as f64);
    ClearMetrics {
        mota: counts.mota(),
        moda: counts.moda(),
        mt: frac(mt),
        ml: frac(ml),
        counts,
        trajectories: n,
    }
}

/// One recall target of the swept family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub target_recall: f64,
    /// Confidence threshold used; `None` when no threshold reaches the target.
    pub threshold: Option<f64>,
    pub recall: f64,
    pub mota: f64,
    pub smota: f64,
    pub motp: f64,
    pub counts: FrameResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmotaFamily {
    pub samota: Option<f64>,
    pub amota: Option<f64>,
    pub amotp: Option<f64>,
    pub best_mota: Option<f64>,
    pub best_threshold: Option<f64>,
    pub table: Vec<RecallRow>,
}

/// Distinct prediction confidences, highest first.
pub fn confidence_thresholds(seqs: &[EvalSequence]) -> Vec<f64> {
    let mut c: Vec<f64> = seqs
        .iter()
        .flat_map(|s| s.frames.iter().flat_map(|f| f.pred.iter().map(|p| p.confidence)))
        .collect();
    c.sort_by(|a, b| b.total_cmp(a));
    c.dedup();
    c
}

/// Summed accumulators of every sequence at one confidence threshold.
pub fn totals_at(seqs: &[EvalSequence], cfg: &EvalConfig, threshold: Option<f64>) -> Result<FrameResult> {
    let mut t = FrameResult::default();
    for s in seqs {
        t.add(&evaluate_sequence(s, cfg, threshold)?.total());
    }
    Ok(t)
}

fn scaled_mota(c: &FrameResult, r: f64) -> f64 {
    let gt = c.gt_count as f64;
    let errors = (c.id_switches + c.fp + c.fn_) as f64;
    (1.0 - (errors - (1.0 - r) * gt) / (r * gt)).clamp(0.0, 1.0)
}

/// sAMOTA, AMOTA and AMOTP over `recall_steps` targets `1/L, 2/L, …, 1`.
///
/// Each target uses the highest confidence threshold whose recall reaches it;
/// unreachable targets contribute 0. All metrics are `None` without ground truth.
pub fn amota_family(seqs: &[EvalSequence], cfg: &EvalConfig) -> Result<AmotaFamily> {
    cfg.validate()?;
    let thresholds = confidence_thresholds(seqs);
    let at: Vec<FrameResult> = thresholds
        .par_iter()
        .map(|t| totals_at(seqs, cfg, Some(*t)))
        .collect::<Result<_>>()?;
    let gt = totals_at(seqs, cfg, Some(f64::INFINITY))?.gt_count;
    if gt == 0 {
        return Ok(AmotaFamily {
            samota: None,
            amota: None,
            amotp: None,
            best_mota: None,
            best_threshold: None,
            table: Vec::new(),
        });
    }
    let l = cfg.recall_steps;
    let mut table = Vec::with_capacity(l);
    for j in 1..=l {
        let r = j as f64 / l as f64;
        let hit = thresholds
            .iter()
            .zip(&at)
            .find(|(_, c)| c.tp as f64 / gt as f64 >= r - 1e-12);
        table.push(match hit {
            Some((t, c)) => RecallRow {
                target_recall: r,
                threshold: Some(*t),
                recall: c.tp as f64 / gt as f64,
                mota: c.mota().unwrap_or(0.0),
                smota: scaled_mota(c, r),
                motp: c.motp(),
                counts: *c,
            },
            None => RecallRow {
                target_recall: r,
                threshold: None,
                recall: 0.0,
                mota: 0.0,
                smota: 0.0,
                motp: 0.0,
                counts: FrameResult::default(),
            },
        });
    }
    let mean = |f: fn(&RecallRow) -> f64| table.iter().map(f).sum::<f64>() / l as f64;
    let mut best: Option<(f64, f64)> = None;
    for (t, c) in thresholds.iter().zip(&at) {
        let m = c.mota().unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(bm, _)| m > bm) {
            best = Some((m, *t));
        }
    }
    Ok(AmotaFamily {
        samota: Some(mean(|r| r.smota)),
        amota: Some(mean(|r| r.mota)),
        amotp: Some(mean(|r| r.motp)),
        best_mota: best.map(|b| b.0),
        best_threshold: best.map(|b| b.1),
        table,
    })
}

/// Everything `eval` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou_threshold: f64,
    pub min_points_valid: usize,
    pub mota: Option<f64>,
    pub moda: Option<f64>,
    pub mt: Option<f64>,
    pub ml: Option<f64>,
    pub samota: Option<f64>,
    pub amota: Option<f64>,
    pub amotp: Option<f64>,
    pub best_mota: Option<f64>,
    pub best_threshold: Option<f64>,
    pub counts: FrameResult,
    pub trajectories: usize,
    pub per_recall: Vec<RecallRow>,
}

/// Full evaluation of all predictions plus, if enabled, the recall sweep.
pub fn evaluate(seqs: &[EvalSequence], cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let tallies: Vec<SequenceTally> = seqs
        .par_iter()
        .map(|s| evaluate_sequence(s, cfg, None))
        .collect::<Result<_>>()?;
    let clear = clear_metrics(&tallies);
    let fam = if cfg.confidence_sweep {
        Some(amota_family(seqs, cfg)?)
    } else {
        None
    };
    Ok(MetricReport {
        iou_threshold: cfg.iou_threshold,
        min_points_valid: cfg.min_points_valid,
        mota: clear.mota,
        moda: clear.moda,
        mt: clear.mt,
        ml: clear.ml,
        samota: fam.as_ref().and_then(|f| f.samota),
        amota: fam.as_ref().and_then(|f| f.amota),
        amotp: fam.as_ref().and_then(|f| f.amotp),
        best_mota: fam.as_ref().and_then(|f| f.best_mota),
        best_threshold: fam.as_ref().and_then(|f| f.best_threshold),
        counts: clear.counts,
        trajectories: clear.trajectories,
        per_recall: fam.map(|f| f.table).unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MinPointsValid,
    IouThreshold,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_points_valid" => Ok(SweepAxis::MinPointsValid),
            "iou_threshold" => Ok(SweepAxis::IouThreshold),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: MetricReport,
}

/// Re-evaluates once per value of `axis`, everything else taken from `base`.
pub fn sweep(seqs: &[EvalSequence], base: &EvalConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            match axis {
                SweepAxis::MinPointsValid => {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return Err(Error::Config(format!("min_points_valid sweep value {v} is not a positive integer")));
                    }
                    cfg.min_points_valid = v as usize;
                }
                SweepAxis::IouThreshold => cfg.iou_threshold = v,
            }
            Ok(SweepRow {
                value: v,
                report: evaluate(seqs, &cfg)?,
            })
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

pub fn write_sweep_csv(path: impl AsRef<Path>, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let name = match axis {
        SweepAxis::MinPointsValid => "min_points_valid",
        SweepAxis::IouThreshold => "iou_threshold",
    };
    let mut s = format!("{name},mota,moda,mt,ml,samota,amota,amotp,gt,tp,fp,fn,idsw\n");
    for r in rows {
        let m = &r.report;
        s += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.value,
            opt(m.mota),
            opt(m.moda),
            opt(m.mt),
            opt(m.ml),
            opt(m.samota),
            opt(m.amota),
            opt(m.amotp),
            m.counts.gt_count,
            m.counts.tp,
            m.counts.fp,
            m.counts.fn_,
            m.counts.id_switches
        );
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_json(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Validation(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
