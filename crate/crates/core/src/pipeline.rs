//! Configuration and end-to-end orchestration: tracking, training and evaluation runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::associator::{
    baseline_match, learned_match, update_tracks, AssignMethod, AssocConfig, Detection, Matcher, TrackRecord,
    TrackSet,
};
use crate::detector::{cluster_moving, threshold_mask, Cluster, DetectConfig, MotionMask};
use crate::error::{Error, Result};
use crate::evaluator::{build_sequence, EvalConfig, EvalSequence};
use crate::motion::{FlowEmbedding, GruState, SceneFlow};
use crate::network::{forward, Architecture, PrevFrame, WeightStore};
use crate::radar::{
    generate_synthetic_sequence, load_labels, FrameTruth, RadarFrame, Sequence, SyntheticSceneConfig,
    SyntheticSequence,
};
use crate::scalar::Scalar;
use crate::supervision::{
    moving_object_sets, prepare_sequence, train_stage, LabelConfig, LossConfig, StepConfig, TrainOutcome,
    TrainSchedule, TrainSettings, TrainingSequence,
};

/// Where detections come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DetectorSource {
    /// Motion segmentation followed by clustering.
    #[default]
    Learned,
    /// Clusters read from a file.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub disable_motion_module: bool,
    pub disable_velocity_features: bool,
    pub detector: DetectorSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub weights: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// JSON lines of `{frame_index, point_indices}` used when `detector = "external"`.
    pub external_detections: Option<PathBuf>,
}

/// A seeded family of synthetic sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSet {
    pub n_sequences: usize,
    pub scene: SyntheticSceneConfig,
}

impl Default for SyntheticSet {
    fn default() -> Self {
        SyntheticSet {
            n_sequences: 20,
            scene: SyntheticSceneConfig::default(),
        }
    }
}

impl SyntheticSet {
    /// Sequence `k` uses the scene seed `scene.rng_seed + k`.
    pub fn generate<T: Scalar>(&self) -> Result<Vec<SyntheticSequence<T>>> {
        (0..self.n_sequences)
            .map(|k| {
                let mut scene = self.scene.clone();
                scene.rng_seed = self.scene.rng_seed.wrapping_add(k as u64);
                generate_synthetic_sequence(&scene)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seed of weight initialization.
    pub seed: u64,
    /// Frame-index gap above which recurrent state is reset.
    pub max_frame_gap: u64,
    /// Inject ground-truth motion mask and flow instead of running the network.
    pub cheat_mode: bool,
    pub architecture: Architecture,
    pub detect: DetectConfig,
    pub assoc: AssocConfig,
    pub labels: LabelConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub eval: EvalConfig,
    pub ablations: Ablations,
    pub paths: Paths,
    pub synthetic: SyntheticSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            max_frame_gap: 1,
            cheat_mode: false,
            architecture: Architecture::default(),
            detect: DetectConfig::default(),
            assoc: AssocConfig::default(),
            labels: LabelConfig::default(),
            loss: LossConfig::default(),
            schedule: TrainSchedule::default(),
            eval: EvalConfig::default(),
            ablations: Ablations::default(),
            paths: Paths::default(),
            synthetic: SyntheticSet::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_architecture().validate()?;
        self.detect.validate()?;
        self.assoc.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.eval.validate()?;
        self.synthetic.scene.validate()?;
        if self.max_frame_gap == 0 {
            return Err(Error::Config("max_frame_gap must be ≥ 1".into()));
        }
        if !(self.labels.motion_label_threshold >= 0.0) || !(0.0..=1.0).contains(&self.labels.inherit_iou) {
            return Err(Error::Config("labels: thresholds out of range".into()));
        }
        Ok(())
    }

    /// The architecture with ablation switches applied.
    pub fn effective_architecture(&self) -> Architecture {
        let mut a = self.architecture.clone();
        if self.ablations.disable_motion_module {
            a.motion_module = false;
        }
        if self.ablations.disable_velocity_features {
            a.velocity_features = false;
        }
        a
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            step: StepConfig::new(&self.loss, self.labels.inherit_iou, &self.assoc),
            max_frame_gap: self.max_frame_gap,
        }
    }

    /// Loads `paths.weights`, or zero-initializes from `seed` when none is configured.
    ///
    /// A checkpoint whose architecture differs from the effective one is rejected.
    pub fn weights<T: Scalar>(&self) -> Result<WeightStore<T>> {
        let arch = self.effective_architecture();
        match &self.paths.weights {
            Some(p) => {
                let w = WeightStore::<f32>::load(p)?.cast::<T>();
                if *w.architecture() != arch {
                    return Err(Error::Weights(format!(
                        "{}: checkpoint architecture does not match the configuration",
                        p.display()
                    )));
                }
                Ok(w)
            }
            None => {
                log::warn!("no weights configured; using a seeded random initialization");
                WeightStore::init(&arch, self.seed)
            }
        }
    }
}

/// One frame of externally supplied clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalDetection {
    pub frame_index: u64,
    pub point_indices: Vec<usize>,
}

pub fn read_external_detections(path: &Path) -> Result<BTreeMap<u64, Vec<Vec<usize>>>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<u64, Vec<Vec<usize>>> = BTreeMap::new();
    for (n, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: ExternalDetection =
            serde_json::from_str(line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        out.entry(d.frame_index).or_default().push(d.point_indices);
    }
    Ok(out)
}

/// What one tracked frame produced.
#[derive(Debug, Clone)]
pub struct FrameOutput<T> {
    pub frame_index: u64,
    /// Tracks confirmed in this frame, by id.
    pub records: Vec<TrackRecord>,
    pub flow: SceneFlow<T>,
    pub mask: MotionMask,
    pub n_clusters: usize,
    pub elapsed_ms: f64,
}

/// Inputs that bypass the network for one frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameOverrides<'a, T> {
    /// Ground-truth mask and flow for cheat mode.
    pub truth: Option<&'a FrameTruth<T>>,
    /// Externally supplied clusters.
    pub clusters: Option<&'a [Vec<usize>]>,
}

/// Online tracker over one sequence.
pub struct Tracker<'a, T> {
    cfg: &'a PipelineConfig,
    weights: &'a WeightStore<T>,
    tracks: TrackSet<T>,
    gru: GruState<T>,
    prev: Option<PrevFrame<T>>,
    last_index: Option<u64>,
}

impl<'a, T: Scalar> Tracker<'a, T> {
    pub fn new(cfg: &'a PipelineConfig, weights: &'a WeightStore<T>) -> Result<Self> {
        if *weights.architecture() != cfg.effective_architecture() {
            return Err(Error::Weights("weights do not match the configured architecture".into()));
        }
        Ok(Tracker {
            cfg,
            weights,
            tracks: TrackSet::new(),
            gru: GruState::new(weights.architecture().gru_dim()),
            prev: None,
            last_index: None,
        })
    }

    pub fn tracks(&self) -> &TrackSet<T> {
        &self.tracks
    }

    /// Processes the next frame. Frames must arrive in increasing index order.
    pub fn step(&mut self, frame: &RadarFrame<T>, over: FrameOverrides<'_, T>) -> Result<FrameOutput<T>> {
        let start = Instant::now();
        let fi = frame.frame_index;
        if let Some(li) = self.last_index {
            if fi <= li {
                return Err(Error::Validation(format!("frame {fi} arrives after frame {li}")));
            }
            if fi - li > self.cfg.max_frame_gap {
                self.gru.reset();
                self.prev = None;
            }
        }
        self.last_index = Some(fi);
        let n = frame.len();
        let cheat = self.cfg.cheat_mode;

        let (mask, flow, emb) = if cheat {
            let t = over
                .truth
                .ok_or_else(|| Error::Validation(format!("cheat mode needs labels for frame {fi}")))?;
            if t.motion_mask.len() != n || t.flow.len() != n {
                return Err(Error::Validation(format!("labels of frame {fi} do not match its {n} points")));
            }
            let mask = MotionMask {
                mask: t.motion_mask.clone(),
            };
            let emb = FlowEmbedding {
                per_point: Array2::zeros((n, self.cfg.detect.embedding_channels)),
            };
            (mask, SceneFlow::from_rows(&t.flow), emb)
        } else {
            let out = forward(self.weights, frame, self.prev.as_ref(), &self.gru)?;
            let mask = threshold_mask(&out.scores, self.cfg.detect.zeta_mov);
            self.prev = Some(out.prev_frame(frame));
            self.gru = out.gru;
            (mask, out.flow, out.embedding)
        };

        let clusters: Vec<Cluster<T>> = match (self.cfg.ablations.detector, over.clusters) {
            (DetectorSource::External, Some(sets)) => {
                let mut out = Vec::with_capacity(sets.len());
                for s in sets {
                    if let Some(bad) = s.iter().find(|&&i| i >= n) {
                        return Err(Error::Validation(format!("frame {fi}: external cluster point {bad} ≥ {n}")));
                    }
                    if !s.is_empty() {
                        out.push(Cluster::from_indices(s.clone(), &flow, &emb));
                    }
                }
                out
            }
            (DetectorSource::External, None) => Vec::new(),
            (DetectorSource::Learned, _) => cluster_moving(frame, &mask, &flow, &emb, &self.cfg.detect)?,
        };
        let detections = clusters
            .iter()
            .map(|c| Detection::from_cluster(c, frame))
            .collect::<Result<Vec<_>>>()?;

        let assoc = &self.cfg.assoc;
        let method = match assoc.matcher {
            Matcher::Greedy => Some(AssignMethod::Greedy),
            Matcher::Hungarian => Some(AssignMethod::Hungarian),
            // Without a network there are no learned descriptors to compare.
            Matcher::Learned if cheat => Some(AssignMethod::Hungarian),
            Matcher::Learned => None,
        };
        let matches = match method {
            Some(m) => baseline_match(&self.tracks, &detections, fi, m, assoc.gate_distance),
            None => learned_match(&self.tracks, &detections, self.weights, assoc)?.1,
        };
        self.tracks = update_tracks(&self.tracks, &detections, &matches, fi, assoc)?;
        let mut records: Vec<TrackRecord> = self
            .tracks
            .tracks
            .iter()
            .filter(|t| t.last_seen == fi && t.missed == 0)
            .map(TrackRecord::from_track)
            .collect();
        records.sort_by_key(|r| r.track_id);
        Ok(FrameOutput {
            frame_index: fi,
            records,
            flow,
            mask,
            n_clusters: clusters.len(),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame_index: u64,
    pub points: usize,
    pub moving: usize,
    pub clusters: usize,
    pub tracks: usize,
    pub elapsed_ms: f64,
}

/// Deterministic totals of a tracking run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrackSummary {
    pub frames: usize,
    pub records: usize,
    pub distinct_tracks: usize,
    pub moving_points: usize,
    pub clusters: usize,
}

#[derive(Debug, Clone)]
pub struct TrackRun<T> {
    pub records: Vec<TrackRecord>,
    pub timings: Vec<FrameTiming>,
    pub summary: TrackSummary,
    /// Per-frame flow, one `(N, 3)` array per frame.
    pub flows: Vec<Array2<T>>,
}

/// Tracks every frame of `seq` in order.
///
/// `truth` is required in cheat mode; `external` is consulted when the detector is external.
pub fn run_track<T: Scalar>(
    cfg: &PipelineConfig,
    seq: &Sequence<T>,
    weights: &WeightStore<T>,
    truth: Option<&[FrameTruth<T>]>,
    external: Option<&BTreeMap<u64, Vec<Vec<usize>>>>,
) -> Result<TrackRun<T>> {
    if let Some(t) = truth {
        if t.len() != seq.len() {
            return Err(Error::Validation(format!("{} label frames for {} frames", t.len(), seq.len())));
        }
    }
    let mut tracker = Tracker::new(cfg, weights)?;
    let mut run = TrackRun {
        records: Vec::new(),
        timings: Vec::with_capacity(seq.len()),
        summary: TrackSummary::default(),
        flows: Vec::with_capacity(seq.len()),
    };
    let mut ids = std::collections::BTreeSet::new();
    for (k, af) in seq.frames.iter().enumerate() {
        let over = FrameOverrides {
            truth: truth.map(|t| &t[k]),
            clusters: external.and_then(|e| e.get(&af.frame.frame_index)).map(|v| v.as_slice()),
        };
        let out = tracker.step(&af.frame, over)?;
        run.timings.push(FrameTiming {
            frame_index: out.frame_index,
            points: af.frame.len(),
            moving: out.mask.count(),
            clusters: out.n_clusters,
            tracks: out.records.len(),
            elapsed_ms: out.elapsed_ms,
        });
        run.summary.moving_points += out.mask.count();
        run.summary.clusters += out.n_clusters;
        ids.extend(out.records.iter().map(|r| r.track_id));
        run.records.extend(out.records);
        run.flows.push(out.flow.vectors);
    }
    run.summary.frames = seq.len();
    run.summary.records = run.records.len();
    run.summary.distinct_tracks = ids.len();
    Ok(run)
}

/// Point truth for evaluation and cheat mode: `labels/` when present, otherwise derived from boxes and poses.
pub fn sequence_truth<T: Scalar>(seq: &Sequence<T>, dir: Option<&Path>, labels: &LabelConfig) -> Result<Vec<FrameTruth<T>>> {
    if let Some(d) = dir {
        if d.join("labels").is_dir() {
            return load_labels(seq, d);
        }
    }
    let prepared = prepare_sequence(seq, labels)?;
    Ok(prepared
        .labels
        .iter()
        .map(|l| FrameTruth {
            flow: l.flow.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
            motion_mask: l.motion_mask.clone(),
            object_id: l.point_object_id.clone(),
        })
        .collect())
}

/// Pairs a sequence's truth with track output for the evaluator.
pub fn eval_sequence<T: Scalar>(
    name: &str,
    seq: &Sequence<T>,
    truth: &[FrameTruth<T>],
    records: &[TrackRecord],
) -> Result<EvalSequence> {
    if truth.len() != seq.len() {
        return Err(Error::Validation(format!("{name}: {} label frames for {} frames", truth.len(), seq.len())));
    }
    let frames: Vec<(u64, usize, &FrameTruth<T>)> = seq
        .frames
        .iter()
        .zip(truth)
        .map(|(f, t)| (f.frame.frame_index, f.frame.len(), t))
        .collect();
    build_sequence(name, &frames, records)
}

/// Ground-truth moving objects written as external detections, e.g. to exercise `detector = "external"`.
pub fn truth_as_external<T: Scalar>(seq: &Sequence<T>, truth: &[FrameTruth<T>]) -> Vec<ExternalDetection> {
    let mut out = Vec::new();
    for (f, t) in seq.frames.iter().zip(truth) {
        for (_, pts) in moving_object_sets(&t.object_id, &t.motion_mask) {
            out.push(ExternalDetection {
                frame_index: f.frame.frame_index,
                point_indices: pts,
            });
        }
    }
    out
}

/// Labels every sequence, then trains both stages.
///
/// With `resume_stage1` the first stage is skipped and `init` is taken as its result.
pub fn run_train<T: Scalar>(
    cfg: &PipelineConfig,
    sequences: &[Sequence<T>],
    init: WeightStore<T>,
    resume_stage1: bool,
    mut on_stage_end: impl FnMut(u8, &WeightStore<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::Validation("no labeled frames to train on".into()));
    }
    let data: Vec<TrainingSequence<T>> = sequences
        .iter()
        .map(|s| prepare_sequence(s, &cfg.labels))
        .collect::<Result<_>>()?;
    let settings = cfg.train_settings();
    let s = &cfg.schedule;
    s.validate()?;
    let mut weights = init;
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    if !resume_stage1 {
        train_stage(&mut weights, &data, 1, s.stage1_epochs, s.stage1_lr, s.lr_decay_per_epoch, &settings, &mut log, &mut epochs)?;
        on_stage_end(1, &weights)?;
    }
    train_stage(&mut weights, &data, 2, s.stage2_epochs, s.stage2_lr, s.lr_decay_per_epoch, &settings, &mut log, &mut epochs)?;
    on_stage_end(2, &weights)?;
    Ok(TrainOutcome { weights, log, epochs })
}
