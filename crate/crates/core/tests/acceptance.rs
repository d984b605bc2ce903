//! Acceptance suite: one pass/fail line per criterion. Exits nonzero on failure only with ACCEPTANCE_STRICT=1.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use radar_mot::associator::{extract_matches, sinkhorn, write_records, Matcher};
use radar_mot::detector::{cluster_moving, DetectConfig, MotionMask};
use radar_mot::evaluator::{
    amota_family, evaluate, point_iou, sweep, write_metrics_json, write_sweep_csv, EvalConfig, EvalFrame, EvalObject,
    EvalSequence, SweepAxis,
};
use radar_mot::geometry::Pose;
use radar_mot::motion::{FlowEmbedding, SceneFlow};
use radar_mot::network::{is_stage1_tensor, Architecture, WeightStore};
use radar_mot::pipeline::{eval_sequence, run_track, run_train, PipelineConfig, SyntheticSet};
use radar_mot::radar::{RadarFrame, RadarPoint, SyntheticSceneConfig, SyntheticSequence};
use radar_mot::supervision::{
    loss_aff, loss_seg, tiny_architecture, toy_pair, GradCheckConfig, Objective, TrainOutcome, TOY_SEED,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- criterion 1

fn oracle_pipeline() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig {
        cheat_mode: true,
        architecture: Architecture::compact(),
        synthetic: SyntheticSet {
            n_sequences: 20,
            scene: SyntheticSceneConfig::default(),
        },
        ..Default::default()
    };
    let weights = cfg.weights::<f64>().map_err(|e| e.to_string())?;
    let set = cfg.synthetic.generate::<f64>().map_err(|e| e.to_string())?;
    let mut evs = Vec::new();
    for (k, s) in set.iter().enumerate() {
        let run = run_track(&cfg, &s.sequence, &weights, Some(&s.truth), None).map_err(|e| e.to_string())?;
        // Direct check: every moving object is reproduced exactly under one stable track id.
        let mut id_of: BTreeMap<i64, i64> = BTreeMap::new();
        for (f, truth) in s.sequence.frames.iter().zip(&s.truth) {
            let mut objects: BTreeMap<i64, BTreeSet<usize>> = BTreeMap::new();
            for (i, (&id, &m)) in truth.object_id.iter().zip(&truth.motion_mask).enumerate() {
                if id >= 0 && m == 1 {
                    objects.entry(id).or_default().insert(i);
                }
            }
            let preds: Vec<_> = run.records.iter().filter(|r| r.frame_index == f.frame.frame_index).collect();
            ensure(preds.len() == objects.len(), format!("sequence {k} frame {}: {} tracks for {} objects", f.frame.frame_index, preds.len(), objects.len()))?;
            for (gid, pts) in &objects {
                let hit = preds
                    .iter()
                    .find(|r| r.point_indices.iter().copied().collect::<BTreeSet<_>>() == *pts)
                    .ok_or(format!("sequence {k}: object {gid} not reproduced"))?;
                let prev = id_of.insert(*gid, hit.track_id);
                ensure(prev.is_none_or(|p| p == hit.track_id), format!("sequence {k}: object {gid} changed id"))?;
            }
        }
        evs.push(eval_sequence(&k.to_string(), &s.sequence, &s.truth, &run.records).map_err(|e| e.to_string())?);
    }
    let r = evaluate(&evs, &cfg.eval).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "MOTA {:?} MODA {:?} IDSW {} over {} GT objects, {secs:.2} s",
        r.mota, r.moda, r.counts.id_switches, r.counts.gt_count
    );
    ensure(r.mota == Some(1.0) && r.moda == Some(1.0) && r.counts.id_switches == 0, detail.clone())?;
    ensure(secs < 10.0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 2

fn sinkhorn_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    let (mut sum_violations, mut shift_violations) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let raw = Array2::from_shape_fn((n, n), |_| logit.sample(&mut rng));
        let p = sinkhorn(raw.view(), 50, 1.0).map_err(|e| e.to_string())?;
        let mut err = 0.0f64;
        for i in 0..n {
            let r: f64 = p.row(i).sum();
            let c: f64 = p.column(i).sum();
            err = err.max((r - 1.0).abs()).max((c - 1.0).abs());
        }
        worst_sum = worst_sum.max(err);
        sum_violations += usize::from(err > 1e-6);
        let c = rng.random_range(-20.0..20.0);
        let q = sinkhorn((&raw + c).view(), 50, 1.0).map_err(|e| e.to_string())?;
        let d = (&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst_shift = worst_shift.max(d);
        shift_violations += usize::from(d > 1e-9);
    }
    let mut recovered = 0;
    let trials = 1000;
    for _ in 0..trials {
        let mut raw = Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0));
        let swap = rng.random_bool(0.5);
        for i in 0..2 {
            let j = if swap { 1 - i } else { i };
            raw[[i, j]] += rng.random_range(4.0..8.0);
        }
        // Brute force over both permutations.
        let ident = raw[[0, 0]] + raw[[1, 1]];
        let cross = raw[[0, 1]] + raw[[1, 0]];
        let best: Vec<(usize, usize)> = if ident > cross { vec![(0, 0), (1, 1)] } else { vec![(0, 1), (1, 0)] };
        let p = sinkhorn(raw.view(), 50, 1.0).map_err(|e| e.to_string())?;
        let got: Vec<(usize, usize)> = extract_matches(p.view(), 0.5).iter().map(|m| (m.det, m.track)).collect();
        if got == best {
            recovered += 1;
        }
    }
    let detail = format!(
        "N(0,1) logits: {sum_violations}/1000 with a marginal off by > 1e-6 (max {worst_sum:.1e}), \
         {shift_violations}/1000 shift-sensitive (max {worst_shift:.1e}), 2x2 recovered {recovered}/{trials}"
    );
    ensure(sum_violations == 0 && shift_violations == 0 && recovered == trials, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 3

fn gradient_checks() -> Outcome {
    let pair = toy_pair(&tiny_architecture(), TOY_SEED).map_err(|e| e.to_string())?;
    ensure(pair.frame.len() == 16, format!("toy frame has {} points", pair.frame.len()))?;
    ensure(pair.prev_tracks.len() == 2, format!("toy pair has {} clusters", pair.prev_tracks.len()))?;
    let cfg = GradCheckConfig {
        step: 1e-4,
        max_entries: None,
    };
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (name, obj) in [
        ("L_flow", Objective::Flow),
        ("L_seg", Objective::Segmentation),
        ("L_aff", Objective::Affinity),
        ("L_total", Objective::Total),
    ] {
        let r = pair.check(obj, &cfg).map_err(|e| e.to_string())?;
        parts.push(format!("{name} {:.1e}", r.max_rel_error));
        worst = worst.max(r.max_rel_error);
        ensure(
            r.max_rel_error <= 1e-3,
            format!("{name}: {:.3e} in {:?}", r.max_rel_error, r.worst_tensor),
        )?;
    }
    Ok(format!("{} (max {worst:.1e}, all tensors)", parts.join(", ")))
}

// ---------------------------------------------------------------- criterion 4

/// ε-graph components over core points; non-core points join their nearest core neighbor.
fn brute_force_clusters(feats: &[Vec<f64>], eps: f64, min_points: usize) -> BTreeSet<BTreeSet<usize>> {
    let n = feats.len();
    let dist = |a: usize, b: usize| feats[a].iter().zip(&feats[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| dist(i, j) <= eps).collect()).collect();
    let core: Vec<bool> = (0..n).map(|i| adj[i].iter().filter(|b| **b).count() >= min_points).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && adj[i][j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().insert(i);
        }
    }
    for i in (0..n).filter(|&i| !core[i]) {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..n).filter(|&j| core[j] && adj[i][j]) {
            let d = dist(i, j);
            if best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            let r = find(&mut parent, j);
            groups.get_mut(&r).expect("core group").insert(i);
        }
    }
    groups.into_values().collect()
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DetectConfig::default();
    let mut total_clusters = 0;
    for trial in 0..500 {
        let n = rng.random_range(1..=200);
        let side = rng.random_range(3.0..30.0);
        let width = rng.random_range(0..24);
        let points = (0..n)
            .map(|_| {
                RadarPoint::new(
                    [rng.random_range(0.0..side), rng.random_range(0.0..side), rng.random_range(-1.0..1.0)],
                    0.0,
                    0.0,
                )
            })
            .collect();
        let frame = RadarFrame {
            points,
            ego_pose: Pose::identity(),
            timestamp: 0.0,
            frame_index: 0,
        };
        let flow = SceneFlow {
            vectors: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.5..1.5)),
        };
        let emb = FlowEmbedding {
            per_point: Array2::from_shape_fn((n, width), |_| rng.random_range(-3.0..3.0)),
        };
        let mask = MotionMask {
            mask: (0..n).map(|_| u8::from(rng.random_bool(0.8))).collect(),
        };
        let got: BTreeSet<BTreeSet<usize>> = cluster_moving(&frame, &mask, &flow, &emb, &cfg)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|c| c.point_indices.into_iter().collect())
            .collect();

        let moving: Vec<usize> = (0..n).filter(|&i| mask.mask[i] == 1).collect();
        let ch = width.min(16);
        let feats: Vec<Vec<f64>> = moving
            .iter()
            .map(|&i| {
                let mut f = frame.points[i].position.to_vec();
                f.extend(flow.vectors.row(i).iter());
                f.extend((0..ch).map(|k| emb.per_point[[i, k]] * 0.1 / (ch as f64).sqrt()));
                f
            })
            .collect();
        let want: BTreeSet<BTreeSet<usize>> = brute_force_clusters(&feats, 1.5, 2)
            .into_iter()
            .map(|g| g.into_iter().map(|r| moving[r]).collect())
            .collect();
        ensure(got == want, format!("trial {trial} ({n} points): clusters differ"))?;
        total_clusters += want.len();
    }
    Ok(format!("500 instances, {total_clusters} clusters, exact set equality"))
}

// ---------------------------------------------------------------- criterion 5

fn object(id: i64, lo: usize, hi: usize, confidence: f64) -> EvalObject {
    EvalObject {
        id,
        points: (lo..hi).collect(),
        confidence,
    }
}

/// GT 100, FP 10, FN 20, IDSW 5 over 10 frames of 10 objects.
fn clear_scenario() -> EvalSequence {
    let frames = (0..10)
        .map(|f| {
            let gt = (0..10).map(|g| object(g, 10 * g as usize, 10 * g as usize + 10, 1.0)).collect();
            let mut pred = Vec::new();
            for g in 2..10usize {
                let id = if g == 2 { 200 + f.min(5) as i64 } else { 100 + g as i64 };
                pred.push(object(id, 10 * g, 10 * g + 10, 1.0));
            }
            pred.push(object(999, 100, 110, 1.0));
            EvalFrame {
                frame_index: f,
                gt,
                pred,
            }
        })
        .collect();
    EvalSequence {
        name: "clear".into(),
        frames,
    }
}

/// Three objects, varying confidences, one id switch and one low-confidence false positive.
fn amota_scenario() -> EvalSequence {
    let frames = (0..6u64)
        .map(|f| {
            let gt = vec![object(0, 0, 8, 1.0), object(1, 8, 16, 1.0), object(2, 16, 24, 1.0)];
            let mut pred = vec![object(10, 0, 8, if f == 3 { 0.5 } else { 0.9 })];
            pred.push(object(if f < 4 { 11 } else { 12 }, 8, 16, 0.6));
            if f != 1 {
                pred.push(object(13, 18, 26, 0.3 + 0.05 * f as f64));
            }
            if (2..5).contains(&f) {
                pred.push(object(14, 30, 36, 0.2));
            }
            EvalFrame {
                frame_index: f,
                gt,
                pred,
            }
        })
        .collect();
    EvalSequence {
        name: "amota".into(),
        frames,
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    idsw: usize,
    gt: usize,
    iou: f64,
}

fn oracle_counts(seq: &EvalSequence, thr: f64, cfg: &EvalConfig) -> Counts {
    let mut c = Counts::default();
    let mut last: BTreeMap<i64, i64> = BTreeMap::new();
    for f in &seq.frames {
        let gt: Vec<&EvalObject> = f.gt.iter().filter(|o| o.points.len() >= cfg.min_points_valid).collect();
        let pr: Vec<&EvalObject> = f
            .pred
            .iter()
            .filter(|o| o.confidence >= thr && o.points.len() >= cfg.min_points_valid)
            .collect();
        let mut pairs = Vec::new();
        for g in &gt {
            for p in &pr {
                let a: BTreeSet<_> = g.points.iter().collect();
                let b: BTreeSet<_> = p.points.iter().collect();
                let iou = a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
                if iou >= cfg.iou_threshold {
                    pairs.push((iou, g.id, p.id));
                }
            }
        }
        pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let (mut gu, mut pu) = (BTreeSet::new(), BTreeSet::new());
        for (iou, g, p) in pairs {
            if gu.contains(&g) || pu.contains(&p) {
                continue;
            }
            gu.insert(g);
            pu.insert(p);
            c.tp += 1;
            c.iou += iou;
            if last.insert(g, p).is_some_and(|q| q != p) {
                c.idsw += 1;
            }
        }
        c.gt += gt.len();
        c.fp += pr.len() - pu.len();
        c.fn_ += gt.len() - gu.len();
    }
    c
}

fn metric_oracles() -> Outcome {
    let cfg = EvalConfig::default();
    let r = evaluate(&[clear_scenario()], &cfg).map_err(|e| e.to_string())?;
    let c = r.counts;
    ensure(
        (c.gt_count, c.fp, c.fn_, c.id_switches) == (100, 10, 20, 5),
        format!("scripted counts {c:?}"),
    )?;
    let (mota, moda) = (r.mota.unwrap_or(f64::NAN), r.moda.unwrap_or(f64::NAN));
    ensure((mota - 0.65).abs() < 1e-12 && (moda - 0.70).abs() < 1e-12, format!("MOTA {mota} MODA {moda}"))?;

    let ious = [
        point_iou(&[1, 2, 3], &[1, 2, 3]),
        point_iou(&[1, 2], &[3, 4]),
        point_iou(&[1, 2, 3, 4], &[3, 4, 5, 6]),
    ];
    ensure(
        (ious[0] - 1.0).abs() < 1e-9 && ious[1].abs() < 1e-9 && (ious[2] - 2.0 / 6.0).abs() < 1e-9,
        format!("point IoU {ious:?}"),
    )?;

    let seq = amota_scenario();
    let fam = amota_family(std::slice::from_ref(&seq), &cfg).map_err(|e| e.to_string())?;
    let mut thresholds: Vec<f64> = seq.frames.iter().flat_map(|f| f.pred.iter().map(|p| p.confidence)).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let at: Vec<(f64, Counts)> = thresholds.iter().map(|&t| (t, oracle_counts(&seq, t, &cfg))).collect();
    let gt = at[0].1.gt as f64;
    ensure(fam.table.len() == cfg.recall_steps, "table length")?;
    let mut reachable = 0;
    for (j, row) in fam.table.iter().enumerate() {
        let r = (j + 1) as f64 / cfg.recall_steps as f64;
        let best = at
            .iter()
            .filter(|(_, c)| c.tp as f64 / gt >= r - 1e-12)
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (thr, mota, smota, motp) = match best {
            Some((t, c)) => {
                reachable += 1;
                let errors = (c.fp + c.fn_ + c.idsw) as f64;
                let smota = (1.0 - (errors - (1.0 - r) * gt) / (r * gt)).clamp(0.0, 1.0);
                (Some(*t), 1.0 - errors / gt, smota, c.iou / c.tp as f64)
            }
            None => (None, 0.0, 0.0, 0.0),
        };
        ensure(row.threshold == thr, format!("recall {r}: threshold {:?} vs {thr:?}", row.threshold))?;
        ensure(
            (row.mota - mota).abs() < 1e-12 && (row.smota - smota).abs() < 1e-12 && (row.motp - motp).abs() < 1e-12,
            format!("recall {r}: row {row:?} vs ({mota}, {smota}, {motp})"),
        )?;
    }
    Ok(format!(
        "MOTA {mota:.2} MODA {moda:.2}; IoU {:.4}/{:.4}/{:.4}; {}-row recall table matches enumeration of {} thresholds ({reachable} reachable)",
        ious[0],
        ious[1],
        ious[2],
        fam.table.len(),
        thresholds.len()
    ))
}

// ---------------------------------------------------------------- criterion 6

/// `-ln(1 - x)` by its power series.
fn neg_log1m(x: f64) -> f64 {
    (1..200).map(|k| x.powi(k) / k as f64).sum()
}

fn loss_values() -> Outcome {
    let (uniform, _) = loss_seg(&[0.5f64, 0.5, 0.5, 0.5], &[1, 0, 1, 0], 0.4, 1e-7).map_err(|e| e.to_string())?;
    let ln2 = neg_log1m(0.5);
    ensure((uniform - ln2).abs() <= 1e-9, format!("uniform {uniform} vs {ln2}"))?;
    let (seg, _) = loss_seg(&[0.9f64, 0.1], &[1, 0], 0.4, 1e-7).map_err(|e| e.to_string())?;
    let seg_ref = neg_log1m(0.1);
    ensure((seg - seg_ref).abs() <= 1e-4, format!("loss_seg {seg} vs {seg_ref}"))?;
    let pred = ndarray::array![[0.9f64], [0.2]];
    let target = ndarray::array![[1u8], [0]];
    let (aff, _) = loss_aff(pred.view(), target.view(), 1e-7).map_err(|e| e.to_string())?;
    let aff_ref = (neg_log1m(0.1) + neg_log1m(0.2)) / 2.0;
    ensure((aff - aff_ref).abs() <= 1e-4, format!("loss_aff {aff} vs {aff_ref}"))?;
    Ok(format!("uniform {uniform:.12}, loss_seg {seg:.4}, loss_aff {aff:.4}"))
}

// ---------------------------------------------------------- criteria 7, 8, 9

/// Crowded scenes: adjacent movers and parked objects with the same point density.
fn crowded(n_sequences: usize, seed: u64) -> SyntheticSet {
    SyntheticSet {
        n_sequences,
        scene: SyntheticSceneConfig {
            n_objects: 4,
            n_static_objects: 3,
            n_static: 40,
            min_object_separation: 2.0,
            rng_seed: seed,
            ..Default::default()
        },
    }
}

fn smoke_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        architecture: Architecture::compact(),
        synthetic: crowded(200, 0),
        ..Default::default()
    };
    cfg.schedule.stage1_epochs = 4;
    cfg.schedule.stage2_epochs = 2;
    cfg.assoc.matcher = Matcher::Learned;
    cfg
}

struct Trained {
    cfg: PipelineConfig,
    outcome: TrainOutcome<f64>,
    after_stage1: Option<WeightStore<f64>>,
    init: WeightStore<f64>,
    seconds: f64,
}

fn train_variant(motion: bool, velocity: bool, data: &[SyntheticSequence<f64>]) -> Result<Trained, String> {
    let mut cfg = smoke_config();
    cfg.ablations.disable_motion_module = !motion;
    cfg.ablations.disable_velocity_features = !velocity;
    let init = cfg.weights::<f64>().map_err(|e| e.to_string())?;
    let seqs: Vec<_> = data.iter().map(|s| s.sequence.clone()).collect();
    let start = Instant::now();
    let mut after_stage1 = None;
    let outcome = run_train(&cfg, &seqs, init.clone(), false, |stage, w| {
        if stage == 1 {
            after_stage1 = Some(w.clone());
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(Trained {
        cfg,
        outcome,
        after_stage1,
        init,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn training_smoke(t: &Trained) -> Outcome {
    let e = &t.outcome.epochs;
    ensure(e.len() == 6, format!("{} epoch summaries", e.len()))?;
    let last = e.last().expect("epochs");
    let stage2: Vec<f64> = e.iter().filter(|s| s.stage == 2).map(|s| s.l_total).collect();
    let rises = stage2.windows(2).filter(|w| w[1] > w[0]).count();
    let all_rises = e.windows(2).filter(|w| w[1].l_total > w[0].l_total).count();
    let s1 = t.after_stage1.as_ref().ok_or("no stage-1 checkpoint")?;
    let mut frozen = 0;
    for (name, a) in t.init.tensors().iter() {
        if !is_stage1_tensor(name) {
            frozen += 1;
            let b = s1.tensors().get(name).map_err(|e| e.to_string())?;
            let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, format!("frozen tensor {name} changed in stage 1"))?;
        }
    }
    let curve: Vec<String> = e.iter().map(|s| format!("{:.3}", s.l_total)).collect();
    let detail = format!(
        "final L_seg {:.4}; end-to-end L_total {} ({} rise(s) in stage 2, {} over all epochs); {frozen} frozen tensors bit-identical; {:.0} s",
        last.l_seg,
        curve.join(" "),
        rises,
        all_rises,
        t.seconds
    );
    ensure(last.l_seg < 0.1, detail.clone())?;
    ensure(rises <= 1 && last.l_total < e[0].l_total, detail.clone())?;
    ensure(t.seconds < 300.0, detail.clone())?;
    Ok(detail)
}

fn mota_on(t: &Trained, set: &[SyntheticSequence<f64>]) -> Result<f64, String> {
    let mut evs = Vec::new();
    for (k, s) in set.iter().enumerate() {
        let run = run_track(&t.cfg, &s.sequence, &t.outcome.weights, None, None).map_err(|e| e.to_string())?;
        evs.push(eval_sequence(&k.to_string(), &s.sequence, &s.truth, &run.records).map_err(|e| e.to_string())?);
    }
    evaluate(&evs, &t.cfg.eval)
        .map_err(|e| e.to_string())?
        .mota
        .ok_or_else(|| "no ground truth".to_string())
}

fn ablations(full: &Trained, data: &[SyntheticSequence<f64>], held_out: &[SyntheticSequence<f64>]) -> Outcome {
    let base = mota_on(full, held_out)?;
    let no_motion = train_variant(false, true, data)?;
    let m1 = mota_on(&no_motion, held_out)?;
    let no_velocity = train_variant(true, false, data)?;
    let m2 = mota_on(&no_velocity, held_out)?;
    let detail = format!("MOTA full {base:.4}, without motion module {m1:.4}, without velocity features {m2:.4}");
    ensure(m1 < base && m2 < base, detail.clone())?;
    Ok(detail)
}

fn track_and_eval(cfg: &PipelineConfig, set: &[SyntheticSequence<f64>], out: &Path) -> Result<(), String> {
    let weights = cfg.weights::<f64>().map_err(|e| e.to_string())?;
    let mut evs = Vec::new();
    for (k, s) in set.iter().enumerate() {
        let run = run_track(cfg, &s.sequence, &weights, None, None).map_err(|e| e.to_string())?;
        write_records(&out.join(format!("tracks_{k:03}.jsonl")), &run.records).map_err(|e| e.to_string())?;
        evs.push(eval_sequence(&k.to_string(), &s.sequence, &s.truth, &run.records).map_err(|e| e.to_string())?);
    }
    let report = evaluate(&evs, &cfg.eval).map_err(|e| e.to_string())?;
    write_metrics_json(out.join("metrics.json"), &report).map_err(|e| e.to_string())?;
    let rows = sweep(&evs, &cfg.eval, SweepAxis::IouThreshold, &[0.25, 0.5]).map_err(|e| e.to_string())?;
    write_sweep_csv(out.join("sweep.csv"), SweepAxis::IouThreshold, &rows).map_err(|e| e.to_string())
}

fn determinism(full: &Trained, held_out: &[SyntheticSequence<f64>]) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let wpath = dir.path().join("weights.bin");
    full.outcome.weights.save(&wpath).map_err(|e| e.to_string())?;
    let mut cfg = full.cfg.clone();
    cfg.paths.weights = Some(wpath);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
        track_and_eval(&cfg, &held_out[..8], &out)?;
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&out).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            files.insert(p.file_name().unwrap().to_owned(), std::fs::read(&p).map_err(|e| e.to_string())?);
        }
        outputs.push(files);
    }
    let bytes: usize = outputs[0].values().map(|v| v.len()).sum();
    ensure(outputs[0] == outputs[1], "outputs differ between runs")?;
    Ok(format!("{} files, {bytes} bytes, byte-identical across two runs", outputs[0].len()))
}

// --------------------------------------------------------------------- driver

fn report(n: usize, title: &str, r: Outcome, failures: &mut usize) {
    match r {
        Ok(d) => println!("criterion {n} PASS  {title}: {d}"),
        Err(d) => {
            *failures += 1;
            println!("criterion {n} FAIL  {title}: {d}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report(1, "oracle pipeline", oracle_pipeline(), &mut failures);
    report(2, "sinkhorn", sinkhorn_properties(), &mut failures);
    report(3, "gradient checks", gradient_checks(), &mut failures);
    report(4, "clustering oracle", clustering_oracle(), &mut failures);
    report(5, "metric oracles", metric_oracles(), &mut failures);
    report(6, "loss values", loss_values(), &mut failures);

    let data = smoke_config().synthetic.generate::<f64>();
    let held_out = crowded(30, 1000).generate::<f64>();
    match (data, held_out) {
        (Ok(data), Ok(held_out)) => match train_variant(true, true, &data) {
            Ok(full) => {
                report(7, "training smoke test", training_smoke(&full), &mut failures);
                report(8, "ablation plumbing", ablations(&full, &data, &held_out), &mut failures);
                report(9, "determinism", determinism(&full, &held_out), &mut failures);
            }
            Err(e) => {
                for (n, t) in [(7, "training smoke test"), (8, "ablation plumbing"), (9, "determinism")] {
                    report(n, t, Err(format!("training failed: {e}")), &mut failures);
                }
            }
        },
        (Err(e), _) | (_, Err(e)) => {
            for (n, t) in [(7, "training smoke test"), (8, "ablation plumbing"), (9, "determinism")] {
                report(n, t, Err(format!("synthetic set: {e}")), &mut failures);
            }
        }
    }
    if failures == 0 {
        println!("all 9 criteria passed");
        return;
    }
    println!("{failures} of 9 criteria failed");
    // Set ACCEPTANCE_STRICT=1 to turn any failed criterion into a failing exit status.
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
