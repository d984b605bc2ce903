//! Pseudo ground truth from ego poses and box annotations.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, sub, Vec3};
use crate::radar::{BoxAnnotation, RadarFrame};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Ego-compensated displacement per frame above which a point is moving, meters.
    pub motion_label_threshold: f64,
    /// A detection inherits a ground-truth id when its point IoU exceeds this.
    pub inherit_iou: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            motion_label_threshold: 0.05,
            inherit_iou: 0.25,
        }
    }
}

/// Point-level labels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLabels<T> {
    pub flow: Array2<T>,
    pub motion_mask: Vec<u8>,
    /// Box track id per point, −1 for background.
    pub point_object_id: Vec<i64>,
}

/// Point-level labels plus the detection × track association target.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLabels<T> {
    pub flow: Array2<T>,
    pub motion_mask: Vec<u8>,
    pub affinity: Array2<u8>,
    pub point_object_id: Vec<i64>,
}

/// Id of the first box containing each point, −1 when none does.
pub fn point_object_ids<T: Scalar>(frame: &RadarFrame<T>, boxes: &[BoxAnnotation<T>]) -> Vec<i64> {
    frame
        .points
        .iter()
        .map(|p| boxes.iter().find(|b| b.contains(p.position)).map_or(-1, |b| b.track_id))
        .collect()
}

/// Flow, motion mask and object ids for `frame` given the previous frame's pose and boxes.
///
/// Points inside a box whose id also exists at `t − 1` follow that box's rigid
/// motion; every other point gets the flow induced by ego motion alone.
pub fn point_labels<T: Scalar>(
    frame: &RadarFrame<T>,
    prev: &RadarFrame<T>,
    boxes: &[BoxAnnotation<T>],
    boxes_prev: &[BoxAnnotation<T>],
    cfg: &LabelConfig,
) -> Result<PointLabels<T>> {
    let mut prev_by_id = HashMap::new();
    for b in boxes_prev {
        if prev_by_id.insert(b.track_id, b).is_some() {
            return Err(Error::Validation(format!(
                "track id {} appears twice in frame {}",
                b.track_id, b.frame_index
            )));
        }
    }
    // sensor(t) → sensor(t−1)
    let ego = prev.ego_pose.inverse().compose(&frame.ego_pose);
    let ids = point_object_ids(frame, boxes);
    let n = frame.len();
    let mut flow = Array2::zeros((n, 3));
    let mut mask = vec![0u8; n];
    let thr = T::of(cfg.motion_label_threshold);
    for (i, p) in frame.points.iter().enumerate() {
        let x = p.position;
        let ego_prev = ego.apply(x);
        let mut target = ego_prev;
        if ids[i] >= 0 {
            if let (Some(b), Some(bp)) = (boxes.iter().find(|b| b.track_id == ids[i]), prev_by_id.get(&ids[i])) {
                let rigid = bp.pose().compose(&b.pose().inverse());
                target = rigid.apply(x);
            }
        }
        let s = sub(target, x);
        for k in 0..3 {
            flow[[i, k]] = s[k];
        }
        mask[i] = u8::from(norm(sub(target, ego_prev)) > thr);
    }
    Ok(PointLabels {
        flow,
        motion_mask: mask,
        point_object_id: ids,
    })
}

/// Point-set IoU; two empty sets give 0.
pub fn index_iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::HashSet<_> = a.iter().collect();
    let sb: std::collections::HashSet<_> = b.iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ground-truth id inherited by each point set: greedy by descending IoU,
/// strictly above `threshold`, each id used at most once.
pub fn inherit_ids(sets: &[Vec<usize>], point_object_id: &[i64], threshold: f64) -> Vec<Option<i64>> {
    let mut objects: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &id) in point_object_id.iter().enumerate() {
        if id >= 0 {
            objects.entry(id).or_default().push(i);
        }
    }
    let mut cand = Vec::new();
    for (k, s) in sets.iter().enumerate() {
        for (id, pts) in &objects {
            let iou = index_iou(s, pts);
            if iou > threshold {
                cand.push((iou, k, *id));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; sets.len()];
    let mut used = std::collections::HashSet::new();
    for (_, k, id) in cand {
        if out[k].is_none() && !used.contains(&id) {
            out[k] = Some(id);
            used.insert(id);
        }
    }
    out
}

/// `ã[k][m] = 1` iff detection `k` and track `m` inherited the same id.
pub fn affinity_target(det_ids: &[Option<i64>], track_ids: &[Option<i64>]) -> Array2<u8> {
    Array2::from_shape_fn((det_ids.len(), track_ids.len()), |(k, m)| match (det_ids[k], track_ids[m]) {
        (Some(a), Some(b)) => u8::from(a == b),
        _ => 0,
    })
}

/// Full label set for one frame pair and its detections / previous tracks
/// (each given as frame-local point index sets).
#[allow(clippy::too_many_arguments)]
pub fn generate_labels<T: Scalar>(
    frame: &RadarFrame<T>,
    prev: &RadarFrame<T>,
    boxes: &[BoxAnnotation<T>],
    boxes_prev: &[BoxAnnotation<T>],
    detections: &[Vec<usize>],
    tracks_prev: &[Vec<usize>],
    cfg: &LabelConfig,
) -> Result<GroundTruthLabels<T>> {
    let pl = point_labels(frame, prev, boxes, boxes_prev, cfg)?;
    let prev_ids = point_object_ids(prev, boxes_prev);
    let det_ids = inherit_ids(detections, &pl.point_object_id, cfg.inherit_iou);
    let track_ids = inherit_ids(tracks_prev, &prev_ids, cfg.inherit_iou);
    Ok(GroundTruthLabels {
        flow: pl.flow,
        motion_mask: pl.motion_mask,
        affinity: affinity_target(&det_ids, &track_ids),
        point_object_id: pl.point_object_id,
    })
}

/// Point sets of moving ground-truth objects, ordered by smallest member index.
pub fn moving_object_sets(point_object_id: &[i64], motion_mask: &[u8]) -> Vec<(i64, Vec<usize>)> {
    let mut objects: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, (&id, &m)) in point_object_id.iter().zip(motion_mask).enumerate() {
        if id >= 0 && m != 0 {
            objects.entry(id).or_default().push(i);
        }
    }
    let mut v: Vec<(i64, Vec<usize>)> = objects.into_iter().collect();
    v.sort_by_key(|(_, pts)| pts[0]);
    v
}

/// Position of each point of `frame` moved by its flow.
pub fn displaced<T: Scalar>(frame: &RadarFrame<T>, flow: &Array2<T>) -> Vec<Vec3<T>> {
    frame
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| [p.position[0] + flow[[i, 0]], p.position[1] + flow[[i, 1]], p.position[2] + flow[[i, 2]]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::radar::RadarPoint;

    fn frame(pos: &[[f64; 3]], ego: [f64; 3], idx: u64) -> RadarFrame<f64> {
        RadarFrame {
            points: pos.iter().map(|p| RadarPoint::new(*p, 0.0, 0.0)).collect(),
            ego_pose: Pose::from_translation(ego),
            timestamp: idx as f64 * 0.1,
            frame_index: idx,
        }
    }

    fn bx(c: [f64; 3], id: i64, f: u64) -> BoxAnnotation<f64> {
        BoxAnnotation {
            center: c,
            dims: [2.0, 2.0, 2.0],
            yaw: 0.0,
            track_id: id,
            frame_index: f,
        }
    }

    #[test]
    fn static_scene_is_all_zero() {
        let f0 = frame(&[[5.0, 0.0, 0.0], [8.0, 1.0, 0.0]], [0.0; 3], 0);
        let f1 = frame(&[[5.0, 0.0, 0.0], [8.0, 1.0, 0.0]], [0.0; 3], 1);
        let l = generate_labels(&f1, &f0, &[], &[], &[vec![0]], &[vec![1]], &LabelConfig::default()).unwrap();
        assert!(l.flow.iter().all(|v| *v == 0.0));
        assert!(l.motion_mask.iter().all(|m| *m == 0));
        assert!(l.affinity.iter().all(|a| *a == 0));
    }

    #[test]
    fn translating_box() {
        let f0 = frame(&[[9.0, 0.0, 0.0], [9.5, 0.5, 0.0], [20.0, 0.0, 0.0]], [0.0; 3], 0);
        let f1 = frame(&[[10.0, 0.0, 0.0], [10.5, 0.5, 0.0], [20.0, 0.0, 0.0]], [0.0; 3], 1);
        let l = point_labels(&f1, &f0, &[bx([10.0, 0.0, 0.0], 4, 1)], &[bx([9.0, 0.0, 0.0], 4, 0)], &LabelConfig::default())
            .unwrap();
        for i in 0..2 {
            assert!((l.flow[[i, 0]] + 1.0).abs() < 1e-12);
            assert!(l.flow[[i, 1]].abs() < 1e-12);
        }
        assert_eq!(l.motion_mask, vec![1, 1, 0]);
        assert_eq!(l.point_object_id, vec![4, 4, -1]);
    }

    #[test]
    fn ego_motion_flow_is_not_moving() {
        let f0 = frame(&[[10.0, 0.0, 0.0]], [0.0; 3], 0);
        let f1 = frame(&[[9.0, 0.0, 0.0]], [1.0, 0.0, 0.0], 1);
        let l = point_labels(&f1, &f0, &[], &[], &LabelConfig::default()).unwrap();
        assert!((l.flow[[0, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(l.motion_mask, vec![0]);
    }

    #[test]
    fn new_box_gets_ego_only_flow() {
        let f0 = frame(&[[10.0, 0.0, 0.0]], [0.0; 3], 0);
        let f1 = frame(&[[10.0, 0.0, 0.0]], [0.0; 3], 1);
        let l = point_labels(&f1, &f0, &[bx([10.0, 0.0, 0.0], 1, 1)], &[], &LabelConfig::default()).unwrap();
        assert_eq!(l.motion_mask, vec![0]);
        assert_eq!(l.point_object_id, vec![1]);
    }

    #[test]
    fn low_iou_detection_inherits_nothing() {
        // object 0 owns points 0..5; detection covers one of them plus four others: IoU 1/9
        let ids = vec![0, 0, 0, 0, 0, -1, -1, -1, -1];
        assert_eq!(inherit_ids(&[vec![4, 5, 6, 7, 8]], &ids, 0.25), vec![None]);
        // IoU exactly 0.2 also fails
        let ids = vec![0, -1, -1, -1, -1];
        assert_eq!(inherit_ids(&[vec![0, 1, 2, 3, 4]], &ids, 0.25), vec![None]);
        assert_eq!(inherit_ids(&[vec![0]], &ids, 0.25), vec![Some(0)]);
    }

    #[test]
    fn affinity_has_one_per_row_and_column() {
        let ids_t = vec![3, 3, 5, 5, -1];
        let ids_p = vec![5, 5, 3, 3];
        let det = inherit_ids(&[vec![0, 1], vec![2, 3], vec![0]], &ids_t, 0.25);
        let trk = inherit_ids(&[vec![0, 1], vec![2, 3]], &ids_p, 0.25);
        let a = affinity_target(&det, &trk);
        assert_eq!(a, ndarray::array![[0, 1], [1, 0], [0, 0]]);
    }
}
