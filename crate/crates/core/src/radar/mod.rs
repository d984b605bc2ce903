//! Radar frames, annotations, ego-motion handling and sequence I/O.

mod io;
mod synth;

pub use io::{load_labels, load_sequence, save_labels, save_sequence, FRAME_DECIMALS};
pub use synth::{generate_synthetic_sequence, SyntheticSceneConfig, SyntheticSequence};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Pose, Vec3};
use crate::scalar::Scalar;

/// Rotation tolerance for ego poses.
pub const POSE_TOLERANCE: f64 = 1e-6;

/// One radar detection: position plus measured and ego-compensated radial velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint<T> {
    pub position: Vec3<T>,
    pub rrv: T,
    pub rrv_compensated: T,
}

impl<T: Scalar> RadarPoint<T> {
    pub fn new(position: Vec3<T>, rrv: T, rrv_compensated: T) -> Self {
        RadarPoint {
            position,
            rrv,
            rrv_compensated,
        }
    }

    pub fn is_finite(&self) -> bool {
        geometry::is_finite3(self.position) && self.rrv.is_finite() && self.rrv_compensated.is_finite()
    }
}

/// A single timestamped scan in sensor coordinates. `ego_pose` maps sensor to world.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrame<T> {
    pub points: Vec<RadarPoint<T>>,
    pub ego_pose: Pose<T>,
    pub timestamp: T,
    pub frame_index: u64,
}

impl<T: Scalar> RadarFrame<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3<T>> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Validation(format!(
                "frame {}: point {i} has a non-finite field",
                self.frame_index
            )));
        }
        self.ego_pose.validate(POSE_TOLERANCE).map_err(|e| {
            Error::Validation(format!("frame {}: {e}", self.frame_index))
        })
    }
}

/// Oriented 3D box annotation, expressed in the sensor coordinates of its frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation<T> {
    pub center: Vec3<T>,
    pub dims: Vec3<T>,
    pub yaw: T,
    pub track_id: i64,
    pub frame_index: u64,
}

impl<T: Scalar> BoxAnnotation<T> {
    /// Box frame to sensor frame.
    pub fn pose(&self) -> Pose<T> {
        Pose::from_yaw(self.yaw, self.center)
    }

    pub fn contains(&self, x: Vec3<T>) -> bool {
        let local = self.pose().inverse().apply(x);
        let half = T::of(0.5);
        (0..3).all(|k| local[k].abs() <= self.dims[k] * half)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(d.is_finite() && *d > T::zero())) {
            return Err(Error::Validation(format!(
                "box track {} frame {}: dims must be strictly positive",
                self.track_id, self.frame_index
            )));
        }
        if !geometry::is_finite3(self.center) || !self.yaw.is_finite() {
            return Err(Error::Validation(format!(
                "box track {} frame {}: non-finite pose",
                self.track_id, self.frame_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub fps: f64,
    pub sensor_id: String,
}

impl Default for SequenceMeta {
    fn default() -> Self {
        SequenceMeta {
            fps: 10.0,
            sensor_id: "radar".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFrame<T> {
    pub frame: RadarFrame<T>,
    pub boxes: Vec<BoxAnnotation<T>>,
}

/// Ordered radar scans with their box annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<T> {
    pub meta: SequenceMeta,
    pub frames: Vec<AnnotatedFrame<T>>,
}

impl<T: Scalar> Sequence<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, af) in self.frames.iter().enumerate() {
            af.frame.validate()?;
            if i > 0 && af.frame.frame_index <= self.frames[i - 1].frame.frame_index {
                return Err(Error::Validation(format!(
                    "frame_index must strictly increase (frame {} after {})",
                    af.frame.frame_index,
                    self.frames[i - 1].frame.frame_index
                )));
            }
            for b in &af.boxes {
                b.validate()?;
                if !seen.insert((b.track_id, b.frame_index)) {
                    return Err(Error::Validation(format!(
                        "duplicate annotation for track {} in frame {}",
                        b.track_id, b.frame_index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-point ground truth for one frame: backward flow, motion mask and object id (−1 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth<T> {
    pub flow: Vec<Vec3<T>>,
    pub motion_mask: Vec<u8>,
    pub object_id: Vec<i64>,
}

/// Result of [`compensate_rrv`].
#[derive(Debug, Clone, PartialEq)]
pub struct Compensated<T> {
    pub frame: RadarFrame<T>,
    /// Points at the sensor origin, left uncompensated.
    pub degenerate_points: usize,
}

/// Removes the ego velocity (sensor frame) from each point's radial velocity:
/// `rrv_compensated = rrv + ⟨unit(position), ego_velocity⟩`.
pub fn compensate_rrv<T: Scalar>(frame: &RadarFrame<T>, ego_velocity: Vec3<T>) -> Compensated<T> {
    let mut degenerate_points = 0;
    let points = frame
        .points
        .iter()
        .map(|p| {
            let r = geometry::norm(p.position);
            let rrv_compensated = if r.as_f64() < 1e-9 {
                degenerate_points += 1;
                p.rrv
            } else {
                p.rrv + geometry::dot(p.position, ego_velocity) / r
            };
            RadarPoint {
                rrv_compensated,
                ..*p
            }
        })
        .collect();
    if degenerate_points > 0 {
        log::warn!(
            "frame {}: {degenerate_points} point(s) at the sensor origin left uncompensated",
            frame.frame_index
        );
    }
    Compensated {
        frame: RadarFrame {
            points,
            ..frame.clone()
        },
        degenerate_points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(points: Vec<RadarPoint<f64>>) -> RadarFrame<f64> {
        RadarFrame {
            points,
            ego_pose: Pose::identity(),
            timestamp: 0.0,
            frame_index: 0,
        }
    }

    #[test]
    fn static_point_compensates_to_zero() {
        let f = frame(vec![RadarPoint::new([10.0, 0.0, 0.0], -5.0, 0.0)]);
        let c = compensate_rrv(&f, [5.0, 0.0, 0.0]);
        assert_eq!(c.frame.points[0].rrv_compensated, 0.0);
        assert_eq!(c.degenerate_points, 0);
    }

    #[test]
    fn zero_ego_velocity_is_identity() {
        let f = frame(vec![RadarPoint::new([3.0, 4.0, 1.0], 1.25, 9.0)]);
        let c = compensate_rrv(&f, [0.0; 3]);
        assert_eq!(c.frame.points[0].rrv_compensated, 1.25);
    }

    #[test]
    fn orthogonal_ego_velocity_leaves_rrv() {
        let f = frame(vec![RadarPoint::new([0.0, 10.0, 0.0], -2.0, 0.0)]);
        let c = compensate_rrv(&f, [5.0, 0.0, 0.0]);
        assert_eq!(c.frame.points[0].rrv_compensated, -2.0);
    }

    #[test]
    fn origin_point_is_flagged() {
        let f = frame(vec![RadarPoint::new([0.0, 0.0, 0.0], 0.7, 0.0)]);
        let c = compensate_rrv(&f, [5.0, 1.0, 0.0]);
        assert_eq!(c.frame.points[0].rrv_compensated, 0.7);
        assert_eq!(c.degenerate_points, 1);
    }

    #[test]
    fn box_containment_respects_yaw() {
        let b = BoxAnnotation {
            center: [0.0, 0.0, 0.0],
            dims: [4.0, 1.0, 1.0],
            yaw: std::f64::consts::FRAC_PI_2,
            track_id: 0,
            frame_index: 0,
        };
        assert!(b.contains([0.0, 1.9, 0.0]));
        assert!(!b.contains([1.9, 0.0, 0.0]));
    }

    #[test]
    fn nan_point_fails_validation() {
        let f = frame(vec![RadarPoint::new([f64::NAN, 0.0, 0.0], 0.0, 0.0)]);
        assert!(f.validate().is_err());
    }
}
