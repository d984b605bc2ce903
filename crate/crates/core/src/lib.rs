//! Class-agnostic detection and tracking of moving objects in 4D radar point clouds.
//!
//! Each frame passes through a point encoder, a cost volume against the previous
//! frame, a per-point motion classifier and a recurrent flow head. Moving points
//! are clustered into detections, which are associated with existing tracks
//! through a learned affinity normalized by Sinkhorn iterations.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod associator;
pub mod backbone;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod motion;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod radar;
pub mod scalar;
pub mod supervision;

pub use error::{Error, Result};

pub type Vec3 = geometry::Vec3<f64>;
pub type Pose = geometry::Pose<f64>;
pub type RadarPoint = radar::RadarPoint<f64>;
pub type RadarFrame = radar::RadarFrame<f64>;
pub type BoxAnnotation = radar::BoxAnnotation<f64>;
pub type Sequence = radar::Sequence<f64>;
pub type FrameTruth = radar::FrameTruth<f64>;
pub type WeightStore = network::WeightStore<f64>;
pub type NetworkOutput = network::NetworkOutput<f64>;
pub type SceneFlow = motion::SceneFlow<f64>;
pub type GruState = motion::GruState<f64>;
pub type Cluster = detector::Cluster<f64>;
pub type Detection = associator::Detection<f64>;
pub type Track = associator::Track<f64>;
pub type TrackSet = associator::TrackSet<f64>;
pub type PointLabels = supervision::PointLabels<f64>;
pub type TrainingSequence = supervision::TrainingSequence<f64>;
pub type Tracker<'a> = pipeline::Tracker<'a, f64>;
