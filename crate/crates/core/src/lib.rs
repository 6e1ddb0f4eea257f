//! Lane-change intention data pipeline: recording ingest, learned reference
//! paths, Frenet conversion, traffic scenes, labeled segments and feature
//! samples, plus a synthetic highway generator.
//!
//! Geometry is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common `f64` instantiations.

pub mod dataset;
pub mod features;
pub mod frenet;
pub mod ingest;
pub mod lanes;
pub mod refpath;
pub mod scalar;
pub mod scene;
pub mod segment;
pub mod stats;
pub mod svm;
pub mod synth;

pub use features::{Normalizer, Sample, COLUMN_NAMES, N_FEATURES, N_STEPS};
pub use ingest::{DriveSide, Frame, RecordingBundle, Track, TrackId, TrackPoint};
pub use lanes::{DirectionLanes, LaneConfig, Side};
pub use scalar::Scalar;
pub use segment::{Label, Segment, SegmentParams};

pub type ReferencePath64 = refpath::ReferencePath<f64>;
pub type FrenetState64 = frenet::FrenetState<f64>;
pub type FrenetConverter64 = frenet::FrenetConverter<f64>;
pub type SvmModel64 = svm::SvmModel<f64>;
pub type SceneFrame64 = scene::SceneFrame<f64>;
pub type Sample32 = features::Sample<f32>;
pub type Sample64 = features::Sample<f64>;
