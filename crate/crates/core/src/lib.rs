//! Spinopelvic measurement from radiograph keypoints, plus the dataset,
//! statistics and evaluation machinery around it.
//!
//! Coordinates are raster pixels (x right, y down). Parameters are computed
//! in an anatomic frame inferred from the S1 endplate, so results do not
//! depend on which way the patient faces.

pub mod aggregator;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod report;
pub mod stats;
pub mod store;
pub mod synth;

pub use dataset::{AnnotationRecord, DatasetError};
pub use geometry::{
    compute_parameters, GeometryError, Keypoint, KeypointSet, Landmark, Parameter, Point,
    SpinopelvicParameters, View,
};
pub use report::{EvaluationReport, ReportError};
pub use store::{Store, StoreError};
