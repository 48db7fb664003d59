//! Multi-view quality-control engine for small assembly parts.
//!
//! Per-camera detections of screws and bolts from a three-station rig
//! (top, middle, bottom) are associated to registered components, fused
//! across views into per-component and per-assembly pass/fail verdicts,
//! and scored with a full detection-evaluation suite (precision, recall,
//! mAP@50, mAP@50-95). A streaming pipeline synchronizes the three feeds
//! per assembly under a latency budget.
//!
//! Modules:
//! - [`geometry`]: normalized boxes, IoU, non-maximum suppression.
//! - [`dataset`]: label parsing, manifests, stratified splitting, validation.
//! - [`detector`]: the backend contract with replay and synthetic detectors.
//! - [`evaluation`]: matching, PR curves, interpolated AP, mAP.
//! - [`fusion`]: component registry, per-view verdicts, fusion policies.
//! - [`pipeline`]: stream synchronization, latency summaries, batch/stream
//!   runs, and the verdict log.
//!
//! # Example
//!
//! Fuse one component seen by all three cameras, where only the middle
//! view flags it loose:
//!
//! ```
//! use triview_core::fusion::{fuse_component, FastenerState, FusionPolicy, ViewVerdict};
//! use triview_core::CameraId;
//!
//! let verdict = |camera, state, confidence| ViewVerdict {
//!     component_id: "bolt-3".to_string(),
//!     camera,
//!     state,
//!     confidence,
//!     source: None,
//! };
//! let views = [
//!     verdict(CameraId::Top, FastenerState::Fastened, 0.97),
//!     verdict(CameraId::Middle, FastenerState::Loose, 0.64),
//!     verdict(CameraId::Bottom, FastenerState::Fastened, 0.91),
//! ];
//!
//! let fused = fuse_component(&views, FusionPolicy::DefectPriority).unwrap();
//! assert_eq!(fused.state, FastenerState::Loose);
//!
//! let fused = fuse_component(&views, FusionPolicy::MajorityVote).unwrap();
//! assert_eq!(fused.state, FastenerState::Fastened);
//! ```

pub mod dataset;
pub mod detector;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod pipeline;

pub use dataset::{
    build_manifest, parse_label_file, stratified_split, validate, AnnotationRecord, CameraId,
    DatasetManifest, GroundTruthInstance, SplitTag,
};
pub use detector::{
    parse_detection_file, synth_detect, Detection, DetectorBackend, DetectorProfile, ReplayBackend,
    SyntheticBackend,
};
pub use evaluation::{
    average_precision, evaluate, match_detections, operating_point, pr_curve, EvalConfig,
    EvalReport, MatchResult, PrCurve,
};
pub use fusion::{
    assembly_verdict, associate, fuse_component, AssemblyVerdict, ComponentRegistry, FastenerState,
    FusionPolicy, OverallVerdict, ViewVerdict,
};
pub use geometry::{nms, BBox};
pub use pipeline::{run, RunConfig, RunMode, Synchronizer};
