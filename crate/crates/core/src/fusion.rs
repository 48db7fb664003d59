//! Per-view verdicts and multi-view fusion: detections are associated to
//! registered components by ROI overlap, then each component's view verdicts
//! are fused into one state, and the component states roll up into an
//! assembly pass/fail decision.
//!
//! The registry holds each fastener's expected image region per camera,
//! which stands in for cross-view geometric calibration: assemblies arrive
//! in a fixed pose, so static per-station ROIs identify the same physical
//! component across views.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::CameraId;
use crate::detector::Detection;
use crate::geometry::BBox;

pub const REGISTRY_FORMAT_VERSION: u32 = 1;

/// Default association threshold. ROIs are coarse station priors rather
/// than tight boxes, so this sits well below typical matching thresholds.
pub const DEFAULT_ASSOC_IOU: f64 = 0.3;

/// Class index that maps to [`FastenerState::Loose`] under the default
/// taxonomy (class 0 is fastened).
pub const LOOSE_CLASS: u32 = 1;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("component registry is empty")]
    EmptyRegistry,
    #[error("duplicate component id '{component_id}'")]
    DuplicateComponentId { component_id: String },
    #[error("component '{component_id}' is not visible in any camera")]
    InvisibleComponent { component_id: String },
    #[error("association IoU threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("detections from camera {found} passed to an associate call for {expected}")]
    MixedCameras { expected: CameraId, found: CameraId },
    #[error("two verdicts for component '{component_id}' come from the same camera {camera}")]
    DuplicateCameras {
        component_id: String,
        camera: CameraId,
    },
    #[error("fuse_component got verdicts for both '{first}' and '{second}'")]
    MixedComponents { first: String, second: String },
    #[error("unknown fusion policy '{0}'")]
    UnknownPolicy(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("registry format version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("registry JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-view classification of one fastener.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FastenerState {
    Fastened,
    Loose,
    Undetected,
}

impl FastenerState {
    pub fn from_class(class_id: u32) -> FastenerState {
        if class_id == LOOSE_CLASS {
            FastenerState::Loose
        } else {
            FastenerState::Fastened
        }
    }
}

impl fmt::Display for FastenerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FastenerState::Fastened => "fastened",
            FastenerState::Loose => "loose",
            FastenerState::Undetected => "undetected",
        };
        f.write_str(s)
    }
}

/// Where a component is expected to appear in one camera's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub roi: BBox,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub component_id: String,
    pub views: BTreeMap<CameraId, ViewEntry>,
}

impl Component {
    pub fn visible_in(&self, camera: CameraId) -> bool {
        self.views.get(&camera).map(|v| v.visible).unwrap_or(false)
    }
}

/// Station-level map from physical fasteners to expected per-camera
/// regions. Ids are unique and every component is visible somewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegistry", into = "RawRegistry")]
pub struct ComponentRegistry {
    components: Vec<Component>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRegistry {
    format_version: u32,
    components: Vec<Component>,
}

impl From<ComponentRegistry> for RawRegistry {
    fn from(r: ComponentRegistry) -> Self {
        RawRegistry {
            format_version: REGISTRY_FORMAT_VERSION,
            components: r.components,
        }
    }
}

impl TryFrom<RawRegistry> for ComponentRegistry {
    type Error = FusionError;

    fn try_from(raw: RawRegistry) -> Result<Self, Self::Error> {
        if raw.format_version != REGISTRY_FORMAT_VERSION {
            return Err(FusionError::SchemaVersion {
                found: raw.format_version,
                expected: REGISTRY_FORMAT_VERSION,
            });
        }
        ComponentRegistry::new(raw.components)
    }
}

impl ComponentRegistry {
    pub fn new(components: Vec<Component>) -> Result<Self, FusionError> {
        if components.is_empty() {
            return Err(FusionError::EmptyRegistry);
        }
        let mut seen = BTreeSet::new();
        for component in &components {
            if !seen.insert(component.component_id.clone()) {
                return Err(FusionError::DuplicateComponentId {
                    component_id: component.component_id.clone(),
                });
            }
            if !CameraId::ALL.iter().any(|&c| component.visible_in(c)) {
                return Err(FusionError::InvisibleComponent {
                    component_id: component.component_id.clone(),
                });
            }
        }
        Ok(ComponentRegistry { components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Cameras in which at least one component is visible.
    pub fn expected_cameras(&self) -> BTreeSet<CameraId> {
        let mut cameras = BTreeSet::new();
        for component in &self.components {
            for &camera in CameraId::ALL.iter() {
                if component.visible_in(camera) {
                    cameras.insert(camera);
                }
            }
        }
        cameras
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self, FusionError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(found) = value.get("format_version").and_then(|v| v.as_u64()) {
            if found != u64::from(REGISTRY_FORMAT_VERSION) {
                return Err(FusionError::SchemaVersion {
                    found: found as u32,
                    expected: REGISTRY_FORMAT_VERSION,
                });
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let text = fs::read_to_string(path).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        fs::write(path, self.to_json_string()).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// One camera's opinion about one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewVerdict {
    pub component_id: String,
    pub camera: CameraId,
    pub state: FastenerState,
    /// 0 when undetected.
    pub confidence: f64,
    pub source: Option<Detection>,
}

/// A detection that lost the keep-highest-confidence race on its component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superseded {
    pub component_id: String,
    pub detection_index: usize,
}

/// Output of [`associate`]: one verdict per component visible in the
/// camera, plus the detections that matched nothing (stray) and the ones
/// out-ranked on their component (superseded).
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub verdicts: Vec<ViewVerdict>,
    pub stray: Vec<usize>,
    pub superseded: Vec<Superseded>,
}

/// Assign each detection to the visible component whose expected ROI
/// overlaps it most (IoU at or above `assoc_iou_threshold`; ties by higher
/// IoU then lexicographic component id). A component keeps its
/// highest-confidence detection; the rest are recorded as superseded.
/// Components visible in this camera with no assignment come back
/// `Undetected`.
pub fn associate(
    detections: &[Detection],
    camera: CameraId,
    registry: &ComponentRegistry,
    assoc_iou_threshold: f64,
) -> Result<Association, FusionError> {
    if !(assoc_iou_threshold > 0.0 && assoc_iou_threshold <= 1.0) {
        return Err(FusionError::InvalidThreshold(assoc_iou_threshold));
    }
    for det in detections {
        if det.camera != camera {
            return Err(FusionError::MixedCameras {
                expected: camera,
                found: det.camera,
            });
        }
    }

    // component index (registry order) -> indices of assigned detections
    let mut assigned: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut stray = Vec::new();
    for (det_idx, det) in detections.iter().enumerate() {
        let mut best: Option<(usize, f64, &str)> = None;
        for (comp_idx, component) in registry.components().iter().enumerate() {
            let Some(view) = component.views.get(&camera) else {
                continue;
            };
            if !view.visible {
                continue;
            }
            let iou = det.bbox.iou(&view.roi);
            if iou < assoc_iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, best_iou, best_id)) => {
                    iou > best_iou || (iou == best_iou && component.component_id.as_str() < best_id)
                }
            };
            if better {
                best = Some((comp_idx, iou, component.component_id.as_str()));
            }
        }
        match best {
            Some((comp_idx, _, _)) => assigned.entry(comp_idx).or_default().push(det_idx),
            None => stray.push(det_idx),
        }
    }

    let mut verdicts = Vec::new();
    let mut superseded = Vec::new();
    for (comp_idx, component) in registry.components().iter().enumerate() {
        if !component.visible_in(camera) {
            continue;
        }
        match assigned.get(&comp_idx) {
            Some(det_indices) => {
                // keep the highest confidence; earlier index wins ties
                let &winner = det_indices
                    .iter()
                    .max_by(|&&a, &&b| {
                        detections[a]
                            .confidence
                            .total_cmp(&detections[b].confidence)
                            .then(b.cmp(&a))
                    })
                    .expect("assigned lists are nonempty");
                for &idx in det_indices {
                    if idx != winner {
                        superseded.push(Superseded {
                            component_id: component.component_id.clone(),
                            detection_index: idx,
                        });
                    }
                }
                let det = &detections[winner];
                verdicts.push(ViewVerdict {
                    component_id: component.component_id.clone(),
                    camera,
                    state: FastenerState::from_class(det.class_id),
                    confidence: det.confidence,
                    source: Some(det.clone()),
                });
            }
            None => verdicts.push(ViewVerdict {
                component_id: component.component_id.clone(),
                camera,
                state: FastenerState::Undetected,
                confidence: 0.0,
                source: None,
            }),
        }
    }

    Ok(Association {
        verdicts,
        stray,
        superseded,
    })
}

/// How a component's per-view verdicts combine into one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPolicy {
    /// Any loose view forces loose; the safety-first default.
    DefectPriority,
    /// Most frequent non-undetected state; ties go to loose.
    MajorityVote,
    /// State with the larger summed confidence; a margin under 0.1 goes
    /// to loose.
    ConfidenceWeighted,
}

impl fmt::Display for FusionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionPolicy::DefectPriority => "defect_priority",
            FusionPolicy::MajorityVote => "majority_vote",
            FusionPolicy::ConfidenceWeighted => "confidence_weighted",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionPolicy {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "defect_priority" => Ok(FusionPolicy::DefectPriority),
            "majority_vote" => Ok(FusionPolicy::MajorityVote),
            "confidence_weighted" => Ok(FusionPolicy::ConfidenceWeighted),
            other => Err(FusionError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Fused state and confidence for one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedState {
    pub state: FastenerState,
    pub confidence: f64,
}

/// Fuse up to three per-view verdicts (distinct cameras, one component)
/// under the chosen policy.
pub fn fuse_component(
    verdicts: &[ViewVerdict],
    policy: FusionPolicy,
) -> Result<FusedState, FusionError> {
    let mut cameras = BTreeSet::new();
    for verdict in verdicts {
        if !cameras.insert(verdict.camera) {
            return Err(FusionError::DuplicateCameras {
                component_id: verdict.component_id.clone(),
                camera: verdict.camera,
            });
        }
        if verdict.component_id != verdicts[0].component_id {
            return Err(FusionError::MixedComponents {
                first: verdicts[0].component_id.clone(),
                second: verdict.component_id.clone(),
            });
        }
    }

    let max_conf = |state: FastenerState| -> f64 {
        verdicts
            .iter()
            .filter(|v| v.state == state)
            .map(|v| v.confidence)
            .fold(0.0, f64::max)
    };
    let count = |state: FastenerState| verdicts.iter().filter(|v| v.state == state).count();

    let fused = match policy {
        FusionPolicy::DefectPriority => {
            if count(FastenerState::Loose) > 0 {
                FusedState {
                    state: FastenerState::Loose,
                    confidence: max_conf(FastenerState::Loose),
                }
            } else if count(FastenerState::Fastened) > 0 {
                FusedState {
                    state: FastenerState::Fastened,
                    confidence: max_conf(FastenerState::Fastened),
                }
            } else {
                FusedState {
                    state: FastenerState::Undetected,
                    confidence: 0.0,
                }
            }
        }
        FusionPolicy::MajorityVote => {
            let loose = count(FastenerState::Loose);
            let fastened = count(FastenerState::Fastened);
            if loose == 0 && fastened == 0 {
                FusedState {
                    state: FastenerState::Undetected,
                    confidence: 0.0,
                }
            } else if loose >= fastened {
                // ties go to loose
                FusedState {
                    state: FastenerState::Loose,
                    confidence: max_conf(FastenerState::Loose),
                }
            } else {
                FusedState {
                    state: FastenerState::Fastened,
                    confidence: max_conf(FastenerState::Fastened),
                }
            }
        }
        FusionPolicy::ConfidenceWeighted => {
            let sum = |state: FastenerState| -> f64 {
                verdicts
                    .iter()
                    .filter(|v| v.state == state)
                    .map(|v| v.confidence)
                    .sum()
            };
            let loose_sum = sum(FastenerState::Loose);
            let fastened_sum = sum(FastenerState::Fastened);
            if loose_sum == 0.0 && fastened_sum == 0.0 {
                FusedState {
                    state: FastenerState::Undetected,
                    confidence: 0.0,
                }
            } else if (loose_sum - fastened_sum).abs() < 0.1 || loose_sum > fastened_sum {
                let conf = max_conf(FastenerState::Loose);
                FusedState {
                    state: FastenerState::Loose,
                    // a margin call without any loose view falls back to
                    // the strongest contributing confidence
                    confidence: if conf > 0.0 {
                        conf
                    } else {
                        max_conf(FastenerState::Fastened)
                    },
                }
            } else {
                FusedState {
                    state: FastenerState::Fastened,
                    confidence: max_conf(FastenerState::Fastened),
                }
            }
        }
    };
    Ok(fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallVerdict {
    Pass,
    Fail,
    DegradedPass,
    DegradedFail,
}

impl fmt::Display for OverallVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OverallVerdict::Pass => "pass",
            OverallVerdict::Fail => "fail",
            OverallVerdict::DegradedPass => "degraded_pass",
            OverallVerdict::DegradedFail => "degraded_fail",
        };
        f.write_str(s)
    }
}

impl OverallVerdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, OverallVerdict::Fail | OverallVerdict::DegradedFail)
    }

    pub fn is_degraded(&self) -> bool {
        matches!(
            self,
            OverallVerdict::DegradedPass | OverallVerdict::DegradedFail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVerdict {
    pub component_id: String,
    pub state: FastenerState,
    pub confidence: f64,
}

/// Final decision for one assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyVerdict {
    pub assembly_id: String,
    pub components: Vec<ComponentVerdict>,
    pub overall: OverallVerdict,
    pub contributing_cameras: Vec<CameraId>,
    pub policy: FusionPolicy,
}

/// Fuse every registered component from the pooled per-view verdicts and
/// roll the results up into the assembly decision.
///
/// A component that fuses to `Undetected` while visible in at least one
/// live (non-missing) camera counts as a defect: a fastener nobody can see
/// cannot be certified tight. Components whose only witnesses are missing
/// cameras do not force a failure; the verdict is degraded instead.
pub fn assembly_verdict(
    assembly_id: &str,
    view_verdicts: &[ViewVerdict],
    registry: &ComponentRegistry,
    policy: FusionPolicy,
    missing_cameras: &BTreeSet<CameraId>,
) -> Result<AssemblyVerdict, FusionError> {
    let mut components = Vec::new();
    let mut any_defect = false;
    for component in registry.components() {
        let verdicts: Vec<ViewVerdict> = view_verdicts
            .iter()
            .filter(|v| {
                v.component_id == component.component_id && !missing_cameras.contains(&v.camera)
            })
            .cloned()
            .collect();
        let fused = fuse_component(&verdicts, policy)?;
        let visible_live = CameraId::ALL
            .iter()
            .any(|&c| component.visible_in(c) && !missing_cameras.contains(&c));
        let defect = match fused.state {
            FastenerState::Loose => true,
            FastenerState::Undetected => visible_live,
            FastenerState::Fastened => false,
        };
        any_defect |= defect;
        components.push(ComponentVerdict {
            component_id: component.component_id.clone(),
            state: fused.state,
            confidence: fused.confidence,
        });
    }

    let expected = registry.expected_cameras();
    let degraded = expected.iter().any(|c| missing_cameras.contains(c));
    let overall = match (any_defect, degraded) {
        (false, false) => OverallVerdict::Pass,
        (true, false) => OverallVerdict::Fail,
        (false, true) => OverallVerdict::DegradedPass,
        (true, true) => OverallVerdict::DegradedFail,
    };
    let contributing_cameras = expected
        .into_iter()
        .filter(|c| !missing_cameras.contains(c))
        .collect();

    Ok(AssemblyVerdict {
        assembly_id: assembly_id.to_string(),
        components,
        overall,
        contributing_cameras,
        policy,
    })
}
