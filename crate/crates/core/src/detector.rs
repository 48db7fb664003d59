//! Detector backends behind one contract: replay of precomputed detection
//! files, and a statistically calibrated synthetic detector that perturbs
//! ground truth.
//!
//! Detection files mirror the label layout under `detections/<camera>/`,
//! one `class cx cy w h confidence` line per detection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationRecord, CameraId, DatasetManifest};
use crate::geometry::{nms, BBox, GeometryError, ScoredBox};

pub const PROFILE_FORMAT_VERSION: u32 = 1;

/// Synthetic detections are NMS-filtered at this IoU before being returned,
/// like a real detector head would.
pub const SYNTH_NMS_IOU: f64 = 0.7;

const MIN_BOX_SIZE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed detection line: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: class {class_id} outside taxonomy of {class_count} classes")]
    ClassOutOfRange {
        line: usize,
        class_id: u32,
        class_count: usize,
    },
    #[error("line {line}: confidence {confidence} outside [0, 1]")]
    ConfidenceOutOfRange { line: usize, confidence: f64 },
    #[error("line {line}: invalid box: {source}")]
    InvalidBox { line: usize, source: GeometryError },
    #[error("in {path}: {source}")]
    InFile {
        path: String,
        source: Box<DetectorError>,
    },
    #[error("unknown image id '{image_id}' for camera {camera}")]
    UnknownImage { image_id: String, camera: CameraId },
    #[error("invalid detector profile: {reason}")]
    InvalidProfile { reason: String },
    #[error("profile format version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("profile JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// One detector output for one camera view of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub confidence: f64,
    pub camera: CameraId,
    pub image_id: String,
}

impl ScoredBox for Detection {
    fn bbox(&self) -> BBox {
        self.bbox
    }

    fn confidence(&self) -> f64 {
        self.confidence
    }

    fn class_id(&self) -> u32 {
        self.class_id
    }
}

/// Beta distribution parameters for a confidence sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    fn validate(&self, what: &str) -> Result<(), DetectorError> {
        if !(self.alpha > 0.0 && self.beta > 0.0)
            || !self.alpha.is_finite()
            || !self.beta.is_finite()
        {
            return Err(DetectorError::InvalidProfile {
                reason: format!("{what} beta parameters must be positive finite"),
            });
        }
        Ok(())
    }
}

/// Statistical model of a per-camera detector. `recall` has one entry per
/// class. Defaults skew true-positive confidences high (Beta(9,1), mean 0.9)
/// and false-positive confidences low (Beta(2,3), mean 0.4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct DetectorProfile {
    pub recall: Vec<f64>,
    pub fp_per_image: f64,
    pub sigma: f64,
    pub confusion: f64,
    pub tp_confidence: BetaParams,
    pub fp_confidence: BetaParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawProfile {
    format_version: u32,
    recall: Vec<f64>,
    fp_per_image: f64,
    sigma: f64,
    confusion: f64,
    tp_confidence: BetaParams,
    fp_confidence: BetaParams,
}

impl From<DetectorProfile> for RawProfile {
    fn from(p: DetectorProfile) -> Self {
        RawProfile {
            format_version: PROFILE_FORMAT_VERSION,
            recall: p.recall,
            fp_per_image: p.fp_per_image,
            sigma: p.sigma,
            confusion: p.confusion,
            tp_confidence: p.tp_confidence,
            fp_confidence: p.fp_confidence,
        }
    }
}

impl TryFrom<RawProfile> for DetectorProfile {
    type Error = DetectorError;

    fn try_from(raw: RawProfile) -> Result<Self, Self::Error> {
        if raw.format_version != PROFILE_FORMAT_VERSION {
            return Err(DetectorError::SchemaVersion {
                found: raw.format_version,
                expected: PROFILE_FORMAT_VERSION,
            });
        }
        let profile = DetectorProfile {
            recall: raw.recall,
            fp_per_image: raw.fp_per_image,
            sigma: raw.sigma,
            confusion: raw.confusion,
            tp_confidence: raw.tp_confidence,
            fp_confidence: raw.fp_confidence,
        };
        profile.validate()?;
        Ok(profile)
    }
}

impl DetectorProfile {
    /// Same recall for every class, default confidence shapes.
    pub fn uniform(recall: f64, fp_per_image: f64, sigma: f64, confusion: f64) -> Self {
        DetectorProfile {
            recall: vec![recall; 2],
            fp_per_image,
            sigma,
            confusion,
            tp_confidence: BetaParams {
                alpha: 9.0,
                beta: 1.0,
            },
            fp_confidence: BetaParams {
                alpha: 2.0,
                beta: 3.0,
            },
        }
    }

    /// Derive a profile from a reported precision/recall pair, assuming
    /// `instance_density` ground-truth instances per image: with TP rate
    /// `density * recall`, precision p implies `fp = tp * (1-p) / p` false
    /// positives per image.
    pub fn from_precision_recall(
        precision: f64,
        recall: f64,
        instance_density: f64,
        sigma: f64,
    ) -> Self {
        let fp_per_image = instance_density * recall * (1.0 - precision) / precision;
        Self::uniform(recall, fp_per_image, sigma, 0.0)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.recall.is_empty() {
            return Err(DetectorError::InvalidProfile {
                reason: "recall list is empty".into(),
            });
        }
        for &r in &self.recall {
            if !(0.0..=1.0).contains(&r) {
                return Err(DetectorError::InvalidProfile {
                    reason: format!("recall {r} outside [0, 1]"),
                });
            }
        }
        if !(self.fp_per_image >= 0.0 && self.fp_per_image.is_finite()) {
            return Err(DetectorError::InvalidProfile {
                reason: format!("fp_per_image {} must be >= 0", self.fp_per_image),
            });
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DetectorError::InvalidProfile {
                reason: format!("sigma {} must be >= 0", self.sigma),
            });
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            return Err(DetectorError::InvalidProfile {
                reason: format!("confusion {} outside [0, 1]", self.confusion),
            });
        }
        self.tp_confidence.validate("tp_confidence")?;
        self.fp_confidence.validate("fp_confidence")?;
        Ok(())
    }

    fn recall_for(&self, class_id: u32) -> f64 {
        let idx = (class_id as usize).min(self.recall.len() - 1);
        self.recall[idx]
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self, DetectorError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(found) = value.get("format_version").and_then(|v| v.as_u64()) {
            if found != u64::from(PROFILE_FORMAT_VERSION) {
                return Err(DetectorError::SchemaVersion {
                    found: found as u32,
                    expected: PROFILE_FORMAT_VERSION,
                });
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = fs::read_to_string(path).map_err(|source| DetectorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        fs::write(path, self.to_json_string()).map_err(|source| DetectorError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Profiles calibrated to the per-camera test metrics of the three-station
/// rig (top P 0.900 / R 0.987, middle P 0.971 / R 0.241, bottom
/// P 0.866 / R 0.658), assuming one instance per image for the FP rate.
pub mod presets {
    use super::DetectorProfile;
    use crate::dataset::CameraId;

    pub const TOP_JSON: &str = include_str!("../presets/top.json");
    pub const MIDDLE_JSON: &str = include_str!("../presets/middle.json");
    pub const BOTTOM_JSON: &str = include_str!("../presets/bottom.json");

    pub fn for_camera(camera: CameraId) -> DetectorProfile {
        let text = match camera {
            CameraId::Top => TOP_JSON,
            CameraId::Middle => MIDDLE_JSON,
            CameraId::Bottom => BOTTOM_JSON,
        };
        DetectorProfile::from_json_str(text).expect("bundled preset is valid")
    }

    pub fn all() -> std::collections::BTreeMap<CameraId, DetectorProfile> {
        CameraId::ALL.iter().map(|&c| (c, for_camera(c))).collect()
    }
}

/// Uniform detector contract: detections for one (image, camera) view,
/// already NMS-filtered by the backend.
pub trait DetectorBackend {
    fn detect(&self, image_id: &str, camera: CameraId) -> Result<Vec<Detection>, DetectorError>;
}

/// Result of parsing one detection file.
#[derive(Debug, Clone)]
pub struct ParsedDetections {
    pub detections: Vec<Detection>,
    /// 1-based line numbers whose boxes were clamped to the unit frame.
    pub clamped_lines: Vec<usize>,
}

/// Parse `class cx cy w h confidence` lines.
pub fn parse_detection_file(
    text: &str,
    image_id: &str,
    camera: CameraId,
    class_count: usize,
) -> Result<ParsedDetections, DetectorError> {
    let mut detections = Vec::new();
    let mut clamped_lines = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(DetectorError::MalformedLine {
                line,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|_| DetectorError::MalformedLine {
                line,
                reason: format!("bad class id '{}'", fields[0]),
            })?;
        if class_id as usize >= class_count {
            return Err(DetectorError::ClassOutOfRange {
                line,
                class_id,
                class_count,
            });
        }
        let mut nums = [0.0f64; 5];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            *slot = field.parse().map_err(|_| DetectorError::MalformedLine {
                line,
                reason: format!("bad float '{field}'"),
            })?;
        }
        let confidence = nums[4];
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DetectorError::ConfidenceOutOfRange { line, confidence });
        }
        let (bbox, clamped) = BBox::new_clamped(nums[0], nums[1], nums[2], nums[3])
            .map_err(|source| DetectorError::InvalidBox { line, source })?;
        if clamped {
            clamped_lines.push(line);
        }
        detections.push(Detection {
            bbox,
            class_id,
            confidence,
            camera,
            image_id: image_id.to_string(),
        });
    }
    Ok(ParsedDetections {
        detections,
        clamped_lines,
    })
}

/// Render detections back to file text; floats round-trip exactly.
pub fn write_detection_file(detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            d.class_id,
            d.bbox.cx(),
            d.bbox.cy(),
            d.bbox.w(),
            d.bbox.h(),
            d.confidence
        ));
    }
    out
}

/// Replays precomputed detection files from `detections/<camera>/<stem>.txt`.
/// All files are parsed eagerly at construction; `detect` is a pure lookup.
pub struct ReplayBackend {
    by_image: BTreeMap<String, Vec<Detection>>,
    stems_by_camera: BTreeMap<CameraId, Vec<String>>,
}

impl ReplayBackend {
    pub fn from_dir(detections_root: &Path, class_count: usize) -> Result<Self, DetectorError> {
        let mut by_image = BTreeMap::new();
        let mut stems_by_camera: BTreeMap<CameraId, Vec<String>> = BTreeMap::new();
        for camera in CameraId::ALL {
            let dir = detections_root.join(camera.dir_name());
            let mut stems = Vec::new();
            if dir.is_dir() {
                let mut paths: Vec<_> = fs::read_dir(&dir)
                    .map_err(|source| DetectorError::Io {
                        path: dir.display().to_string(),
                        source,
                    })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
                    .collect();
                paths.sort();
                for path in paths {
                    let stem = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_string();
                    let image_id = format!("{}/{}", camera.dir_name(), stem);
                    let text = fs::read_to_string(&path).map_err(|source| DetectorError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    let parsed = parse_detection_file(&text, &image_id, camera, class_count)
                        .map_err(|source| DetectorError::InFile {
                            path: path.display().to_string(),
                            source: Box::new(source),
                        })?;
                    by_image.insert(image_id, parsed.detections);
                    stems.push(stem);
                }
            }
            stems_by_camera.insert(camera, stems);
        }
        Ok(ReplayBackend {
            by_image,
            stems_by_camera,
        })
    }

    /// Sorted stems (assembly ids) that have a detection file for `camera`.
    pub fn stems(&self, camera: CameraId) -> &[String] {
        &self.stems_by_camera[&camera]
    }

    /// Union of stems across all cameras, sorted.
    pub fn all_stems(&self) -> Vec<String> {
        let mut set: Vec<String> = self.stems_by_camera.values().flatten().cloned().collect();
        set.sort();
        set.dedup();
        set
    }
}

impl DetectorBackend for ReplayBackend {
    fn detect(&self, image_id: &str, camera: CameraId) -> Result<Vec<Detection>, DetectorError> {
        let key = if image_id.starts_with(camera.dir_name()) && image_id.contains('/') {
            image_id.to_string()
        } else {
            format!("{}/{}", camera.dir_name(), image_id)
        };
        self.by_image
            .get(&key)
            .cloned()
            .ok_or_else(|| DetectorError::UnknownImage {
                image_id: image_id.to_string(),
                camera,
            })
    }
}

/// Ground-truth perturbation model. Each GT instance is independently kept
/// with the profile recall, jittered, possibly class-flipped, and scored
/// from the TP confidence distribution; Poisson false positives with uniform
/// random geometry are added; the result is NMS-filtered at
/// [`SYNTH_NMS_IOU`].
///
/// The random stream is derived from `(seed, image_id)`, so detection is
/// deterministic per image and independent of evaluation order.
pub fn synth_detect(
    gt: &AnnotationRecord,
    profile: &DetectorProfile,
    seed: u64,
    class_count: usize,
) -> Result<Vec<Detection>, DetectorError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(&gt.image_id));

    let tp_conf = Beta::new(profile.tp_confidence.alpha, profile.tp_confidence.beta)
        .expect("validated beta params");
    let fp_conf = Beta::new(profile.fp_confidence.alpha, profile.fp_confidence.beta)
        .expect("validated beta params");

    let mut raw: Vec<Detection> = Vec::new();
    for inst in &gt.instances {
        if rng.random::<f64>() >= profile.recall_for(inst.class_id) {
            continue;
        }
        let bbox = if profile.sigma > 0.0 {
            jitter_box(&inst.bbox, profile.sigma, &mut rng)
        } else {
            inst.bbox
        };
        let mut class_id = inst.class_id;
        if profile.confusion > 0.0 && class_count > 1 && rng.random::<f64>() < profile.confusion {
            let offset = rng.random_range(1..class_count as u32);
            class_id = (class_id + offset) % class_count as u32;
        }
        raw.push(Detection {
            bbox,
            class_id,
            confidence: tp_conf.sample(&mut rng),
            camera: gt.camera,
            image_id: gt.image_id.clone(),
        });
    }

    if profile.fp_per_image > 0.0 {
        let poisson = Poisson::new(profile.fp_per_image).expect("validated fp rate");
        let count = poisson.sample(&mut rng) as usize;
        for _ in 0..count {
            let w = rng.random_range(0.02..0.30);
            let h = rng.random_range(0.02..0.30);
            let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
            let (bbox, _) = BBox::new_clamped(cx, cy, w, h)?;
            raw.push(Detection {
                bbox,
                class_id: rng.random_range(0..class_count as u32),
                confidence: fp_conf.sample(&mut rng),
                camera: gt.camera,
                image_id: gt.image_id.clone(),
            });
        }
    }

    Ok(nms(&raw, SYNTH_NMS_IOU)?)
}

fn jitter_box(bbox: &BBox, sigma: f64, rng: &mut ChaCha8Rng) -> BBox {
    let center_noise = Normal::new(0.0, sigma).expect("validated sigma");
    let scale_noise = Normal::new(0.0, sigma).expect("validated sigma");
    let w = (bbox.w() * scale_noise.sample(rng).exp()).clamp(MIN_BOX_SIZE, 1.0);
    let h = (bbox.h() * scale_noise.sample(rng).exp()).clamp(MIN_BOX_SIZE, 1.0);
    let cx = (bbox.cx() + center_noise.sample(rng)).clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = (bbox.cy() + center_noise.sample(rng)).clamp(h / 2.0, 1.0 - h / 2.0);
    let (jittered, _) = BBox::new_clamped(cx, cy, w, h).expect("clamped jitter stays in frame");
    jittered
}

fn fnv1a64(s: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in s.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Synthetic backend over a whole manifest, one profile per camera.
pub struct SyntheticBackend {
    gt: BTreeMap<String, AnnotationRecord>,
    profiles: BTreeMap<CameraId, DetectorProfile>,
    class_count: usize,
    seed: u64,
}

impl SyntheticBackend {
    pub fn new(
        manifest: &DatasetManifest,
        profiles: BTreeMap<CameraId, DetectorProfile>,
        seed: u64,
    ) -> Result<Self, DetectorError> {
        for profile in profiles.values() {
            profile.validate()?;
        }
        let gt = manifest
            .records()
            .iter()
            .map(|r| (r.image_id.clone(), r.clone()))
            .collect();
        Ok(SyntheticBackend {
            gt,
            profiles,
            class_count: manifest.class_names().len(),
            seed,
        })
    }
}

impl DetectorBackend for SyntheticBackend {
    fn detect(&self, image_id: &str, camera: CameraId) -> Result<Vec<Detection>, DetectorError> {
        let record = self
            .gt
            .get(image_id)
            .filter(|r| r.camera == camera)
            .ok_or_else(|| DetectorError::UnknownImage {
                image_id: image_id.to_string(),
                camera,
            })?;
        let profile = self
            .profiles
            .get(&camera)
            .ok_or_else(|| DetectorError::InvalidProfile {
                reason: format!("no profile configured for camera {camera}"),
            })?;
        synth_detect(record, profile, self.seed, self.class_count)
    }
}
