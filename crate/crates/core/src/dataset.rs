//! Parsing, validation, and stratified splitting of the three-camera
//! screw/bolt dataset.
//!
//! On-disk layout: `images/<camera>/*.{jpg,jpeg,png}` with matching
//! `labels/<camera>/<stem>.txt` label files, one `class cx cy w h` line per
//! instance. Cameras are the fixed stations `top`, `middle`, `bottom`;
//! image ids are `<camera>/<stem>` so the same assembly stem can appear once
//! per camera.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Ratio floors get this slack so `n * 0.7` style products that land a hair
/// under an integer still floor to it.
const RATIO_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed label line: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: class {class_id} outside taxonomy of {class_count} classes")]
    ClassOutOfRange {
        line: usize,
        class_id: u32,
        class_count: usize,
    },
    #[error("line {line}: invalid box: {source}")]
    InvalidBox { line: usize, source: GeometryError },
    #[error("in {path}: {source}")]
    InFile {
        path: String,
        source: Box<DatasetError>,
    },
    #[error("unknown camera directory '{name}' (expected top, middle, or bottom)")]
    UnknownCameraDir { name: String },
    #[error("duplicate image stem '{stem}' under camera {camera}")]
    DuplicateStem { camera: CameraId, stem: String },
    #[error("duplicate image id '{image_id}' in manifest")]
    DuplicateImageId { image_id: String },
    #[error("split ratios must be positive and sum to 1, got ({0}, {1}, {2})")]
    InvalidRatios(f64, f64, f64),
    #[error("camera {camera} stratum has {count} records; at least 3 are required to split")]
    StratumTooSmall { camera: CameraId, count: usize },
    #[error("manifest format version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// The three fixed capture stations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Top,
    Middle,
    Bottom,
}

impl CameraId {
    pub const ALL: [CameraId; 3] = [CameraId::Top, CameraId::Middle, CameraId::Bottom];

    pub fn dir_name(&self) -> &'static str {
        match self {
            CameraId::Top => "top",
            CameraId::Middle => "middle",
            CameraId::Bottom => "bottom",
        }
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for CameraId {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "top" => Ok(CameraId::Top),
            "middle" => Ok(CameraId::Middle),
            "bottom" => Ok(CameraId::Bottom),
            other => Err(DatasetError::UnknownCameraDir {
                name: other.to_string(),
            }),
        }
    }
}

/// One labeled instance: fastener class plus its box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub class_id: u32,
    pub bbox: BBox,
}

/// All ground truth for one image of one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub camera: CameraId,
    #[serde(default)]
    pub image_path: String,
    pub instances: Vec<GroundTruthInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Unsplit,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Unsplit => "unsplit",
        };
        f.write_str(s)
    }
}

/// Non-fatal findings emitted while ingesting data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetWarning {
    /// A label box overran the unit frame and was clamped.
    ClampedBox { image_id: String, line: usize },
    /// An image has no label file; it was recorded with zero instances.
    MissingLabelFile { image_id: String },
    /// A label file has no matching image.
    OrphanLabelFile { camera: CameraId, stem: String },
    /// The root has no `images/` directory.
    NoImagesDir { root: String },
}

impl fmt::Display for DatasetWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetWarning::ClampedBox { image_id, line } => {
                write!(
                    f,
                    "{image_id}: box on line {line} clamped to the unit frame"
                )
            }
            DatasetWarning::MissingLabelFile { image_id } => {
                write!(f, "{image_id}: no label file, treated as empty")
            }
            DatasetWarning::OrphanLabelFile { camera, stem } => {
                write!(f, "label {camera}/{stem}.txt has no matching image")
            }
            DatasetWarning::NoImagesDir { root } => {
                write!(f, "no images/ directory under {root}; manifest is empty")
            }
        }
    }
}

pub fn default_class_names() -> Vec<String> {
    vec!["fastened".to_string(), "loose".to_string()]
}

/// Immutable set of annotation records with a split tag and taxonomy.
/// Image ids are unique; the constructor and the JSON importer both enforce
/// this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawManifest", into = "RawManifest")]
pub struct DatasetManifest {
    records: Vec<AnnotationRecord>,
    split_tag: SplitTag,
    class_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawManifest {
    format_version: u32,
    split_tag: SplitTag,
    class_names: Vec<String>,
    records: Vec<AnnotationRecord>,
}

impl From<DatasetManifest> for RawManifest {
    fn from(m: DatasetManifest) -> Self {
        RawManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            split_tag: m.split_tag,
            class_names: m.class_names,
            records: m.records,
        }
    }
}

impl TryFrom<RawManifest> for DatasetManifest {
    type Error = DatasetError;

    fn try_from(raw: RawManifest) -> Result<Self, Self::Error> {
        if raw.format_version != MANIFEST_FORMAT_VERSION {
            return Err(DatasetError::SchemaVersion {
                found: raw.format_version,
                expected: MANIFEST_FORMAT_VERSION,
            });
        }
        DatasetManifest::new(raw.records, raw.class_names, raw.split_tag)
    }
}

impl DatasetManifest {
    pub fn new(
        records: Vec<AnnotationRecord>,
        class_names: Vec<String>,
        split_tag: SplitTag,
    ) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.image_id.clone()) {
                return Err(DatasetError::DuplicateImageId {
                    image_id: r.image_id.clone(),
                });
            }
        }
        Ok(DatasetManifest {
            records,
            split_tag,
            class_names,
        })
    }

    pub fn empty(class_names: Vec<String>) -> Self {
        DatasetManifest {
            records: Vec::new(),
            split_tag: SplitTag::Unsplit,
            class_names,
        }
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per camera (cameras with zero records included).
    pub fn camera_counts(&self) -> BTreeMap<CameraId, usize> {
        let mut counts: BTreeMap<CameraId, usize> = CameraId::ALL.iter().map(|&c| (c, 0)).collect();
        for r in &self.records {
            *counts.entry(r.camera).or_insert(0) += 1;
        }
        counts
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self, DatasetError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(found) = value.get("format_version").and_then(|v| v.as_u64()) {
            if found != u64::from(MANIFEST_FORMAT_VERSION) {
                return Err(DatasetError::SchemaVersion {
                    found: found as u32,
                    expected: MANIFEST_FORMAT_VERSION,
                });
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json_string()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

/// Result of parsing one label file.
#[derive(Debug, Clone)]
pub struct ParsedLabels {
    pub record: AnnotationRecord,
    pub warnings: Vec<DatasetWarning>,
}

/// Parse YOLO-style label text: one `class cx cy w h` line per instance.
/// Blank lines are skipped; line order is preserved. Boxes overrunning the
/// unit frame are clamped with a warning; degenerate boxes are an error.
pub fn parse_label_file(
    text: &str,
    image_id: &str,
    camera: CameraId,
    class_count: usize,
) -> Result<ParsedLabels, DatasetError> {
    let mut instances = Vec::new();
    let mut warnings = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(DatasetError::MalformedLine {
                line,
                reason: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let class_id: u32 = fields[0].parse().map_err(|_| DatasetError::MalformedLine {
            line,
            reason: format!("bad class id '{}'", fields[0]),
        })?;
        if class_id as usize >= class_count {
            return Err(DatasetError::ClassOutOfRange {
                line,
                class_id,
                class_count,
            });
        }
        let mut nums = [0.0f64; 4];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            *slot = field.parse().map_err(|_| DatasetError::MalformedLine {
                line,
                reason: format!("bad float '{field}'"),
            })?;
        }
        let (bbox, clamped) = BBox::new_clamped(nums[0], nums[1], nums[2], nums[3])
            .map_err(|source| DatasetError::InvalidBox { line, source })?;
        if clamped {
            warnings.push(DatasetWarning::ClampedBox {
                image_id: image_id.to_string(),
                line,
            });
        }
        instances.push(GroundTruthInstance { class_id, bbox });
    }
    Ok(ParsedLabels {
        record: AnnotationRecord {
            image_id: image_id.to_string(),
            camera,
            image_path: String::new(),
            instances,
        },
        warnings,
    })
}

/// Render a record back to label-file text. Floats use the shortest form
/// that round-trips, so `parse_label_file(write_label_file(r)) == r`.
pub fn write_label_file(record: &AnnotationRecord) -> String {
    let mut out = String::new();
    for inst in &record.instances {
        let b = &inst.bbox;
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            inst.class_id,
            b.cx(),
            b.cy(),
            b.w(),
            b.h()
        ));
    }
    out
}

/// A freshly scanned manifest plus everything non-fatal found on the way.
#[derive(Debug, Clone)]
pub struct ManifestBuild {
    pub manifest: DatasetManifest,
    pub warnings: Vec<DatasetWarning>,
}

/// Scan `root/images/<camera>/` and `root/labels/<camera>/` into a manifest.
/// One record per image; images without a label file get an empty instance
/// list and a warning.
pub fn build_manifest(root: &Path) -> Result<ManifestBuild, DatasetError> {
    build_manifest_with(root, default_class_names())
}

pub fn build_manifest_with(
    root: &Path,
    class_names: Vec<String>,
) -> Result<ManifestBuild, DatasetError> {
    const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let class_count = class_names.len();
    let mut warnings = Vec::new();

    if !images_dir.is_dir() {
        warnings.push(DatasetWarning::NoImagesDir {
            root: root.display().to_string(),
        });
        return Ok(ManifestBuild {
            manifest: DatasetManifest::empty(class_names),
            warnings,
        });
    }

    let mut camera_dirs = Vec::new();
    for entry in read_dir_sorted(&images_dir)? {
        let name = entry
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if !entry.is_dir() {
            continue;
        }
        let camera = CameraId::from_str(&name)?;
        camera_dirs.push((camera, entry));
    }
    camera_dirs.sort_by_key(|(camera, _)| *camera);

    let mut records = Vec::new();
    for (camera, dir) in camera_dirs {
        let mut stems: BTreeMap<String, String> = BTreeMap::new();
        for file in read_dir_sorted(&dir)? {
            let Some(ext) = file.extension().and_then(|e| e.to_str()) else {
                continue;
            };
            if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
                continue;
            }
            let stem = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let rel_path = format!(
                "images/{}/{}",
                camera.dir_name(),
                file.file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
            );
            if stems.insert(stem.clone(), rel_path).is_some() {
                return Err(DatasetError::DuplicateStem { camera, stem });
            }
        }

        for (stem, rel_path) in &stems {
            let image_id = format!("{}/{}", camera.dir_name(), stem);
            let label_path = labels_dir
                .join(camera.dir_name())
                .join(format!("{stem}.txt"));
            if label_path.is_file() {
                let text = fs::read_to_string(&label_path).map_err(|source| DatasetError::Io {
                    path: label_path.display().to_string(),
                    source,
                })?;
                let parsed =
                    parse_label_file(&text, &image_id, camera, class_count).map_err(|source| {
                        DatasetError::InFile {
                            path: label_path.display().to_string(),
                            source: Box::new(source),
                        }
                    })?;
                warnings.extend(parsed.warnings);
                let mut record = parsed.record;
                record.image_path = rel_path.clone();
                records.push(record);
            } else {
                warnings.push(DatasetWarning::MissingLabelFile {
                    image_id: image_id.clone(),
                });
                records.push(AnnotationRecord {
                    image_id,
                    camera,
                    image_path: rel_path.clone(),
                    instances: Vec::new(),
                });
            }
        }

        // labels with no matching image are worth flagging
        let label_cam_dir = labels_dir.join(camera.dir_name());
        if label_cam_dir.is_dir() {
            for file in read_dir_sorted(&label_cam_dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let stem = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                if !stems.contains_key(&stem) {
                    warnings.push(DatasetWarning::OrphanLabelFile { camera, stem });
                }
            }
        }
    }

    let manifest = DatasetManifest::new(records, class_names, SplitTag::Unsplit)?;
    Ok(ManifestBuild { manifest, warnings })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>, DatasetError> {
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        paths.push(entry.path());
    }
    paths.sort();
    Ok(paths)
}

/// The three split outputs of [`stratified_split`].
#[derive(Debug, Clone)]
pub struct SplitManifests {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Split per camera: `floor(n*train)` / `floor(n*val)` / remainder, shuffled
/// with a seeded portable generator. Records are ordered by image id before
/// shuffling, so membership depends only on the seed and the stratum
/// contents, never on input order.
pub fn stratified_split(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifests, DatasetError> {
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(r_train, r_val, r_test));
    }

    let mut strata: BTreeMap<CameraId, Vec<AnnotationRecord>> = BTreeMap::new();
    for record in manifest.records() {
        strata
            .entry(record.camera)
            .or_default()
            .push(record.clone());
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (stream_idx, (&camera, records)) in strata.iter_mut().enumerate() {
        let n = records.len();
        if n < 3 {
            return Err(DatasetError::StratumTooSmall { camera, count: n });
        }
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_idx as u64);
        records.shuffle(&mut rng);

        let n_train = ((n as f64) * r_train + RATIO_EPSILON).floor() as usize;
        let n_val = ((n as f64) * r_val + RATIO_EPSILON).floor() as usize;
        for (i, record) in records.drain(..).enumerate() {
            if i < n_train {
                train.push(record);
            } else if i < n_train + n_val {
                val.push(record);
            } else {
                test.push(record);
            }
        }
    }

    let class_names = manifest.class_names().to_vec();
    let mk = |records: Vec<AnnotationRecord>, tag: SplitTag| {
        DatasetManifest::new(records, class_names.clone(), tag)
    };
    Ok(SplitManifests {
        train: mk(train, SplitTag::Train)?,
        val: mk(val, SplitTag::Val)?,
        test: mk(test, SplitTag::Test)?,
    })
}

/// Report-only problems found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValidationIssue {
    DuplicateImageId { image_id: String },
    MissingImage { image_id: String, path: String },
    ClassOutOfRange { image_id: String, class_id: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub record_count: usize,
    pub per_camera_counts: BTreeMap<CameraId, usize>,
    /// Per camera, instance count per class index.
    pub class_histograms: BTreeMap<CameraId, Vec<usize>>,
    pub empty_label_records: usize,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Inspect a manifest and report duplicate ids, missing image files (when
/// `root` is given), empty-label counts, and per-camera class histograms.
/// Never fails; everything is reported.
pub fn validate(manifest: &DatasetManifest, root: Option<&Path>) -> ValidationReport {
    let class_count = manifest.class_names().len();
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    let mut histograms: BTreeMap<CameraId, Vec<usize>> = CameraId::ALL
        .iter()
        .map(|&c| (c, vec![0usize; class_count]))
        .collect();
    let mut empty_label_records = 0;

    for record in manifest.records() {
        if !seen.insert(record.image_id.clone()) {
            issues.push(ValidationIssue::DuplicateImageId {
                image_id: record.image_id.clone(),
            });
        }
        if record.instances.is_empty() {
            empty_label_records += 1;
        }
        for inst in &record.instances {
            if (inst.class_id as usize) < class_count {
                histograms
                    .get_mut(&record.camera)
                    .expect("all cameras present")[inst.class_id as usize] += 1;
            } else {
                issues.push(ValidationIssue::ClassOutOfRange {
                    image_id: record.image_id.clone(),
                    class_id: inst.class_id,
                });
            }
        }
        if let Some(root) = root {
            if !record.image_path.is_empty() && !root.join(&record.image_path).is_file() {
                issues.push(ValidationIssue::MissingImage {
                    image_id: record.image_id.clone(),
                    path: record.image_path.clone(),
                });
            }
        }
    }

    ValidationReport {
        record_count: manifest.len(),
        per_camera_counts: manifest.camera_counts(),
        class_histograms: histograms,
        empty_label_records,
        issues,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_empty_label_file() {
        let parsed = parse_label_file("", "top/x", CameraId::Top, 2).unwrap();
        assert!(parsed.record.instances.is_empty());
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn parse_single_line() {
        let parsed = parse_label_file("0 0.5 0.5 0.1 0.1", "top/x", CameraId::Top, 2).unwrap();
        assert_eq!(parsed.record.instances.len(), 1);
        let inst = &parsed.record.instances[0];
        assert_eq!(inst.class_id, 0);
        assert_eq!(inst.bbox.cx(), 0.5);
        assert_eq!(inst.bbox.w(), 0.1);
    }

    #[test]
    fn parse_two_lines_preserves_order() {
        let text = "1 0.2 0.3 0.05 0.08\n0 0.7 0.7 0.1 0.1";
        let parsed = parse_label_file(text, "top/x", CameraId::Top, 2).unwrap();
        assert_eq!(parsed.record.instances.len(), 2);
        assert_eq!(parsed.record.instances[0].class_id, 1);
        assert_eq!(parsed.record.instances[1].class_id, 0);
    }

    #[test]
    fn write_then_parse_is_identity() {
        let text = "1 0.2 0.3 0.05 0.08\n0 0.7 0.7 0.1 0.1";
        let first = parse_label_file(text, "top/x", CameraId::Top, 2).unwrap();
        let rewritten = write_label_file(&first.record);
        let second = parse_label_file(&rewritten, "top/x", CameraId::Top, 2).unwrap();
        assert_eq!(first.record, second.record);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err =
            parse_label_file("0 0.5 0.5 0.1 0.1\n0 0.5 0.5", "i", CameraId::Top, 2).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { line: 2, .. }));

        let err = parse_label_file("7 0.5 0.5 0.1 0.1", "i", CameraId::Top, 2).unwrap_err();
        assert!(matches!(
            err,
            DatasetError::ClassOutOfRange {
                line: 1,
                class_id: 7,
                ..
            }
        ));

        let err = parse_label_file("0 0.5 0.5 0 0.1", "i", CameraId::Top, 2).unwrap_err();
        assert!(matches!(err, DatasetError::InvalidBox { line: 1, .. }));
    }

    #[test]
    fn parse_clamps_overruns_with_warning() {
        let parsed = parse_label_file("0 0.98 0.5 0.1 0.1", "i", CameraId::Top, 2).unwrap();
        assert_eq!(
            parsed.warnings,
            vec![DatasetWarning::ClampedBox {
                image_id: "i".to_string(),
                line: 1
            }]
        );
        let (_, _, x1, _) = parsed.record.instances[0].bbox.corners();
        assert!(x1 <= 1.0);
    }

    fn synthetic_manifest(per_camera: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for camera in CameraId::ALL {
            for i in 0..per_camera {
                records.push(AnnotationRecord {
                    image_id: format!("{}/{:04}", camera.dir_name(), i),
                    camera,
                    image_path: String::new(),
                    instances: Vec::new(),
                });
            }
        }
        DatasetManifest::new(records, default_class_names(), SplitTag::Unsplit).unwrap()
    }

    #[test]
    fn split_200_per_camera_gives_140_30_30() {
        let manifest = synthetic_manifest(200);
        let splits = stratified_split(&manifest, (0.70, 0.15, 0.15), 42).unwrap();
        for counts in [
            splits.train.camera_counts(),
            splits.val.camera_counts(),
            splits.test.camera_counts(),
        ] {
            assert_eq!(counts.len(), 3);
        }
        assert!(splits.train.camera_counts().values().all(|&n| n == 140));
        assert!(splits.val.camera_counts().values().all(|&n| n == 30));
        assert!(splits.test.camera_counts().values().all(|&n| n == 30));
    }

    #[test]
    fn split_ten_records_one_camera_is_7_1_2() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(AnnotationRecord {
                image_id: format!("top/{i:02}"),
                camera: CameraId::Top,
                image_path: String::new(),
                instances: Vec::new(),
            });
        }
        let manifest =
            DatasetManifest::new(records, default_class_names(), SplitTag::Unsplit).unwrap();
        let splits = stratified_split(&manifest, (0.70, 0.15, 0.15), 7).unwrap();
        assert_eq!(splits.train.len(), 7);
        assert_eq!(splits.val.len(), 1);
        assert_eq!(splits.test.len(), 2);
    }

    #[test]
    fn split_is_deterministic_for_fixed_seed() {
        let manifest = synthetic_manifest(20);
        let a = stratified_split(&manifest, (0.70, 0.15, 0.15), 99).unwrap();
        let b = stratified_split(&manifest, (0.70, 0.15, 0.15), 99).unwrap();
        assert_eq!(a.train.to_json_string(), b.train.to_json_string());
        assert_eq!(a.val.to_json_string(), b.val.to_json_string());
        assert_eq!(a.test.to_json_string(), b.test.to_json_string());
    }

    #[test]
    fn split_membership_ignores_input_order() {
        let manifest = synthetic_manifest(10);
        let mut reversed: Vec<_> = manifest.records().to_vec();
        reversed.reverse();
        let shuffled =
            DatasetManifest::new(reversed, default_class_names(), SplitTag::Unsplit).unwrap();
        let a = stratified_split(&manifest, (0.70, 0.15, 0.15), 5).unwrap();
        let b = stratified_split(&shuffled, (0.70, 0.15, 0.15), 5).unwrap();
        assert_eq!(a.train.to_json_string(), b.train.to_json_string());
    }

    #[test]
    fn split_rejects_bad_ratios_and_small_strata() {
        let manifest = synthetic_manifest(10);
        assert!(matches!(
            stratified_split(&manifest, (0.5, 0.2, 0.2), 1),
            Err(DatasetError::InvalidRatios(..))
        ));
        let small = synthetic_manifest(2);
        assert!(matches!(
            stratified_split(&small, (0.70, 0.15, 0.15), 1),
            Err(DatasetError::StratumTooSmall { count: 2, .. })
        ));
    }

    #[test]
    fn split_error_names_the_short_stratum() {
        // top and bottom are fine; middle has only two records
        let mut records = Vec::new();
        for camera in [CameraId::Top, CameraId::Bottom] {
            for i in 0..10 {
                records.push(AnnotationRecord {
                    image_id: format!("{}/{i:02}", camera.dir_name()),
                    camera,
                    image_path: String::new(),
                    instances: Vec::new(),
                });
            }
        }
        for i in 0..2 {
            records.push(AnnotationRecord {
                image_id: format!("middle/{i:02}"),
                camera: CameraId::Middle,
                image_path: String::new(),
                instances: Vec::new(),
            });
        }
        let manifest =
            DatasetManifest::new(records, default_class_names(), SplitTag::Unsplit).unwrap();
        let err = stratified_split(&manifest, (0.70, 0.15, 0.15), 1).unwrap_err();
        assert!(matches!(
            err,
            DatasetError::StratumTooSmall {
                camera: CameraId::Middle,
                count: 2
            }
        ));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let record = AnnotationRecord {
            image_id: "top/a".to_string(),
            camera: CameraId::Top,
            image_path: String::new(),
            instances: Vec::new(),
        };
        let result = DatasetManifest::new(
            vec![record.clone(), record],
            default_class_names(),
            SplitTag::Unsplit,
        );
        assert!(matches!(result, Err(DatasetError::DuplicateImageId { .. })));
    }

    #[test]
    fn manifest_json_round_trip_and_version_check() {
        let manifest = synthetic_manifest(3);
        let text = manifest.to_json_string();
        let back = DatasetManifest::from_json_str(&text).unwrap();
        assert_eq!(manifest, back);

        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 99");
        let err = DatasetManifest::from_json_str(&bumped).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn build_manifest_empty_root_warns() {
        let dir = tempfile::tempdir().unwrap();
        let build = build_manifest(dir.path()).unwrap();
        assert!(build.manifest.is_empty());
        assert!(matches!(
            build.warnings.as_slice(),
            [DatasetWarning::NoImagesDir { .. }]
        ));
    }

    fn touch_dataset(root: &std::path::Path, counts: [usize; 3]) {
        for (camera, &n) in CameraId::ALL.iter().zip(&counts) {
            let images = root.join("images").join(camera.dir_name());
            let labels = root.join("labels").join(camera.dir_name());
            fs::create_dir_all(&images).unwrap();
            fs::create_dir_all(&labels).unwrap();
            for i in 0..n {
                fs::write(images.join(format!("img{i}.jpg")), b"").unwrap();
                fs::write(labels.join(format!("img{i}.txt")), "0 0.5 0.5 0.1 0.1\n").unwrap();
            }
        }
    }

    #[test]
    fn build_manifest_counts_per_camera() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), [3, 2, 1]);
        let build = build_manifest(dir.path()).unwrap();
        let counts = build.manifest.camera_counts();
        assert_eq!(counts[&CameraId::Top], 3);
        assert_eq!(counts[&CameraId::Middle], 2);
        assert_eq!(counts[&CameraId::Bottom], 1);
        assert!(build.warnings.is_empty());
        // image ids carry the camera prefix and relative paths resolve
        let record = &build.manifest.records()[0];
        assert!(record.image_id.starts_with("top/"));
        assert!(dir.path().join(&record.image_path).is_file());
    }

    #[test]
    fn build_manifest_warns_on_missing_and_orphan_labels() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), [2, 1, 1]);
        fs::remove_file(dir.path().join("labels/top/img0.txt")).unwrap();
        fs::write(dir.path().join("labels/top/ghost.txt"), "").unwrap();
        let build = build_manifest(dir.path()).unwrap();
        assert!(build.warnings.contains(&DatasetWarning::MissingLabelFile {
            image_id: "top/img0".to_string()
        }));
        assert!(build.warnings.contains(&DatasetWarning::OrphanLabelFile {
            camera: CameraId::Top,
            stem: "ghost".to_string()
        }));
        let unlabeled = build
            .manifest
            .records()
            .iter()
            .find(|r| r.image_id == "top/img0")
            .unwrap();
        assert!(unlabeled.instances.is_empty());
    }

    #[test]
    fn build_manifest_rejects_unknown_camera_and_duplicate_stems() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), [1, 1, 1]);
        fs::create_dir_all(dir.path().join("images/sideways")).unwrap();
        assert!(matches!(
            build_manifest(dir.path()),
            Err(DatasetError::UnknownCameraDir { .. })
        ));
        fs::remove_dir(dir.path().join("images/sideways")).unwrap();

        fs::write(dir.path().join("images/top/img0.png"), b"").unwrap();
        assert!(matches!(
            build_manifest(dir.path()),
            Err(DatasetError::DuplicateStem { .. })
        ));
    }

    #[test]
    fn validate_flags_missing_image_files() {
        let dir = tempfile::tempdir().unwrap();
        touch_dataset(dir.path(), [2, 1, 1]);
        let build = build_manifest(dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/top/img1.jpg")).unwrap();
        let report = validate(&build.manifest, Some(dir.path()));
        assert_eq!(
            report.issues,
            vec![ValidationIssue::MissingImage {
                image_id: "top/img1".to_string(),
                path: "images/top/img1.jpg".to_string(),
            }]
        );
    }

    #[test]
    fn validate_reports_empty_labels_and_histograms() {
        let records = vec![
            AnnotationRecord {
                image_id: "top/a".into(),
                camera: CameraId::Top,
                image_path: String::new(),
                instances: vec![
                    GroundTruthInstance {
                        class_id: 0,
                        bbox: BBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
                    },
                    GroundTruthInstance {
                        class_id: 1,
                        bbox: BBox::new(0.2, 0.2, 0.1, 0.1).unwrap(),
                    },
                ],
            },
            AnnotationRecord {
                image_id: "top/b".into(),
                camera: CameraId::Top,
                image_path: String::new(),
                instances: Vec::new(),
            },
        ];
        let manifest =
            DatasetManifest::new(records, default_class_names(), SplitTag::Unsplit).unwrap();
        let report = validate(&manifest, None);
        assert!(report.is_clean());
        assert_eq!(report.empty_label_records, 1);
        assert_eq!(report.class_histograms[&CameraId::Top], vec![1, 1]);
        assert_eq!(report.per_camera_counts[&CameraId::Top], 2);
        assert_eq!(report.per_camera_counts[&CameraId::Middle], 0);
    }
}
