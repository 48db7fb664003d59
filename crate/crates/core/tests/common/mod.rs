//! Shared helpers for the integration suites: independent oracles and
//! harness builders. The oracles deliberately avoid the library's own
//! computation paths.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use triview_core::dataset::CameraId;
use triview_core::evaluation::PooledDetection;
use triview_core::fusion::{Component, ComponentRegistry, ViewEntry};
use triview_core::geometry::BBox;

/// Rasterization IoU oracle: counts grid-cell centers inside each box on an
/// `n x n` grid, scanline by scanline, with open interval membership so an
/// edge-touching pair rasterizes to zero overlap. Integer counting only; no
/// shared code with `BBox::iou`.
pub fn raster_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();

    let a_cols = column_range(ax0, ax1, n);
    let b_cols = column_range(bx0, bx1, n);
    let inter_cols = overlap(a_cols, b_cols);

    let mut inter_cells: u64 = 0;
    let mut union_cells: u64 = 0;
    for row in 0..n {
        let y = (row as f64 + 0.5) / n as f64;
        let in_a = ay0 < y && y < ay1;
        let in_b = by0 < y && y < by1;
        let a_count = if in_a { span(a_cols) } else { 0 };
        let b_count = if in_b { span(b_cols) } else { 0 };
        let i_count = if in_a && in_b { span(inter_cols) } else { 0 };
        inter_cells += i_count;
        union_cells += a_count + b_count - i_count;
    }
    if union_cells == 0 {
        0.0
    } else {
        inter_cells as f64 / union_cells as f64
    }
}

/// Index range `[start, end)` of grid columns whose centers fall strictly
/// inside `(lo, hi)`. Boundary indices are found by direct predicate
/// checks, so float rounding in the seed estimate cannot shift the count.
fn column_range(lo: f64, hi: f64, n: usize) -> (i64, i64) {
    let center = |i: i64| (i as f64 + 0.5) / n as f64;
    // first index with center > lo
    let mut start = ((lo * n as f64) - 0.5).floor() as i64 - 2;
    while center(start) <= lo {
        start += 1;
    }
    // first index with center >= hi
    let mut end = ((hi * n as f64) - 0.5).ceil() as i64 - 2;
    while center(end) < hi {
        end += 1;
    }
    (start.clamp(0, n as i64), end.clamp(0, n as i64))
}

fn overlap(a: (i64, i64), b: (i64, i64)) -> (i64, i64) {
    (a.0.max(b.0), a.1.min(b.1))
}

fn span(range: (i64, i64)) -> u64 {
    (range.1 - range.0).max(0) as u64
}

/// Brute-force 101-point AP oracle. Rebuilds the ranked curve from raw
/// pooled detections with its own sort and cumulative sums, then samples
/// the anchored envelope by scanning every point at every sample.
pub fn oracle_ap(pooled: &[PooledDetection], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let mut sorted: Vec<PooledDetection> = pooled.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    for (rank0, det) in sorted.iter().enumerate() {
        if det.is_tp {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (rank0 + 1) as f64));
    }
    if points.is_empty() {
        return Some(0.0);
    }
    let any_recall = points.iter().any(|&(r, _)| r > 0.0);

    let mut sum = 0.0;
    for k in 0..=100u32 {
        let sample = f64::from(k) / 100.0;
        let mut best = 0.0f64;
        if any_recall && sample == 0.0 {
            best = 1.0; // envelope anchor at (recall 0, precision 1)
        }
        for &(recall, precision) in &points {
            if recall >= sample && precision > best {
                best = precision;
            }
        }
        sum += best;
    }
    Some(sum / 101.0)
}

/// Random in-frame box with sides in `[0.02, max_side]`.
pub fn random_bbox(rng: &mut ChaCha8Rng, max_side: f64) -> BBox {
    let w = rng.random_range(0.02..max_side);
    let h = rng.random_range(0.02..max_side);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BBox::new(cx, cy, w, h).expect("random box is in frame")
}

/// Registry with `component_ids` all visible in every camera, ROIs laid out
/// on a horizontal strip.
pub fn strip_registry(component_ids: &[&str]) -> ComponentRegistry {
    let count = component_ids.len();
    let components = component_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let cx = (i as f64 + 1.0) / (count as f64 + 1.0);
            Component {
                component_id: id.to_string(),
                views: CameraId::ALL
                    .iter()
                    .map(|&camera| {
                        (
                            camera,
                            ViewEntry {
                                roi: BBox::new(cx, 0.5, 0.15, 0.15).unwrap(),
                                visible: true,
                            },
                        )
                    })
                    .collect(),
            }
        })
        .collect();
    ComponentRegistry::new(components).expect("strip registry is valid")
}

/// Write `detections/<camera>/<stem>.txt` files under `root` from
/// `(stem, camera, lines)` triples.
pub fn write_detection_files(root: &Path, files: &[(String, CameraId, String)]) {
    for (stem, camera, content) in files {
        let dir = root.join(camera.dir_name());
        fs::create_dir_all(&dir).expect("create camera dir");
        fs::write(dir.join(format!("{stem}.txt")), content).expect("write detection file");
    }
}

/// Per-camera stems actually present under a detections root.
pub fn stems_on_disk(root: &Path) -> BTreeMap<CameraId, Vec<String>> {
    let mut map = BTreeMap::new();
    for camera in CameraId::ALL {
        let dir = root.join(camera.dir_name());
        let mut stems = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(&dir).expect("read camera dir") {
                let path = entry.expect("dir entry").path();
                if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                    stems.push(path.file_stem().unwrap().to_str().unwrap().to_string());
                }
            }
        }
        stems.sort();
        map.insert(camera, stems);
    }
    map
}
