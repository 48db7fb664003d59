//! Three-stream synchronization: per-camera detection events are gathered
//! into one bundle per assembly, emitted exactly once — when every camera
//! has reported, or at timeout with the missing slots marked.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::dataset::CameraId;
use crate::detector::Detection;

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("duplicate event for ({camera}, {assembly_id}); bundle poisoned")]
    DuplicateEvent {
        camera: CameraId,
        assembly_id: String,
    },
    #[error("event for already-emitted assembly '{assembly_id}' ignored")]
    StaleEvent { assembly_id: String },
}

/// One camera's detections for one assembly, stamped with arrival time.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub camera: CameraId,
    pub assembly_id: String,
    pub detections: Vec<Detection>,
    pub timestamp_ms: u64,
}

/// Gathered per-assembly detections. Emitted exactly once per assembly id:
/// `complete` when all three cameras reported, `timed_out` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub assembly_id: String,
    pub slots: BTreeMap<CameraId, Vec<Detection>>,
    pub first_arrival_ms: u64,
    pub complete: bool,
    pub timed_out: bool,
    /// Set when a duplicate (camera, assembly) event hit this bundle.
    pub poisoned: bool,
}

impl FrameBundle {
    pub fn missing_cameras(&self) -> BTreeSet<CameraId> {
        CameraId::ALL
            .iter()
            .copied()
            .filter(|c| !self.slots.contains_key(c))
            .collect()
    }
}

#[derive(Debug)]
struct PendingBundle {
    slots: BTreeMap<CameraId, Vec<Detection>>,
    first_arrival_ms: u64,
    poisoned: bool,
}

/// The only stateful pipeline component. Single-threaded by contract;
/// producers hand events over a channel or call sites that serialize access.
#[derive(Debug)]
pub struct Synchronizer {
    timeout_ms: Option<u64>,
    pending: BTreeMap<String, PendingBundle>,
    emitted: BTreeSet<String>,
}

impl Synchronizer {
    /// `timeout_ms = None` waits forever (bundles only leave via
    /// completion or [`Synchronizer::flush`]).
    pub fn new(timeout_ms: Option<u64>) -> Self {
        Synchronizer {
            timeout_ms,
            pending: BTreeMap::new(),
            emitted: BTreeSet::new(),
        }
    }

    /// Feed one event. Returns the completed bundle when this event fills
    /// the last slot. Duplicate (camera, assembly) events poison the bundle
    /// and error; events for already-emitted assemblies error and are
    /// dropped.
    pub fn offer(&mut self, event: DetectionEvent) -> Result<Option<FrameBundle>, SyncError> {
        if self.emitted.contains(&event.assembly_id) {
            return Err(SyncError::StaleEvent {
                assembly_id: event.assembly_id,
            });
        }
        let pending = self
            .pending
            .entry(event.assembly_id.clone())
            .or_insert_with(|| PendingBundle {
                slots: BTreeMap::new(),
                first_arrival_ms: event.timestamp_ms,
                poisoned: false,
            });
        if pending.slots.contains_key(&event.camera) {
            pending.poisoned = true;
            return Err(SyncError::DuplicateEvent {
                camera: event.camera,
                assembly_id: event.assembly_id,
            });
        }
        pending.slots.insert(event.camera, event.detections);
        if pending.slots.len() == CameraId::ALL.len() {
            let bundle = self.emit(&event.assembly_id, true, false);
            return Ok(Some(bundle));
        }
        Ok(None)
    }

    /// Emit every pending bundle whose timeout has strictly expired at
    /// `now_ms`, in first-arrival order.
    pub fn advance(&mut self, now_ms: u64) -> Vec<FrameBundle> {
        let Some(timeout) = self.timeout_ms else {
            return Vec::new();
        };
        let mut due: Vec<(u64, String)> = self
            .pending
            .iter()
            .filter(|(_, p)| now_ms > p.first_arrival_ms.saturating_add(timeout))
            .map(|(id, p)| (p.first_arrival_ms, id.clone()))
            .collect();
        due.sort();
        due.into_iter()
            .map(|(_, id)| self.emit(&id, false, true))
            .collect()
    }

    /// End of stream: emit everything still pending, in first-arrival
    /// order, marked timed out.
    pub fn flush(&mut self) -> Vec<FrameBundle> {
        let mut remaining: Vec<(u64, String)> = self
            .pending
            .iter()
            .map(|(id, p)| (p.first_arrival_ms, id.clone()))
            .collect();
        remaining.sort();
        remaining
            .into_iter()
            .map(|(_, id)| self.emit(&id, false, true))
            .collect()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    fn emit(&mut self, assembly_id: &str, complete: bool, timed_out: bool) -> FrameBundle {
        let pending = self
            .pending
            .remove(assembly_id)
            .expect("emit only called for pending assemblies");
        self.emitted.insert(assembly_id.to_string());
        FrameBundle {
            assembly_id: assembly_id.to_string(),
            slots: pending.slots,
            first_arrival_ms: pending.first_arrival_ms,
            complete,
            timed_out,
            poisoned: pending.poisoned,
        }
    }
}
