//! The executable surface: batch and stream runs over detection files, the
//! JSON-lines verdict log, and a line-delimited socket mode for live feeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_manifest_with, default_class_names, CameraId, DatasetError};
use crate::detector::{parse_detection_file, Detection, DetectorError};
use crate::evaluation::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::fusion::{
    assembly_verdict, associate, AssemblyVerdict, ComponentRegistry, FusionError, FusionPolicy,
    DEFAULT_ASSOC_IOU,
};
use crate::geometry::BBox;

use super::latency::{latency_report, LatencySummary, StageTimings};
use super::sync::{DetectionEvent, FrameBundle, SyncError, Synchronizer};

pub const VERDICT_LOG_FORMAT_VERSION: u32 = 1;

/// Default end-to-end budget for the non-detector path, in milliseconds.
pub const DEFAULT_LATENCY_BUDGET_MS: f64 = 9.0;

pub const DEFAULT_TIMEOUT_MS: u64 = 500;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("verdict log format version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("record JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub policy: FusionPolicy,
    pub assoc_iou: f64,
}

/// One line of the append-only verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VerdictLogRecord {
    Header(LogHeader),
    Verdict(AssemblyVerdict),
    Poisoned { assembly_id: String, detail: String },
}

/// Parsed verdict log: the header plus every following record.
#[derive(Debug, Clone)]
pub struct VerdictLog {
    pub header: LogHeader,
    pub records: Vec<VerdictLogRecord>,
}

impl VerdictLog {
    pub fn verdicts(&self) -> impl Iterator<Item = &AssemblyVerdict> {
        self.records.iter().filter_map(|r| match r {
            VerdictLogRecord::Verdict(v) => Some(v),
            _ => None,
        })
    }
}

pub fn read_verdict_log(path: &Path) -> Result<VerdictLog, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines
        .next()
        .ok_or_else(|| PipelineError::Config(format!("{} is empty", path.display())))?;
    let header = match serde_json::from_str::<VerdictLogRecord>(first)? {
        VerdictLogRecord::Header(h) => h,
        _ => {
            return Err(PipelineError::Config(format!(
                "{} does not start with a header record",
                path.display()
            )))
        }
    };
    if header.format_version != VERDICT_LOG_FORMAT_VERSION {
        return Err(PipelineError::SchemaVersion {
            found: header.format_version,
            expected: VERDICT_LOG_FORMAT_VERSION,
        });
    }
    let mut records = Vec::new();
    for line in lines {
        records.push(serde_json::from_str(line)?);
    }
    Ok(VerdictLog { header, records })
}

/// Wire form of one camera event on the socket interface, one JSON object
/// per line. `timestamp_ms` is optional; absent timestamps fall back to the
/// event sequence number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireEvent {
    pub camera: CameraId,
    pub assembly_id: String,
    #[serde(default)]
    pub timestamp_ms: Option<u64>,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireDetection {
    pub class_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl WireEvent {
    pub fn into_event(self, fallback_ts: u64) -> DetectionEvent {
        let image_id = format!("{}/{}", self.camera.dir_name(), self.assembly_id);
        let detections = self
            .detections
            .into_iter()
            .map(|d| Detection {
                bbox: d.bbox,
                class_id: d.class_id,
                confidence: d.confidence,
                camera: self.camera,
                image_id: image_id.clone(),
            })
            .collect();
        DetectionEvent {
            camera: self.camera,
            assembly_id: self.assembly_id,
            detections,
            timestamp_ms: self.timestamp_ms.unwrap_or(fallback_ts),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Batch,
    Stream,
}

/// Everything a run needs. Serializable so it can live in a config file;
/// CLI flags override individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub detections_dir: PathBuf,
    pub registry_path: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_policy")]
    pub policy: FusionPolicy,
    #[serde(default = "default_assoc_iou")]
    pub assoc_iou: f64,
    /// Stream mode: bundle timeout in (logical) milliseconds. `None` waits
    /// forever.
    #[serde(default = "default_timeout")]
    pub timeout_ms: Option<u64>,
    /// Batch mode: evaluate detections against the labels under this
    /// dataset root and write `report.json`.
    #[serde(default)]
    pub dataset_root: Option<PathBuf>,
    #[serde(default = "default_budget")]
    pub latency_budget_ms: f64,
    #[serde(default = "default_class_names")]
    pub class_names: Vec<String>,
}

fn default_policy() -> FusionPolicy {
    FusionPolicy::DefectPriority
}

fn default_assoc_iou() -> f64 {
    DEFAULT_ASSOC_IOU
}

fn default_timeout() -> Option<u64> {
    Some(DEFAULT_TIMEOUT_MS)
}

fn default_budget() -> f64 {
    DEFAULT_LATENCY_BUDGET_MS
}

impl RunConfig {
    pub fn new(detections_dir: PathBuf, registry_path: PathBuf, out_dir: PathBuf) -> Self {
        RunConfig {
            mode: RunMode::Batch,
            detections_dir,
            registry_path,
            out_dir,
            policy: default_policy(),
            assoc_iou: default_assoc_iou(),
            timeout_ms: default_timeout(),
            dataset_root: None,
            latency_budget_ms: default_budget(),
            class_names: default_class_names(),
        }
    }
}

/// Files and summaries a run produced.
#[derive(Debug)]
pub struct RunArtifacts {
    pub verdict_log: PathBuf,
    pub verdict_count: usize,
    pub poisoned_count: usize,
    pub protocol_errors: Vec<String>,
    pub report: Option<EvalReport>,
    pub report_path: Option<PathBuf>,
    pub latency: Option<LatencySummary>,
    pub latency_path: Option<PathBuf>,
}

/// Stems (assembly ids) that have a detection file, per camera.
pub fn scan_detection_stems(
    detections_dir: &Path,
) -> Result<BTreeMap<CameraId, BTreeSet<String>>, PipelineError> {
    if !detections_dir.is_dir() {
        return Err(PipelineError::Config(format!(
            "detections directory {} does not exist",
            detections_dir.display()
        )));
    }
    let mut by_camera = BTreeMap::new();
    for camera in CameraId::ALL {
        let mut stems = BTreeSet::new();
        let dir = detections_dir.join(camera.dir_name());
        if dir.is_dir() {
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let path = entry.map_err(io_err(&dir))?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        stems.insert(stem.to_string());
                    }
                }
            }
        }
        by_camera.insert(camera, stems);
    }
    Ok(by_camera)
}

fn detection_file_path(detections_dir: &Path, camera: CameraId, stem: &str) -> PathBuf {
    detections_dir
        .join(camera.dir_name())
        .join(format!("{stem}.txt"))
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Run the pipeline per the config. Batch mode wires
/// parse -> associate -> fuse -> log per assembly; stream mode replays the
/// same files as interleaved per-camera events through the synchronizer.
pub fn run(config: &RunConfig) -> Result<RunArtifacts, PipelineError> {
    let registry = ComponentRegistry::load(&config.registry_path)?;
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    match config.mode {
        RunMode::Batch => batch_run(config, &registry),
        RunMode::Stream => stream_run(config, &registry),
    }
}

fn write_latency(
    out_dir: &Path,
    timings: &[StageTimings],
    budget_ms: f64,
) -> Result<(Option<LatencySummary>, Option<PathBuf>), PipelineError> {
    match latency_report(timings, budget_ms) {
        Some(summary) => {
            let path = out_dir.join("latency.json");
            let text =
                serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail");
            fs::write(&path, text).map_err(io_err(&path))?;
            Ok((Some(summary), Some(path)))
        }
        None => Ok((None, None)),
    }
}

fn batch_run(
    config: &RunConfig,
    registry: &ComponentRegistry,
) -> Result<RunArtifacts, PipelineError> {
    let stems_by_camera = scan_detection_stems(&config.detections_dir)?;
    let assemblies: BTreeSet<String> = stems_by_camera.values().flatten().cloned().collect();
    let class_count = config.class_names.len();

    let log_path = config.out_dir.join("verdicts.jsonl");
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut writer = BufWriter::new(file);
    let header = VerdictLogRecord::Header(LogHeader {
        format_version: VERDICT_LOG_FORMAT_VERSION,
        policy: config.policy,
        assoc_iou: config.assoc_iou,
    });
    writeln!(writer, "{}", serde_json::to_string(&header)?).map_err(io_err(&log_path))?;

    let keep_detections = config.dataset_root.is_some();
    let mut all_detections: Vec<Detection> = Vec::new();
    let mut timings = Vec::with_capacity(assemblies.len());
    let mut verdict_count = 0usize;

    for assembly in &assemblies {
        let mut detect_ms = 0.0;
        let mut slots: Vec<(CameraId, Vec<Detection>)> = Vec::new();
        let mut missing: BTreeSet<CameraId> = BTreeSet::new();
        for camera in CameraId::ALL {
            if stems_by_camera[&camera].contains(assembly) {
                let path = detection_file_path(&config.detections_dir, camera, assembly);
                let start = Instant::now();
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let image_id = format!("{}/{}", camera.dir_name(), assembly);
                let parsed = parse_detection_file(&text, &image_id, camera, class_count)?;
                detect_ms += elapsed_ms(start);
                slots.push((camera, parsed.detections));
            } else {
                missing.insert(camera);
            }
        }

        let start = Instant::now();
        let mut verdicts = Vec::new();
        for (camera, detections) in &slots {
            verdicts.extend(associate(detections, *camera, registry, config.assoc_iou)?.verdicts);
        }
        let associate_ms = elapsed_ms(start);

        let start = Instant::now();
        let verdict = assembly_verdict(assembly, &verdicts, registry, config.policy, &missing)?;
        let fuse_ms = elapsed_ms(start);

        let start = Instant::now();
        let record = VerdictLogRecord::Verdict(verdict);
        writeln!(writer, "{}", serde_json::to_string(&record)?).map_err(io_err(&log_path))?;
        let log_ms = elapsed_ms(start);

        timings.push(StageTimings::from_stages(
            detect_ms,
            associate_ms,
            fuse_ms,
            log_ms,
        ));
        verdict_count += 1;
        if keep_detections {
            for (_, detections) in slots {
                all_detections.extend(detections);
            }
        }
    }
    writer.flush().map_err(io_err(&log_path))?;

    let (report, report_path) = match &config.dataset_root {
        Some(root) => {
            let build = build_manifest_with(root, config.class_names.clone())?;
            let eval_config = EvalConfig::coco(config.class_names.clone());
            let report = evaluate(build.manifest.records(), &all_detections, &eval_config);
            let path = config.out_dir.join("report.json");
            report.save(&path)?;
            (Some(report), Some(path))
        }
        None => (None, None),
    };

    let (latency, latency_path) =
        write_latency(&config.out_dir, &timings, config.latency_budget_ms)?;
    Ok(RunArtifacts {
        verdict_log: log_path,
        verdict_count,
        poisoned_count: 0,
        protocol_errors: Vec::new(),
        report,
        report_path,
        latency,
        latency_path,
    })
}

fn stream_run(
    config: &RunConfig,
    registry: &ComponentRegistry,
) -> Result<RunArtifacts, PipelineError> {
    let stems_by_camera = scan_detection_stems(&config.detections_dir)?;
    let assemblies: BTreeSet<String> = stems_by_camera.values().flatten().cloned().collect();
    let class_count = config.class_names.len();

    let log_path = config.out_dir.join("verdicts.jsonl");
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let writer = BufWriter::new(file);
    let mut processor = StreamProcessor::new(
        registry.clone(),
        config.policy,
        config.assoc_iou,
        config.timeout_ms,
        writer,
    )?;

    // cameras fire together per assembly station time, so replay groups
    // the (up to) three events of each assembly at adjacent ticks
    let mut seq = 0u64;
    for assembly in &assemblies {
        for camera in CameraId::ALL {
            if !stems_by_camera[&camera].contains(assembly) {
                continue;
            }
            let path = detection_file_path(&config.detections_dir, camera, assembly);
            let start = Instant::now();
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let image_id = format!("{}/{}", camera.dir_name(), assembly);
            let parsed = parse_detection_file(&text, &image_id, camera, class_count)?;
            let detect_ms = elapsed_ms(start);
            processor.handle_event(
                DetectionEvent {
                    camera,
                    assembly_id: assembly.clone(),
                    detections: parsed.detections,
                    timestamp_ms: seq,
                },
                detect_ms,
            )?;
            seq += 1;
        }
    }
    let outcome = processor.finish()?;

    let (latency, latency_path) =
        write_latency(&config.out_dir, &outcome.timings, config.latency_budget_ms)?;
    Ok(RunArtifacts {
        verdict_log: log_path,
        verdict_count: outcome.verdict_count,
        poisoned_count: outcome.poisoned_count,
        protocol_errors: outcome.protocol_errors,
        report: None,
        report_path: None,
        latency,
        latency_path,
    })
}

/// Totals from one event-stream session.
#[derive(Debug)]
pub struct StreamOutcome {
    pub verdict_count: usize,
    pub poisoned_count: usize,
    pub protocol_errors: Vec<String>,
    pub timings: Vec<StageTimings>,
}

/// Event-driven pipeline core shared by replay and socket modes: events go
/// through the synchronizer; completed or timed-out bundles are associated,
/// fused, and logged.
pub struct StreamProcessor<W: Write> {
    registry: ComponentRegistry,
    policy: FusionPolicy,
    assoc_iou: f64,
    sync: Synchronizer,
    writer: W,
    detect_ms: BTreeMap<String, f64>,
    verdict_count: usize,
    poisoned_count: usize,
    protocol_errors: Vec<String>,
    timings: Vec<StageTimings>,
}

impl<W: Write> StreamProcessor<W> {
    pub fn new(
        registry: ComponentRegistry,
        policy: FusionPolicy,
        assoc_iou: f64,
        timeout_ms: Option<u64>,
        mut writer: W,
    ) -> Result<Self, PipelineError> {
        let header = VerdictLogRecord::Header(LogHeader {
            format_version: VERDICT_LOG_FORMAT_VERSION,
            policy,
            assoc_iou,
        });
        writeln!(writer, "{}", serde_json::to_string(&header)?).map_err(|source| {
            PipelineError::Io {
                path: "<verdict log>".to_string(),
                source,
            }
        })?;
        Ok(StreamProcessor {
            registry,
            policy,
            assoc_iou,
            sync: Synchronizer::new(timeout_ms),
            writer,
            detect_ms: BTreeMap::new(),
            verdict_count: 0,
            poisoned_count: 0,
            protocol_errors: Vec::new(),
            timings: Vec::new(),
        })
    }

    /// Feed one event; `detect_ms` is the upstream detection (or parse)
    /// time attributed to this event. Protocol violations are recorded and
    /// the stream keeps going.
    pub fn handle_event(
        &mut self,
        event: DetectionEvent,
        detect_ms: f64,
    ) -> Result<(), PipelineError> {
        let now = event.timestamp_ms;
        for bundle in self.sync.advance(now) {
            self.process_bundle(bundle)?;
        }
        let assembly_id = event.assembly_id.clone();
        *self.detect_ms.entry(assembly_id.clone()).or_insert(0.0) += detect_ms;
        match self.sync.offer(event) {
            Ok(Some(bundle)) => self.process_bundle(bundle)?,
            Ok(None) => {}
            Err(err) => {
                // a stale event's assembly has already been emitted; drop
                // the timing entry it just re-created
                if matches!(err, SyncError::StaleEvent { .. }) {
                    self.detect_ms.remove(&assembly_id);
                }
                self.protocol_errors.push(err.to_string());
            }
        }
        Ok(())
    }

    /// End of stream: drain the synchronizer and flush the log.
    pub fn finish(mut self) -> Result<StreamOutcome, PipelineError> {
        for bundle in self.sync.flush() {
            self.process_bundle(bundle)?;
        }
        self.writer.flush().map_err(|source| PipelineError::Io {
            path: "<verdict log>".to_string(),
            source,
        })?;
        Ok(StreamOutcome {
            verdict_count: self.verdict_count,
            poisoned_count: self.poisoned_count,
            protocol_errors: self.protocol_errors,
            timings: self.timings,
        })
    }

    fn write_record(&mut self, record: &VerdictLogRecord) -> Result<(), PipelineError> {
        writeln!(self.writer, "{}", serde_json::to_string(record)?).map_err(|source| {
            PipelineError::Io {
                path: "<verdict log>".to_string(),
                source,
            }
        })
    }

    fn process_bundle(&mut self, bundle: FrameBundle) -> Result<(), PipelineError> {
        let detect_ms = self.detect_ms.remove(&bundle.assembly_id).unwrap_or(0.0);
        if bundle.poisoned {
            self.poisoned_count += 1;
            let record = VerdictLogRecord::Poisoned {
                assembly_id: bundle.assembly_id.clone(),
                detail: "duplicate camera event".to_string(),
            };
            return self.write_record(&record);
        }

        let start = Instant::now();
        let mut verdicts = Vec::new();
        for (camera, detections) in &bundle.slots {
            verdicts
                .extend(associate(detections, *camera, &self.registry, self.assoc_iou)?.verdicts);
        }
        let associate_ms = elapsed_ms(start);

        let start = Instant::now();
        let verdict = assembly_verdict(
            &bundle.assembly_id,
            &verdicts,
            &self.registry,
            self.policy,
            &bundle.missing_cameras(),
        )?;
        let fuse_ms = elapsed_ms(start);

        let start = Instant::now();
        self.write_record(&VerdictLogRecord::Verdict(verdict))?;
        let log_ms = elapsed_ms(start);

        self.timings.push(StageTimings::from_stages(
            detect_ms,
            associate_ms,
            fuse_ms,
            log_ms,
        ));
        self.verdict_count += 1;
        Ok(())
    }
}

/// Socket mode: accept one connection on `listener` and process one JSON
/// event per line until the peer closes. Artifacts land in `out_dir` like a
/// stream run.
pub fn serve_stream(
    listener: &TcpListener,
    registry: &ComponentRegistry,
    policy: FusionPolicy,
    assoc_iou: f64,
    timeout_ms: Option<u64>,
    out_dir: &Path,
    latency_budget_ms: f64,
) -> Result<RunArtifacts, PipelineError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join("verdicts.jsonl");
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let writer = BufWriter::new(file);
    let mut processor =
        StreamProcessor::new(registry.clone(), policy, assoc_iou, timeout_ms, writer)?;

    let (stream, _peer) = listener.accept().map_err(|source| PipelineError::Io {
        path: "<listener>".to_string(),
        source,
    })?;
    let reader = BufReader::new(stream);
    for (seq, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: "<socket>".to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireEvent = serde_json::from_str(&line)?;
        processor.handle_event(wire.into_event(seq as u64), 0.0)?;
    }
    let outcome = processor.finish()?;

    let (latency, latency_path) = write_latency(out_dir, &outcome.timings, latency_budget_ms)?;
    Ok(RunArtifacts {
        verdict_log: log_path,
        verdict_count: outcome.verdict_count,
        poisoned_count: outcome.poisoned_count,
        protocol_errors: outcome.protocol_errors,
        report: None,
        report_path: None,
        latency,
        latency_path,
    })
}
