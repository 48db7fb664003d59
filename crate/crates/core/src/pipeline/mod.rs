//! Stream synchronization, latency accounting, and run orchestration.

pub mod latency;
pub mod run;
pub mod sync;

pub use latency::{latency_report, LatencySummary, StageSummary, StageTimings};
pub use run::{
    read_verdict_log, run, serve_stream, LogHeader, PipelineError, RunArtifacts, RunConfig,
    RunMode, StreamOutcome, StreamProcessor, VerdictLog, VerdictLogRecord, WireDetection,
    WireEvent, DEFAULT_LATENCY_BUDGET_MS, DEFAULT_TIMEOUT_MS, VERDICT_LOG_FORMAT_VERSION,
};
pub use sync::{DetectionEvent, FrameBundle, SyncError, Synchronizer};
