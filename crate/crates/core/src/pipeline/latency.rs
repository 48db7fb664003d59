//! Per-stage latency capture and nearest-rank percentile summaries.

use serde::{Deserialize, Serialize};

/// Millisecond durations for one assembly's trip through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect_ms: f64,
    pub associate_ms: f64,
    pub fuse_ms: f64,
    pub log_ms: f64,
    pub end_to_end_ms: f64,
}

impl StageTimings {
    /// End-to-end is the stage sum, which keeps the `end_to_end >= max
    /// stage` invariant by construction.
    pub fn from_stages(detect_ms: f64, associate_ms: f64, fuse_ms: f64, log_ms: f64) -> Self {
        StageTimings {
            detect_ms,
            associate_ms,
            fuse_ms,
            log_ms,
            end_to_end_ms: detect_ms + associate_ms + fuse_ms + log_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub detect: StageSummary,
    pub associate: StageSummary,
    pub fuse: StageSummary,
    pub log: StageSummary,
    pub end_to_end: StageSummary,
    pub budget_ms: f64,
    /// Count of samples whose end-to-end latency exceeded the budget.
    pub budget_violations: usize,
}

/// Nearest-rank percentiles per stage. `None` for an empty sample set.
pub fn latency_report(timings: &[StageTimings], budget_ms: f64) -> Option<LatencySummary> {
    if timings.is_empty() {
        return None;
    }
    let summarize = |select: fn(&StageTimings) -> f64| -> StageSummary {
        let mut values: Vec<f64> = timings.iter().map(select).collect();
        values.sort_by(f64::total_cmp);
        StageSummary {
            p50_ms: percentile_nearest_rank(&values, 50.0),
            p95_ms: percentile_nearest_rank(&values, 95.0),
            max_ms: *values.last().expect("nonempty"),
        }
    };
    let budget_violations = timings
        .iter()
        .filter(|t| t.end_to_end_ms > budget_ms)
        .count();
    Some(LatencySummary {
        samples: timings.len(),
        detect: summarize(|t| t.detect_ms),
        associate: summarize(|t| t.associate_ms),
        fuse: summarize(|t| t.fuse_ms),
        log: summarize(|t| t.log_ms),
        end_to_end: summarize(|t| t.end_to_end_ms),
        budget_ms,
        budget_violations,
    })
}

/// Nearest-rank: the value at 1-based index `ceil(p/100 * n)`.
fn percentile_nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}
