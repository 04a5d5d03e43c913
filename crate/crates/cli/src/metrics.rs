use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use facerig_core::{jitter_metric, ControllerFrame};
use serde::{Deserialize, Serialize};

/// Sliding window length for the fps and jitter figures.
pub const METRICS_WINDOW: usize = 48;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMetrics {
    pub frames_in: u64,
    pub frames_out: u64,
    pub frames_rejected: u64,
    pub frames_dropped: u64,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
    pub fps: f64,
    /// `None` until two primary frames are in the window.
    pub jitter: Option<f64>,
}

/// Counters written by the ingestion stage.
#[derive(Debug, Default)]
pub struct IngestCounters {
    pub frames_in: AtomicU64,
    pub frames_rejected: AtomicU64,
    pub frames_dropped: AtomicU64,
}

impl IngestCounters {
    pub fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

/// Pipeline-side bookkeeping for [`SessionMetrics`].
#[derive(Debug, Default)]
pub struct MetricsTracker {
    frames_out: u64,
    rejected: u64,
    latency_sum_ms: f64,
    latency_max_ms: f64,
    latency_count: u64,
    emitted: VecDeque<Instant>,
    primaries: VecDeque<ControllerFrame>,
}

impl MetricsTracker {
    /// Records one output frame. `latency` is `None` for frames that had
    /// no input (stale repeats).
    pub fn record(&mut self, at: Instant, latency: Option<Duration>, primary: &ControllerFrame) {
        self.frames_out += 1;
        if let Some(l) = latency {
            let ms = l.as_secs_f64() * 1e3;
            self.latency_sum_ms += ms;
            self.latency_max_ms = self.latency_max_ms.max(ms);
            self.latency_count += 1;
        }
        push_capped(&mut self.emitted, at);
        push_capped(&mut self.primaries, primary.clone());
    }

    pub fn reject(&mut self) {
        self.rejected += 1;
    }

    pub fn snapshot(&self, ingest: &IngestCounters) -> SessionMetrics {
        let fps = match (self.emitted.front(), self.emitted.back()) {
            (Some(a), Some(b)) if self.emitted.len() > 1 => {
                let span = b.duration_since(*a).as_secs_f64();
                if span > 0.0 {
                    (self.emitted.len() - 1) as f64 / span
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        let frames: Vec<ControllerFrame> = self.primaries.iter().cloned().collect();
        SessionMetrics {
            frames_in: ingest.frames_in.load(Ordering::Relaxed),
            frames_out: self.frames_out,
            frames_rejected: ingest.frames_rejected.load(Ordering::Relaxed) + self.rejected,
            frames_dropped: ingest.frames_dropped.load(Ordering::Relaxed),
            mean_latency_ms: if self.latency_count == 0 {
                0.0
            } else {
                self.latency_sum_ms / self.latency_count as f64
            },
            max_latency_ms: self.latency_max_ms,
            fps,
            jitter: jitter_metric(&frames).ok(),
        }
    }
}

fn push_capped<T>(q: &mut VecDeque<T>, v: T) {
    if q.len() == METRICS_WINDOW {
        q.pop_front();
    }
    q.push_back(v);
}
