//! Single-request response-time measurement.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::Example;
use crate::models::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtStats {
    pub mean_ms: f64,
    pub p05_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Per-request latencies in milliseconds, in measurement order.
    pub samples: Vec<f64>,
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl RtStats {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("no latency samples"));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
            p05_ms: percentile(&sorted, 0.05),
            p50_ms: percentile(&sorted, 0.50),
            p95_ms: percentile(&sorted, 0.95),
            samples,
        })
    }
}

/// Times `repetitions` passes of eval-mode `predict` over `examples`, one
/// request at a time on the calling thread, after one untimed warm-up pass.
/// Each sample covers feature indexing and the forward pass.
pub fn bench_rt(model: &Model, examples: &[Example], repetitions: usize) -> Result<RtStats> {
    if examples.is_empty() || repetitions == 0 {
        return Err(invalid("benchmark needs at least one example and one repetition"));
    }
    for e in examples {
        black_box(model.predict(e)?);
    }
    let mut samples = Vec::with_capacity(examples.len() * repetitions);
    for _ in 0..repetitions {
        for e in examples {
            let start = Instant::now();
            black_box(model.predict(black_box(e))?);
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    RtStats::from_samples(samples)
}
