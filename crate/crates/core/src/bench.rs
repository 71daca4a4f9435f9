//! Batch-1 latency harness.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::YoloRet;
use crate::tensor::{Shape, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    /// Summary of per-iteration durations in milliseconds. Median averages
    /// the middle pair for even counts; p95 is nearest-rank.
    pub fn from_ms(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("latency stats: no samples"));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(LatencyStats {
            iters: n,
            mean_ms: mean,
            median_ms: median,
            p95_ms: s[rank - 1],
            min_ms: s[0],
            max_ms: s[n - 1],
            fps: if mean > 0.0 { 1000.0 / mean } else { f64::INFINITY },
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub resolution: usize,
    pub batch: usize,
    pub warmup: usize,
    pub latency: LatencyStats,
    pub macs: u64,
    pub params: usize,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Time `iters` batch-1 forward passes on a fixed synthetic input after
/// `warmup` untimed ones.
pub fn benchmark_run(model: &YoloRet, store: &WeightStore, warmup: usize, iters: usize) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::invalid("bench: iters must be at least 1"));
    }
    model.check_store(store)?;
    let r = model.resolution();
    let input = Tensor::full(Shape::new(1, 3, r, r), 0.5);
    for _ in 0..warmup {
        model.infer(store, &input)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let out = model.infer(store, &input)?;
        samples.push(ms(t0.elapsed()));
        std::hint::black_box(out);
    }
    Ok(BenchReport {
        resolution: r,
        batch: 1,
        warmup,
        latency: LatencyStats::from_ms(&samples)?,
        macs: model.flops()?.total,
        params: model.params().total,
    })
}
