//! Throughput and memory measurements for training and inference.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Params};
use crate::store::Cache;
use crate::tensor::MemoryTracker;
use crate::trainer::{Session, TrainConfig};

/// Warmup steps not counted in timings.
pub const WARMUP_STEPS: usize = 3;
/// Fewest measured steps `bench_train` accepts.
pub const MIN_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepHistogram {
    pub count: usize,
    pub min_ms: f64,
    pub p10_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
}

impl StepHistogram {
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        if samples_ms.is_empty() {
            return Self {
                count: 0,
                min_ms: 0.0,
                p10_ms: 0.0,
                median_ms: 0.0,
                p90_ms: 0.0,
                max_ms: 0.0,
                mean_ms: 0.0,
            };
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
        let median = if s.len() % 2 == 1 {
            s[s.len() / 2]
        } else {
            0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
        };
        Self {
            count: s.len(),
            min_ms: s[0],
            p10_ms: q(0.1),
            median_ms: median,
            p90_ms: q(0.9),
            max_ms: s[s.len() - 1],
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBenchReport {
    pub provider: String,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub batch_size: usize,
    pub steps_measured: usize,
    /// Images per second over the measured steps' wall time.
    pub images_per_sec: f64,
    /// Images per second at the median step time.
    pub median_images_per_sec: f64,
    /// High-water mark of live tensor bytes during the run.
    pub peak_tensor_bytes: u64,
    pub step_ms: StepHistogram,
    /// Process peak RSS, informational only.
    pub peak_rss_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferBenchReport {
    pub split: String,
    pub records: usize,
    pub batch_size: usize,
    pub images_per_sec: f64,
    /// Images per second at the median full-batch time.
    pub median_images_per_sec: f64,
    pub peak_tensor_bytes: u64,
    /// Times of full batches only.
    pub batch_ms: StepHistogram,
}

fn table(rows: &[(&str, String)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<width$}  {v}\n"))
        .collect()
}

impl TrainBenchReport {
    pub fn to_table(&self) -> String {
        table(&[
            ("provider", self.provider.clone()),
            ("shape (h, w, d)", format!("({}, {}, {})", self.h, self.w, self.d)),
            ("batch size", self.batch_size.to_string()),
            ("steps measured", self.steps_measured.to_string()),
            ("images/sec", format!("{:.1}", self.images_per_sec)),
            ("images/sec (median step)", format!("{:.1}", self.median_images_per_sec)),
            ("peak tensor bytes", self.peak_tensor_bytes.to_string()),
            (
                "step ms (p10/median/p90)",
                format!(
                    "{:.3} / {:.3} / {:.3}",
                    self.step_ms.p10_ms, self.step_ms.median_ms, self.step_ms.p90_ms
                ),
            ),
            (
                "peak rss bytes",
                self.peak_rss_bytes
                    .map_or_else(|| "n/a".to_string(), |b| b.to_string()),
            ),
        ])
    }
}

impl InferBenchReport {
    pub fn to_table(&self) -> String {
        table(&[
            ("split", self.split.clone()),
            ("records", self.records.to_string()),
            ("batch size", self.batch_size.to_string()),
            ("images/sec", format!("{:.1}", self.images_per_sec)),
            ("images/sec (median batch)", format!("{:.1}", self.median_images_per_sec)),
            ("peak tensor bytes", self.peak_tensor_bytes.to_string()),
            ("batch ms (median)", format!("{:.3}", self.batch_ms.median_ms)),
        ])
    }
}

/// Peak resident set size from `/proc/self/status`, where available.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Time `steps` full training steps (read, augment, forward, backward,
/// update) after `WARMUP_STEPS` untimed ones. Batches are always full; the
/// shuffled order wraps across epochs.
pub fn bench_train(cache: &Cache, cfg: &TrainConfig, steps: usize, workers: usize) -> Result<TrainBenchReport> {
    if steps < MIN_STEPS {
        return Err(Error::InvalidParameter(format!("bench needs at least {MIN_STEPS} steps, got {steps}")));
    }
    let tracker = MemoryTracker::new();
    let _guard = MemoryTracker::install(&tracker);
    let mut session = Session::new(cache, cfg, workers)?;
    let batch_size = cfg.batch_size;
    let mut queue: Vec<usize> = Vec::new();
    let mut epoch = 0;
    let mut next_batch = |session: &Session| {
        while queue.len() < batch_size {
            let mut order = session.epoch_order(epoch);
            order.reverse();
            order.append(&mut queue);
            queue = order;
            epoch += 1;
        }
        let idx: Vec<usize> = (0..batch_size).map(|_| queue.pop().unwrap()).collect();
        (epoch - 1, idx)
    };

    let mut samples = Vec::with_capacity(steps);
    for s in 0..WARMUP_STEPS + steps {
        let (ep, idx) = next_batch(&session);
        let start = Instant::now();
        let batch = session.prepare_batch(ep, &idx)?;
        session.train_step(&batch)?;
        drop(batch);
        if s >= WARMUP_STEPS {
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let hist = StepHistogram::from_samples(&samples);
    let total_s: f64 = samples.iter().sum::<f64>() / 1e3;
    let m = cache.manifest();
    Ok(TrainBenchReport {
        provider: m.provider.name.clone(),
        d: m.d,
        h: m.h,
        w: m.w,
        batch_size,
        steps_measured: steps,
        images_per_sec: (batch_size * steps) as f64 / total_s,
        median_images_per_sec: batch_size as f64 / (hist.median_ms / 1e3),
        peak_tensor_bytes: tracker.peak_bytes() as u64,
        step_ms: hist,
        peak_rss_bytes: peak_rss_bytes(),
    })
}

/// Forward-only pass over a split in batches. The first batch is an untimed
/// warmup.
pub fn bench_infer(cache: &Cache, split: &str, params: &Params, batch_size: usize) -> Result<InferBenchReport> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
    }
    if !cache.has_split(split) {
        return Err(Error::cache(cache.root(), format!("no split named `{split}`")));
    }
    let n = cache.split_len(split);
    if n == 0 {
        return Err(Error::EmptySplit(split.to_string()));
    }
    params.check_input(cache.manifest().shape())?;
    let tracker = MemoryTracker::new();
    let _guard = MemoryTracker::install(&tracker);
    let run = |range: std::ops::Range<usize>| -> Result<()> {
        let batch = range.map(|i| cache.read(split, i)).collect::<Result<Vec<_>>>()?;
        model::forward(params, &batch)?;
        Ok(())
    };
    run(0..batch_size.min(n))?;
    let mut samples = Vec::new();
    let start = Instant::now();
    for lo in (0..n).step_by(batch_size) {
        let t = Instant::now();
        let hi = (lo + batch_size).min(n);
        run(lo..hi)?;
        if hi - lo == batch_size {
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let hist = StepHistogram::from_samples(&samples);
    let median_images_per_sec = if samples.is_empty() {
        n as f64 / wall
    } else {
        batch_size as f64 / (hist.median_ms / 1e3)
    };
    Ok(InferBenchReport {
        split: split.to_string(),
        records: n,
        batch_size,
        images_per_sec: n as f64 / wall,
        median_images_per_sec,
        peak_tensor_bytes: tracker.peak_bytes() as u64,
        batch_ms: hist,
    })
}

/// Convenience wrapper that opens the cache first.
pub fn bench_train_at(cache_root: &Path, cfg: &TrainConfig, steps: usize, workers: usize) -> Result<TrainBenchReport> {
    bench_train(&Cache::open(cache_root)?, cfg, steps, workers)
}
