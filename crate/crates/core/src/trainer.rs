//! The training loop: cached records, augmented per record, through the
//! classifier, optimized with AdamW under a warmup + plateau-decay schedule.
//!
//! The loop only ever touches the cache. No feature provider is reachable from
//! here, and the manifest's provider descriptor is not read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::model::{self, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelDims, ParamKind, Params};
use crate::rng::RngStream;
use crate::store::{Cache, FeatureRecord};
use crate::tensor::MemoryTracker;

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

/// Stream keys under the run seed.
const KEY_INIT: u64 = 0x11;
const KEY_SHUFFLE: u64 = 0x22;
const KEY_AUGMENT: u64 = 0x33;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Accuracy,
    MeanClassRecall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub policy: AugmentationPolicy,
    pub eval_metric: EvalMetric,
    pub model: ModelConfig,
    /// Start from these parameters instead of a random init.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 50,
            plateau_factor: 0.1,
            plateau_patience: 3,
            min_lr: 1e-6,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 30,
            max_steps: None,
            seed: 0,
            policy: AugmentationPolicy::default(),
            eval_metric: EvalMetric::Accuracy,
            model: ModelConfig::default(),
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor = {} must lie in (0, 1)", self.plateau_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr = {} must be positive", self.peak_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be >= 1".into());
        }
        self.policy.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauState {
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
}

/// Linear warmup to the peak rate, then decay by a fixed factor each time the
/// validation metric fails to improve for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub state: PlateauState,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            peak_lr: cfg.peak_lr,
            warmup_steps: cfg.warmup_steps,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            min_lr: cfg.min_lr,
            state: PlateauState {
                best_metric: f64::NEG_INFINITY,
                epochs_since_improvement: 0,
                current_lr: cfg.peak_lr,
            },
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.state.current_lr
        }
    }

    /// Record an end-of-epoch metric (higher is better). Returns whether the
    /// rate decayed.
    pub fn end_epoch(&mut self, metric: f64) -> bool {
        let s = &mut self.state;
        if metric > s.best_metric {
            s.best_metric = metric;
            s.epochs_since_improvement = 0;
            return false;
        }
        s.epochs_since_improvement += 1;
        if s.epochs_since_improvement >= self.patience {
            s.current_lr = (s.current_lr * self.factor).max(self.min_lr);
            s.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}

/// Learning rate for `step`, first folding in an end-of-epoch metric if one
/// is given.
pub fn lr_at(step: usize, epoch_end_signal: Option<f64>, sched: &mut LrSchedule) -> f64 {
    if let Some(m) = epoch_end_signal {
        sched.end_epoch(m);
    }
    sched.lr_at(step)
}

/// Decoupled-weight-decay Adam update of one tensor. `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
) {
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        if weight_decay != 0.0 {
            p[i] *= 1.0 - lr * weight_decay;
        }
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW with first/second moments laid out like the parameters. Weight decay
/// only touches linear-layer weights.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Params,
    v: Params,
    t: u64,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &Params, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            betas,
            eps,
            weight_decay,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        if params.config != self.m.config
            || params.dims != self.m.dims
            || grads.config != params.config
            || grads.dims != params.dims
        {
            return Err(Error::ShapeMismatch(
                "optimizer state, parameters and gradients disagree on shape".into(),
            ));
        }
        self.t += 1;
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((name, p), g), m), v) in params.named_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            let wd = if ParamKind::of(&name).decays() {
                self.weight_decay
            } else {
                0.0
            };
            adamw_update(
                p.as_mut_slice(),
                g.as_slice(),
                m.as_mut_slice(),
                v.as_mut_slice(),
                self.t,
                lr,
                self.betas,
                self.eps,
                wd,
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub entries: Vec<LogEntry>,
}

impl MetricsLog {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.split == TRAIN_SPLIT)
            .map(|e| e.loss)
            .collect()
    }

    pub fn val_metrics(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.split == VAL_SPLIT)
            .filter_map(|e| e.metric)
            .collect()
    }

    /// Mean training loss of each epoch, in epoch order.
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == TRAIN_SPLIT) {
            match out.last_mut() {
                Some((ep, sum, n)) if *ep == e.epoch => {
                    *sum += e.loss;
                    *n += 1;
                }
                _ => out.push((e.epoch, e.loss, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }

    /// Newline-delimited JSON, one entry per line.
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::storage(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::storage(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_class_recall: f64,
    pub loss: f64,
}

impl Metrics {
    pub fn get(&self, metric: EvalMetric) -> f64 {
        match metric {
            EvalMetric::Accuracy => self.accuracy,
            EvalMetric::MeanClassRecall => self.mean_class_recall,
        }
    }
}

/// Accuracy and unweighted mean per-class recall (over classes that occur in
/// `labels`).
pub fn classification_metrics(preds: &[u32], labels: &[u32], classes: usize) -> (f64, f64) {
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    let mut correct = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        support[y as usize] += 1;
        if p == y {
            hits[y as usize] += 1;
            correct += 1;
        }
    }
    let accuracy = correct as f64 / labels.len().max(1) as f64;
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(s, _)| **s > 0)
        .map(|(s, h)| *h as f64 / *s as f64)
        .collect();
    let mcr = recalls.iter().sum::<f64>() / recalls.len().max(1) as f64;
    (accuracy, mcr)
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Augmentation-free pass over `split`.
pub fn evaluate(cache: &Cache, split: &str, params: &Params) -> Result<Metrics> {
    if !cache.has_split(split) {
        return Err(Error::cache(cache.root(), format!("no split named `{split}`")));
    }
    let n = cache.split_len(split);
    if n == 0 {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let mut preds = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut loss = 0.0;
    for i in 0..n {
        let rec = cache.read(split, i)?;
        let logits = model::forward(params, std::slice::from_ref(&rec))?;
        let (l, _) = model::cross_entropy(&logits, &[rec.label])?;
        loss += l;
        preds.push(argmax(logits.row(0)));
        labels.push(rec.label);
    }
    let (accuracy, mean_class_recall) =
        classification_metrics(&preds, &labels, params.dims.classes);
    Ok(Metrics {
        accuracy,
        mean_class_recall,
        loss: loss / n as f64,
    })
}

/// Runtime knobs that do not change results.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Where to write `best.ckpt`, `last.ckpt` and `metrics.jsonl`.
    pub out_dir: Option<PathBuf>,
    /// Threads used to read and augment batch records.
    pub workers: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            workers: 1,
        }
    }
}

impl TrainOptions {
    /// Worker count from `LOFFTA_NUM_WORKERS` (default 1).
    pub fn from_env() -> Self {
        let workers = std::env::var("LOFFTA_NUM_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n: &usize| n >= 1)
            .unwrap_or(1);
        Self {
            workers,
            ..Self::default()
        }
    }
}

/// Model dims implied by a cache.
pub fn dims_for(cache: &Cache) -> ModelDims {
    let m = cache.manifest();
    ModelDims {
        d: m.d,
        h: m.h,
        w: m.w,
        classes: m.num_classes(),
    }
}

/// State of one training run, steppable one batch at a time.
pub struct Session<'a> {
    cache: &'a Cache,
    cfg: TrainConfig,
    pub params: Params,
    opt: AdamW,
    pub schedule: LrSchedule,
    step: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Session<'a> {
    pub fn new(cache: &'a Cache, cfg: &TrainConfig, workers: usize) -> Result<Self> {
        cfg.validate()?;
        if !cache.has_split(TRAIN_SPLIT) || cache.split_len(TRAIN_SPLIT) == 0 {
            return Err(Error::cache(cache.root(), "cache has no non-empty `train` split"));
        }
        let dims = dims_for(cache);
        let params = match &cfg.init_checkpoint {
            Some(path) => {
                let ck = load_checkpoint(path)?;
                if ck.params.dims != dims || ck.params.config != cfg.model {
                    return Err(Error::ShapeMismatch(format!(
                        "init checkpoint {} has dims {:?} / config {:?}, run needs {:?} / {:?}",
                        path.display(),
                        ck.params.dims,
                        ck.params.config,
                        dims,
                        cfg.model
                    )));
                }
                ck.params
            }
            None => Params::init(cfg.model, dims, crate::rng::derive_seed(cfg.seed, &[KEY_INIT]))?,
        };
        let opt = AdamW::new(&params, cfg.betas, cfg.adam_eps, cfg.weight_decay);
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            cache,
            cfg: cfg.clone(),
            params,
            opt,
            schedule: LrSchedule::new(cfg),
            step: 0,
            pool,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Seeded permutation of the train split for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.cache.split_len(TRAIN_SPLIT)).collect();
        RngStream::derive(self.cfg.seed, &[KEY_SHUFFLE, epoch as u64]).shuffle(&mut order);
        order
    }

    /// Read and augment the records at `indices`. Each record draws from its
    /// own stream keyed by `(seed, epoch, index)`, so the result does not
    /// depend on the worker count.
    pub fn prepare_batch(&self, epoch: usize, indices: &[usize]) -> Result<Vec<FeatureRecord>> {
        let seed = self.cfg.seed;
        let policy = &self.cfg.policy;
        let cache = self.cache;
        let prep = |&i: &usize| -> Result<FeatureRecord> {
            let rec = cache.read(TRAIN_SPLIT, i)?;
            let mut rng = RngStream::derive(seed, &[KEY_AUGMENT, epoch as u64, i as u64]);
            apply_policy(&rec, policy, &mut rng)
        };
        match &self.pool {
            None => indices.iter().map(prep).collect(),
            Some(pool) => {
                let tracker = MemoryTracker::current();
                pool.install(|| {
                    indices
                        .par_iter()
                        .map(|i| {
                            let _g = tracker.as_ref().map(MemoryTracker::install);
                            prep(i)
                        })
                        .collect()
                })
            }
        }
    }

    /// One optimizer step on an already-prepared batch. Returns the loss.
    pub fn train_step(&mut self, batch: &[FeatureRecord]) -> Result<f64> {
        let labels: Vec<u32> = batch.iter().map(|r| r.label).collect();
        let (loss, grads) = model::backward(&self.params, batch, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss,
            });
        }
        let lr = self.schedule.lr_at(self.step);
        self.opt.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-by-validation-metric parameters (initial parameters when no
    /// epoch ran).
    pub best: Checkpoint,
    pub best_metric: Option<f64>,
    pub final_params: Params,
    pub log: MetricsLog,
    pub steps: usize,
}

pub fn train(cache_root: &Path, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cache_root, cfg, &TrainOptions::default())
}

pub fn train_with(cache_root: &Path, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cache = Cache::open(cache_root)?;
    train_on(&cache, cfg, opts)
}

pub fn train_on(cache: &Cache, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut session = Session::new(cache, cfg, opts.workers)?;
    if cfg.max_epochs > 0 && (!cache.has_split(VAL_SPLIT) || cache.split_len(VAL_SPLIT) == 0) {
        return Err(Error::cache(cache.root(), "cache has no non-empty `val` split"));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    let mut log = MetricsLog::default();
    let mut best = Checkpoint {
        params: session.params.clone(),
        step: 0,
    };
    let mut best_metric: Option<f64> = None;
    let step_cap = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.max_epochs {
        let order = session.epoch_order(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if session.steps_taken() >= step_cap {
                break 'epochs;
            }
            let batch = session.prepare_batch(epoch, chunk)?;
            let lr = session.current_lr();
            let loss = session.train_step(&batch)?;
            log.entries.push(LogEntry {
                step: session.steps_taken(),
                epoch,
                split: TRAIN_SPLIT.into(),
                loss,
                metric: None,
                lr,
            });
        }
        let m = evaluate(cache, VAL_SPLIT, &session.params)?;
        let metric = m.get(cfg.eval_metric);
        session.schedule.end_epoch(metric);
        log.entries.push(LogEntry {
            step: session.steps_taken(),
            epoch,
            split: VAL_SPLIT.into(),
            loss: m.loss,
            metric: Some(metric),
            lr: session.current_lr(),
        });
        if best_metric.is_none_or(|b| metric > b) {
            best_metric = Some(metric);
            best = Checkpoint {
                params: session.params.clone(),
                step: session.steps_taken() as u64,
            };
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(&dir.join("best.ckpt"), &best.params, best.step)?;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join("last.ckpt"), &session.params, session.steps_taken() as u64)?;
        if best_metric.is_none() {
            save_checkpoint(&dir.join("best.ckpt"), &best.params, best.step)?;
        }
        log.write_jsonl(&dir.join("metrics.jsonl"))?;
    }
    Ok(TrainOutcome {
        best,
        best_metric,
        steps: session.steps_taken(),
        final_params: session.params,
        log,
    })
}
