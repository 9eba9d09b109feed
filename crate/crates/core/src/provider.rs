//! Sources of feature records, and cache construction from them.
//!
//! A real foundation model is one provider; [`SyntheticProvider`] is another,
//! producing class-separable grids with smooth low-rank spatial structure so
//! the whole pipeline runs without pretrained weights.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::store::{
    channel_stats, Cache, CacheManifest, Dtype, FeatureGrid, FeatureRecord, ProviderDescriptor,
    SplitWriter, FORMAT_VERSION,
};

pub type SampleId = String;

pub type RecordIter<'a> = Box<dyn Iterator<Item = Result<(SampleId, FeatureRecord)>> + 'a>;

/// Anything that can emit feature records for a set of named splits.
pub trait FeatureProvider {
    fn descriptor(&self) -> ProviderDescriptor;
    fn class_names(&self) -> Vec<String>;
    /// `(h, w, d)` of every emitted grid.
    fn shape(&self) -> (usize, usize, usize);
    /// Split names with their record counts, in write order.
    fn splits(&self) -> Vec<(String, usize)>;
    fn records(&self, split: &str) -> Result<RecordIter<'_>>;
}

/// Wraps a provider and counts how often it is asked for records.
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: FeatureProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn invocations(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: FeatureProvider> FeatureProvider for CountingProvider<P> {
    fn descriptor(&self) -> ProviderDescriptor {
        self.inner.descriptor()
    }

    fn class_names(&self) -> Vec<String> {
        self.inner.class_names()
    }

    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn splits(&self) -> Vec<(String, usize)> {
        self.inner.splits()
    }

    fn records(&self, split: &str) -> Result<RecordIter<'_>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let calls = &self.calls;
        Ok(Box::new(self.inner.records(split)?.inspect(move |_| {
            calls.fetch_add(1, Ordering::SeqCst);
        })))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    /// Norm of each class mean vector.
    pub gamma: f64,
    /// Per-element noise std.
    pub sigma: f64,
    /// Number of spatial basis patterns.
    pub spatial_rank: usize,
    /// Multiplier on the spatial-pattern amplitude; 0 removes the patterns.
    pub pattern_scale: f64,
    pub seed: u64,
    pub dtype: Dtype,
    /// Reported in the manifest; never read by training.
    pub provider_name: String,
    pub param_count: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 100,
            val_per_class: 20,
            test_per_class: 20,
            d: 32,
            h: 6,
            w: 6,
            gamma: 3.0,
            sigma: 1.0,
            spatial_rank: 3,
            pattern_scale: 1.0,
            seed: 0,
            dtype: Dtype::F32,
            provider_name: "synthetic".into(),
            param_count: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.classes < 2 {
            return bad(format!("classes = {} must be >= 2", self.classes));
        }
        if self.d == 0 || self.h == 0 || self.w == 0 {
            return bad(format!("grid {}x{}x{} has a zero size", self.h, self.w, self.d));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("gamma = {} must be >= 0", self.gamma));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma = {} must be >= 0", self.sigma));
        }
        if self.spatial_rank == 0 {
            return bad("spatial_rank must be >= 1".into());
        }
        if !(self.pattern_scale.is_finite() && self.pattern_scale >= 0.0) {
            return bad(format!("pattern_scale = {} must be >= 0", self.pattern_scale));
        }
        Ok(())
    }

    fn split_counts(&self) -> Vec<(String, usize)> {
        [
            ("train", self.train_per_class),
            ("val", self.val_per_class),
            ("test", self.test_per_class),
        ]
        .into_iter()
        .map(|(s, n)| (s.to_string(), n * self.classes))
        .collect()
    }
}

fn unit_vector(rng: &mut RngStream, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn split_code(split: &str) -> u64 {
    // FNV-1a, stable across platforms
    split
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Seeded class means, per-class pattern loadings, and shared spatial fields.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    spec: SyntheticSpec,
    /// `classes x d`
    means: Vec<Vec<f64>>,
    /// `classes x rank x d`
    loadings: Vec<Vec<Vec<f64>>>,
    /// `rank x (h*w)`
    fields: Vec<Vec<f64>>,
}

impl SyntheticProvider {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (d, h, w, rank) = (spec.d, spec.h, spec.w, spec.spatial_rank);
        let means = (0..spec.classes)
            .map(|c| {
                let mut rng = RngStream::derive(spec.seed, &[1, c as u64]);
                unit_vector(&mut rng, d)
                    .into_iter()
                    .map(|x| x * spec.gamma)
                    .collect()
            })
            .collect();
        let amp = spec.gamma * spec.pattern_scale / (rank as f64).sqrt();
        let loadings = (0..spec.classes)
            .map(|c| {
                (0..rank)
                    .map(|k| {
                        let mut rng = RngStream::derive(spec.seed, &[2, c as u64, k as u64]);
                        unit_vector(&mut rng, d).into_iter().map(|x| x * amp).collect()
                    })
                    .collect()
            })
            .collect();
        let fields = (0..rank)
            .map(|k| {
                let mut rng = RngStream::derive(spec.seed, &[3, k as u64]);
                let fr = rng.uniform_range(0.5, 1.5);
                let fc = rng.uniform_range(0.5, 1.5);
                let phase = rng.uniform_range(0.0, TAU);
                (0..h * w)
                    .map(|i| {
                        let (r, c) = ((i / w) as f64, (i % w) as f64);
                        (TAU * (fr * r / h as f64 + fc * c / w as f64) + phase).sin()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            spec,
            means,
            loadings,
            fields,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.means[class]
    }

    /// One record of `class`: grid cell = mean + sum_k loading_k * field_k(r, c)
    /// + noise, cls = mean + noise. Grid noise draws first, then cls noise.
    pub fn synth_record(&self, class: usize, rng: &mut RngStream) -> Result<FeatureRecord> {
        let s = &self.spec;
        if class >= s.classes {
            return Err(Error::IndexError {
                index: class,
                len: s.classes,
            });
        }
        let (d, cells) = (s.d, s.h * s.w);
        let mean = &self.means[class];
        let mut grid = Vec::with_capacity(cells * d);
        for cell in 0..cells {
            for ch in 0..d {
                let mut v = mean[ch];
                for (load, field) in self.loadings[class].iter().zip(&self.fields) {
                    v += load[ch] * field[cell];
                }
                if s.sigma > 0.0 {
                    v += s.sigma * rng.normal();
                }
                grid.push(v);
            }
        }
        let cls = mean
            .iter()
            .map(|&m| if s.sigma > 0.0 { m + s.sigma * rng.normal() } else { m })
            .collect();
        FeatureRecord::new(cls, FeatureGrid::new(s.h, s.w, d, grid)?, class as u32)
    }

    /// Record `index` of `split`; classes cycle so every split is balanced.
    pub fn record_at(&self, split: &str, index: usize) -> Result<FeatureRecord> {
        let mut rng = RngStream::derive(self.spec.seed, &[4, split_code(split), index as u64]);
        self.synth_record(index % self.spec.classes, &mut rng)
    }
}

impl FeatureProvider for SyntheticProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: self.spec.provider_name.clone(),
            param_count: self.spec.param_count,
            patch_size: 1,
            source_image_size: self.spec.h.max(self.spec.w) as u32,
        }
    }

    fn class_names(&self) -> Vec<String> {
        (0..self.spec.classes).map(|c| format!("class_{c}")).collect()
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.spec.h, self.spec.w, self.spec.d)
    }

    fn splits(&self) -> Vec<(String, usize)> {
        self.spec.split_counts()
    }

    fn records(&self, split: &str) -> Result<RecordIter<'_>> {
        let n = self
            .splits()
            .into_iter()
            .find(|(s, _)| s == split)
            .map(|(_, n)| n)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown split `{split}`")))?;
        let split = split.to_string();
        Ok(Box::new((0..n).map(move |i| {
            self.record_at(&split, i).map(|r| (format!("{split}/{i}"), r))
        })))
    }
}

/// Pull every split from `provider` and write a cache at `out_root`.
pub fn write_cache<P: FeatureProvider + ?Sized>(
    provider: &P,
    out_root: &Path,
    dtype: Dtype,
    dataset_name: &str,
) -> Result<CacheManifest> {
    fs::create_dir_all(out_root).map_err(|e| Error::storage(out_root, e))?;
    let (h, w, d) = provider.shape();
    let per_shard = SplitWriter::records_for_bytes(dtype, (h, w, d), 64 << 20);
    let mut manifest = CacheManifest {
        format_version: FORMAT_VERSION,
        dataset_name: dataset_name.to_string(),
        class_names: provider.class_names(),
        provider: provider.descriptor(),
        d,
        h,
        w,
        dtype,
        splits: Default::default(),
        pooling: None,
        normalization: None,
        feature_layer: None,
    };
    for (split, _) in provider.splits() {
        let mut writer = SplitWriter::new(out_root, &split, dtype, per_shard);
        for item in provider.records(&split)? {
            let (_, rec) = item?;
            if rec.shape() != (h, w, d) {
                return Err(Error::ShapeMismatch(format!(
                    "provider emitted {:?}, declared {:?}",
                    rec.shape(),
                    (h, w, d)
                )));
            }
            writer.push(rec)?;
        }
        let n = writer.finish()?;
        manifest.splits.insert(split, n);
    }
    manifest.write(out_root)?;
    if manifest.splits.get("train").copied().unwrap_or(0) > 0 {
        let cache = Cache::open(out_root)?;
        manifest.normalization = Some(channel_stats(&cache, "train")?);
        manifest.write(out_root)?;
    }
    Ok(manifest)
}

/// Build a synthetic train/val/test cache.
pub fn build_cache(spec: &SyntheticSpec, out_root: &Path) -> Result<CacheManifest> {
    let provider = SyntheticProvider::new(spec.clone())?;
    let mut manifest = write_cache(&provider, out_root, spec.dtype, "synthetic")?;
    manifest.feature_layer = Some("synthetic generator (no backbone)".into());
    manifest.write(out_root)?;
    Ok(manifest)
}
