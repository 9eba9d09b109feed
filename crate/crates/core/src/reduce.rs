//! Spatial pooling of feature grids before caching.
//!
//! Pooling a cache built from 2x-resolution inputs with `kernel = stride = 2`
//! brings it back to the base-resolution token count, so training cost stays
//! the same while the features come from the larger images.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{
    channel_stats, validate_cache, Cache, CacheManifest, FeatureGrid, FeatureRecord, PoolingNote,
    SplitWriter,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
}

impl FromStr for PoolMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(PoolMode::Max),
            "average" | "avg" => Ok(PoolMode::Average),
            other => Err(format!("unknown pooling mode `{other}` (expected max|average)")),
        }
    }
}

pub const DEFAULT_KERNEL: usize = 2;
pub const DEFAULT_STRIDE: usize = 2;

/// Output side length for a window scan without padding.
pub fn pooled_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len - kernel) / stride + 1
}

pub fn pool(g: &FeatureGrid, mode: PoolMode, kernel: usize, stride: usize) -> Result<FeatureGrid> {
    let (h, w, d) = g.shape();
    if kernel == 0 || kernel > h.min(w) {
        return Err(Error::InvalidParameter(format!(
            "pool kernel {kernel} must be in [1, {}]",
            h.min(w)
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidParameter("pool stride must be >= 1".into()));
    }
    let (oh, ow) = (pooled_len(h, kernel, stride), pooled_len(w, kernel, stride));
    let mut out = FeatureGrid::zeros(oh, ow, d);
    let inv = 1.0 / (kernel * kernel) as f64;
    for r in 0..oh {
        for c in 0..ow {
            let cell = out.cell_mut(r, c);
            cell.copy_from_slice(g.cell(r * stride, c * stride));
            for kr in 0..kernel {
                for kc in 0..kernel {
                    if kr == 0 && kc == 0 {
                        continue;
                    }
                    let src = g.cell(r * stride + kr, c * stride + kc);
                    match mode {
                        PoolMode::Max => cell.iter_mut().zip(src).for_each(|(o, &v)| *o = o.max(v)),
                        PoolMode::Average => cell.iter_mut().zip(src).for_each(|(o, &v)| *o += v),
                    }
                }
            }
            if mode == PoolMode::Average && kernel > 1 {
                cell.iter_mut().for_each(|o| *o *= inv);
            }
        }
    }
    Ok(out)
}

/// Pool every record of the cache at `in_root` into a new cache at `out_root`.
pub fn pool_cache(
    in_root: &Path,
    out_root: &Path,
    mode: PoolMode,
    kernel: usize,
    stride: usize,
) -> Result<CacheManifest> {
    let report = validate_cache(in_root);
    if !report.is_ok() {
        return Err(Error::cache(in_root, report.errors.join("; ")));
    }
    let cache = Cache::open(in_root)?;
    let src = cache.manifest().clone();
    if kernel == 0 || kernel > src.h.min(src.w) || stride == 0 {
        return Err(Error::InvalidParameter(format!(
            "kernel {kernel}, stride {stride} invalid for {}x{} grids",
            src.h, src.w
        )));
    }
    fs::create_dir_all(out_root).map_err(|e| Error::storage(out_root, e))?;
    let (oh, ow) = (pooled_len(src.h, kernel, stride), pooled_len(src.w, kernel, stride));
    let per_shard = SplitWriter::records_for_bytes(src.dtype, (oh, ow, src.d), 64 << 20);

    let mut manifest = src.clone();
    manifest.h = oh;
    manifest.w = ow;
    manifest.pooling = Some(PoolingNote { mode, kernel, stride });
    for (split, &count) in &src.splits {
        let mut writer = SplitWriter::new(out_root, split, src.dtype, per_shard);
        for i in 0..count as usize {
            let rec = cache.read(split, i)?;
            let grid = pool(&rec.grid, mode, kernel, stride)?;
            writer.push(FeatureRecord {
                cls: rec.cls,
                grid,
                label: rec.label,
            })?;
        }
        let written = writer.finish()?;
        manifest.splits.insert(split.clone(), written);
    }
    // Statistics are recomputed on the pooled grids, then the manifest lands last.
    manifest.normalization = None;
    manifest.write(out_root)?;
    if src.normalization.is_some() {
        let pooled = Cache::open(out_root)?;
        let stats_split = if pooled.has_split("train") {
            "train".to_string()
        } else {
            src.splits.keys().next().cloned().unwrap_or_default()
        };
        manifest.normalization = Some(channel_stats(&pooled, &stats_split)?);
        manifest.write(out_root)?;
    }
    Ok(manifest)
}
