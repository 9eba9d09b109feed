//! Cached feature records on disk.
//!
//! A cache is a directory holding `manifest.json` and one or more shard files
//! per split, named `<split>-<nnnn>.lfta`. A shard is a fixed 32-byte header
//! followed by fixed-size records, all little-endian:
//!
//! ```text
//! 0   magic "LFTA"
//! 4   u32 version (1)
//! 8   u8  dtype (0 = f32, 1 = f16), 3 reserved bytes
//! 12  u32 d
//! 16  u32 h
//! 20  u32 w
//! 24  u64 record_count
//! 32  records: [label u32][cls: d values][grid: h*w*d values, row-major (row, col, channel)]
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::PoolMode;
use crate::tensor::Buffer;

pub const MAGIC: [u8; 4] = *b"LFTA";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SHARD_EXT: &str = "lfta";

/// Upper bound on the staging buffer used when decoding a record.
const MAX_STAGING_BYTES: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    /// Round `v` to this storage precision and back.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F16 => f16::from_f64(v).to_f64(),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
        })
    }
}

/// Spatial grid of `h * w` feature tokens with `d` channels each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    h: usize,
    w: usize,
    d: usize,
    values: Buffer,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_buffer(h, w, d, Buffer::from_vec(values))
    }

    pub fn from_buffer(h: usize, w: usize, d: usize, values: Buffer) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid dimensions must be positive, got {h}x{w}x{d}"
            )));
        }
        if values.len() != h * w * d {
            return Err(Error::ShapeMismatch(format!(
                "grid {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite grid value at flat index {i}"
            )));
        }
        Ok(Self { h, w, d, values })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        assert!(h > 0 && w > 0 && d > 0);
        Self {
            h,
            w,
            d,
            values: Buffer::zeros(h * w * d),
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn buffer(&self) -> &Buffer {
        &self.values
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.w + c) * self.d;
        &self.values[o..o + self.d]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let o = (r * self.w + c) * self.d;
        &mut self.values[o..o + self.d]
    }

    pub fn bits_eq(&self, other: &FeatureGrid) -> bool {
        self.shape() == other.shape() && self.values.bits_eq(&other.values)
    }
}

/// One cached sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub cls: Buffer,
    pub grid: FeatureGrid,
    pub label: u32,
}

impl FeatureRecord {
    pub fn new(cls: Vec<f64>, grid: FeatureGrid, label: u32) -> Result<Self> {
        if cls.len() != grid.d() {
            return Err(Error::ShapeMismatch(format!(
                "cls has {} channels, grid has {}",
                cls.len(),
                grid.d()
            )));
        }
        if let Some(i) = cls.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite cls value at index {i}"
            )));
        }
        Ok(Self {
            cls: Buffer::from_vec(cls),
            grid,
            label,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.grid.shape()
    }

    pub fn bits_eq(&self, other: &FeatureRecord) -> bool {
        self.label == other.label && self.cls.bits_eq(&other.cls) && self.grid.bits_eq(&other.grid)
    }
}

/// Identity of whatever produced the features. Metadata only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub name: String,
    pub param_count: u64,
    pub patch_size: u32,
    pub source_image_size: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingNote {
    pub mode: PoolMode,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub dataset_name: String,
    pub class_names: Vec<String>,
    pub provider: ProviderDescriptor,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub dtype: Dtype,
    pub splits: BTreeMap<String, u64>,
    #[serde(default)]
    pub pooling: Option<PoolingNote>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    /// Free-text note on which layer of the provider the features come from.
    #[serde(default)]
    pub feature_layer: Option<String>,
}

impl CacheManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }

    /// Write-temp-then-rename so readers never observe a partial manifest.
    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let tmp = root.join(format!(".{MANIFEST_FILE}.tmp"));
        let json = serde_json::to_vec_pretty(self).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&tmp, json).map_err(|e| Error::storage(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::storage(&path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardHeader {
    pub dtype: Dtype,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub record_count: u64,
}

impl ShardHeader {
    pub fn values_per_record(&self) -> usize {
        self.d + self.h * self.w * self.d
    }

    pub fn record_bytes(&self) -> u64 {
        4 + (self.values_per_record() * self.dtype.bytes()) as u64
    }

    pub fn record_offset(&self, index: u64) -> u64 {
        HEADER_LEN + index * self.record_bytes()
    }

    pub fn file_len(&self) -> u64 {
        self.record_offset(self.record_count)
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        b[8] = self.dtype.code();
        b[12..16].copy_from_slice(&(self.d as u32).to_le_bytes());
        b[16..20].copy_from_slice(&(self.h as u32).to_le_bytes());
        b[20..24].copy_from_slice(&(self.w as u32).to_le_bytes());
        b[24..32].copy_from_slice(&self.record_count.to_le_bytes());
        b
    }

    fn decode(path: &Path, b: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        if b[0..4] != MAGIC {
            return Err(Error::corrupt(path, format!("bad magic {:?}", &b[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::corrupt(path, format!("unsupported version {version}")));
        }
        let dtype = Dtype::from_code(b[8])
            .ok_or_else(|| Error::corrupt(path, format!("unknown dtype code {}", b[8])))?;
        let (d, h, w) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::corrupt(path, format!("zero dimension {d}x{h}x{w}")));
        }
        let record_count = u64::from_le_bytes(b[24..32].try_into().unwrap());
        Ok(Self {
            dtype,
            d,
            h,
            w,
            record_count,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardSummary {
    pub record_count: u64,
    pub byte_length: u64,
}

fn check_record(rec: &FeatureRecord, shape: (usize, usize, usize), dtype: Dtype, i: usize) -> Result<()> {
    if rec.shape() != shape || rec.cls.len() != shape.2 {
        return Err(Error::ShapeMismatch(format!(
            "record {i} has shape {:?}, expected {:?}",
            rec.shape(),
            shape
        )));
    }
    let bad = rec
        .cls
        .iter()
        .chain(rec.grid.values())
        .position(|&v| !dtype.quantize(v).is_finite());
    if let Some(j) = bad {
        return Err(Error::InvalidValue(format!(
            "record {i} value {j} is not finite in {dtype}"
        )));
    }
    Ok(())
}

fn encode_values(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F32 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F16 => values
            .iter()
            .for_each(|&v| out.extend_from_slice(&f16::from_f64(v).to_le_bytes())),
    }
}

/// Write `records` as a single shard at `path`.
pub fn write_shard(records: &[FeatureRecord], dtype: Dtype, path: &Path) -> Result<ShardSummary> {
    let shape = match records.first() {
        Some(r) => r.shape(),
        None => {
            return Err(Error::ShapeMismatch(
                "cannot infer shard shape from zero records".into(),
            ))
        }
    };
    for (i, rec) in records.iter().enumerate() {
        check_record(rec, shape, dtype, i)?;
    }
    let (h, w, d) = shape;
    let header = ShardHeader {
        dtype,
        d,
        h,
        w,
        record_count: records.len() as u64,
    };
    let file = File::create(path).map_err(|e| Error::storage(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::storage(path, e);
    out.write_all(&header.encode()).map_err(io)?;
    let mut scratch = Vec::with_capacity(header.record_bytes() as usize);
    for rec in records {
        scratch.clear();
        scratch.extend_from_slice(&rec.label.to_le_bytes());
        encode_values(&mut scratch, &rec.cls, dtype);
        encode_values(&mut scratch, rec.grid.values(), dtype);
        out.write_all(&scratch).map_err(io)?;
    }
    out.flush().map_err(io)?;
    out.get_ref().sync_all().map_err(io)?;
    Ok(ShardSummary {
        record_count: header.record_count,
        byte_length: header.file_len(),
    })
}

/// An open, immutable shard. Reads are positional, so `&Shard` may be shared
/// between threads.
#[derive(Debug)]
pub struct Shard {
    path: PathBuf,
    file: File,
    header: ShardHeader,
}

impl Shard {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::storage(path, e))?;
        let len = file.metadata().map_err(|e| Error::storage(path, e))?.len();
        if len < HEADER_LEN {
            return Err(Error::corrupt(path, format!("file is {len} bytes, shorter than header")));
        }
        let mut raw = [0u8; HEADER_LEN as usize];
        file.read_exact_at(&mut raw, 0)
            .map_err(|e| Error::storage(path, e))?;
        let header = ShardHeader::decode(path, &raw)?;
        if len < header.file_len() {
            return Err(Error::corrupt(
                path,
                format!(
                    "truncated: {len} bytes on disk, header implies {}",
                    header.file_len()
                ),
            ));
        }
        if len > header.file_len() {
            return Err(Error::corrupt(
                path,
                format!(
                    "{} trailing bytes beyond {} declared records",
                    len - header.file_len(),
                    header.record_count
                ),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.header.record_count
    }

    pub fn is_empty(&self) -> bool {
        self.header.record_count == 0
    }

    fn check_index(&self, index: u64) -> Result<()> {
        if index >= self.header.record_count {
            return Err(Error::IndexError {
                index: index as usize,
                len: self.header.record_count as usize,
            });
        }
        Ok(())
    }

    fn read_at(&self, buf: &mut [u8], offset: u64) -> Result<()> {
        self.file.read_exact_at(buf, offset).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::corrupt(&self.path, format!("truncated at offset {offset}"))
            } else {
                Error::storage(&self.path, e)
            }
        })
    }

    pub fn read_label(&self, index: u64) -> Result<u32> {
        self.check_index(index)?;
        let mut b = [0u8; 4];
        self.read_at(&mut b, self.header.record_offset(index))?;
        Ok(u32::from_le_bytes(b))
    }

    /// Decode record `index`, widening stored values to `f64`.
    ///
    /// Payload bytes pass through a staging buffer of at most one record (and
    /// at most 64 KiB), so the only per-call allocation that scales with the
    /// record is the returned record itself.
    pub fn read_record(&self, index: u64) -> Result<FeatureRecord> {
        self.check_index(index)?;
        let h = &self.header;
        let offset = h.record_offset(index);
        let label = self.read_label(index)?;

        let elem = h.dtype.bytes();
        let total = h.values_per_record();
        let mut values = Vec::with_capacity(total);
        let chunk_elems = (MAX_STAGING_BYTES / elem).min(total).max(1);
        let mut staging = vec![0u8; chunk_elems * elem];
        let mut pos = offset + 4;
        let mut remaining = total;
        while remaining > 0 {
            let n = remaining.min(chunk_elems);
            let buf = &mut staging[..n * elem];
            self.read_at(buf, pos)?;
            match h.dtype {
                Dtype::F32 => values.extend(
                    buf.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64),
                ),
                Dtype::F16 => values.extend(
                    buf.chunks_exact(2)
                        .map(|b| f16::from_le_bytes(b.try_into().unwrap()).to_f64()),
                ),
            }
            pos += (n * elem) as u64;
            remaining -= n;
        }
        let grid_values = values.split_off(h.d);
        let grid = FeatureGrid::new(h.h, h.w, h.d, grid_values)
            .map_err(|e| Error::corrupt(&self.path, format!("record {index}: {e}")))?;
        FeatureRecord::new(values, grid, label)
            .map_err(|e| Error::corrupt(&self.path, format!("record {index}: {e}")))
    }
}

pub fn shard_file_name(split: &str, n: usize) -> String {
    format!("{split}-{n:04}.{SHARD_EXT}")
}

/// Shard files of `split` under `root`, sorted by shard number.
pub fn discover_shards(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::storage(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::storage(root, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(n) = parse_shard_name(name).filter(|(s, _)| *s == split).map(|(_, n)| n) {
            found.push((n, entry.path()));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// `"<split>-<nnnn>.lfta"` → `(split, nnnn)`.
pub fn parse_shard_name(name: &str) -> Option<(&str, usize)> {
    let stem = name.strip_suffix(&format!(".{SHARD_EXT}"))?;
    let (split, num) = stem.rsplit_once('-')?;
    if num.len() != 4 || !num.bytes().all(|b| b.is_ascii_digit()) || split.is_empty() {
        return None;
    }
    Some((split, num.parse().ok()?))
}

/// Writes one split as a sequence of shards of at most `records_per_shard`.
pub struct SplitWriter<'a> {
    root: &'a Path,
    split: String,
    dtype: Dtype,
    records_per_shard: usize,
    pending: Vec<FeatureRecord>,
    shards_written: usize,
    records_written: u64,
}

impl<'a> SplitWriter<'a> {
    pub fn new(root: &'a Path, split: &str, dtype: Dtype, records_per_shard: usize) -> Self {
        Self {
            root,
            split: split.to_string(),
            dtype,
            records_per_shard: records_per_shard.max(1),
            pending: Vec::new(),
            shards_written: 0,
            records_written: 0,
        }
    }

    /// Records per shard such that a shard stays near `target_bytes`.
    pub fn records_for_bytes(dtype: Dtype, shape: (usize, usize, usize), target_bytes: u64) -> usize {
        let (h, w, d) = shape;
        let rec = 4 + ((d + h * w * d) * dtype.bytes()) as u64;
        (target_bytes / rec).max(1) as usize
    }

    pub fn push(&mut self, rec: FeatureRecord) -> Result<()> {
        self.pending.push(rec);
        if self.pending.len() >= self.records_per_shard {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let path = self
            .root
            .join(shard_file_name(&self.split, self.shards_written));
        let summary = write_shard(&self.pending, self.dtype, &path)?;
        self.records_written += summary.record_count;
        self.shards_written += 1;
        self.pending.clear();
        Ok(())
    }

    /// Flush the final partial shard and return the split's record count.
    pub fn finish(mut self) -> Result<u64> {
        self.flush()?;
        Ok(self.records_written)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Check manifest/shard consistency. Problems are reported, never raised.
pub fn validate_cache(root: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        report
            .errors
            .push(format!("manifest missing: {}", manifest_path.display()));
        return report;
    }
    let manifest = match CacheManifest::read(root) {
        Ok(m) => m,
        Err(e) => {
            report.errors.push(format!("manifest unreadable: {e}"));
            return report;
        }
    };
    if manifest.format_version != FORMAT_VERSION {
        report.errors.push(format!(
            "manifest format_version {} unsupported",
            manifest.format_version
        ));
    }
    if manifest.splits.is_empty() {
        report.errors.push("manifest lists no splits".into());
    }
    if manifest.d == 0 || manifest.h == 0 || manifest.w == 0 {
        report.errors.push(format!(
            "manifest shape {}x{}x{} has a zero dimension",
            manifest.h, manifest.w, manifest.d
        ));
    }
    if manifest.class_names.is_empty() {
        report.errors.push("manifest lists no classes".into());
    }
    if let Some(norm) = &manifest.normalization {
        if norm.mean.len() != manifest.d || norm.std.len() != manifest.d {
            report.errors.push(format!(
                "normalization has {}/{} channels, manifest d = {}",
                norm.mean.len(),
                norm.std.len(),
                manifest.d
            ));
        }
    }
    let classes = manifest.num_classes() as u64;

    for (split, &expected) in &manifest.splits {
        let paths = match discover_shards(root, split) {
            Ok(p) => p,
            Err(e) => {
                report.errors.push(format!("split {split}: {e}"));
                continue;
            }
        };
        if paths.is_empty() {
            if expected == 0 {
                report.warnings.push(format!("split {split} is empty"));
            } else {
                report
                    .errors
                    .push(format!("split {split}: no shard files found"));
            }
            continue;
        }
        let mut total = 0u64;
        let mut unreadable = false;
        for path in &paths {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let shard = match Shard::open(path) {
                Ok(s) => s,
                Err(e) => {
                    report.errors.push(format!("shard {name}: {e}"));
                    unreadable = true;
                    continue;
                }
            };
            let h = *shard.header();
            if (h.d, h.h, h.w) != (manifest.d, manifest.h, manifest.w) {
                report.errors.push(format!(
                    "shard {name}: shape mismatch, header (d={}, h={}, w={}) vs manifest (d={}, h={}, w={})",
                    h.d, h.h, h.w, manifest.d, manifest.h, manifest.w
                ));
            }
            if h.dtype != manifest.dtype {
                report.errors.push(format!(
                    "shard {name}: dtype {} but manifest says {}",
                    h.dtype, manifest.dtype
                ));
            }
            total += h.record_count;
            let mut bad_labels = 0u64;
            let mut first_bad = None;
            for i in 0..h.record_count {
                match shard.read_label(i) {
                    Ok(l) if (l as u64) < classes => {}
                    Ok(l) => {
                        bad_labels += 1;
                        first_bad.get_or_insert((i, l));
                    }
                    Err(e) => {
                        report.errors.push(format!("shard {name}: {e}"));
                        break;
                    }
                }
            }
            if let Some((i, l)) = first_bad {
                report.errors.push(format!(
                    "shard {name}: {bad_labels} label(s) out of range, first at record {i} (label {l} >= {classes} classes)"
                ));
            }
        }
        // an unreadable shard has no trustworthy count
        if !unreadable && total != expected {
            report.errors.push(format!(
                "split {split}: record count mismatch, manifest says {expected}, shards hold {total}"
            ));
        }
        if expected == 0 {
            report.warnings.push(format!("split {split} is empty"));
        }
    }

    if let Ok(entries) = fs::read_dir(root) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some((split, _)) = parse_shard_name(&name) {
                if !manifest.splits.contains_key(split) {
                    report
                        .warnings
                        .push(format!("shard {name} belongs to split {split} absent from manifest"));
                }
            }
        }
    }
    report
}

/// A validated cache opened for reading.
#[derive(Debug)]
pub struct Cache {
    root: PathBuf,
    manifest: CacheManifest,
    splits: BTreeMap<String, Vec<Shard>>,
}

impl Cache {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::cache(root, "not a directory"));
        }
        let report = validate_cache(root);
        if !report.is_ok() {
            return Err(Error::cache(root, report.errors.join("; ")));
        }
        let manifest = CacheManifest::read(root)?;
        let mut splits = BTreeMap::new();
        for split in manifest.splits.keys() {
            let shards = discover_shards(root, split)?
                .iter()
                .map(|p| Shard::open(p))
                .collect::<Result<Vec<_>>>()?;
            splits.insert(split.clone(), shards);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            splits,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.splits.contains_key(split)
    }

    pub fn split_len(&self, split: &str) -> usize {
        self.splits
            .get(split)
            .map(|s| s.iter().map(|sh| sh.len() as usize).sum())
            .unwrap_or(0)
    }

    fn locate(&self, split: &str, index: usize) -> Result<(&Shard, u64)> {
        let shards = self
            .splits
            .get(split)
            .ok_or_else(|| Error::cache(&self.root, format!("no split named `{split}`")))?;
        let mut i = index as u64;
        for shard in shards {
            if i < shard.len() {
                return Ok((shard, i));
            }
            i -= shard.len();
        }
        Err(Error::IndexError {
            index,
            len: self.split_len(split),
        })
    }

    pub fn read(&self, split: &str, index: usize) -> Result<FeatureRecord> {
        let (shard, i) = self.locate(split, index)?;
        shard.read_record(i)
    }

    pub fn read_label(&self, split: &str, index: usize) -> Result<u32> {
        let (shard, i) = self.locate(split, index)?;
        shard.read_label(i)
    }
}

/// Per-channel mean and population std over every grid token of a split.
pub fn channel_stats(cache: &Cache, split: &str) -> Result<Normalization> {
    let d = cache.manifest().d;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for i in 0..cache.split_len(split) {
        let rec = cache.read(split, i)?;
        for tok in rec.grid.values().chunks_exact(d) {
            for c in 0..d {
                sum[c] += tok[c];
                sq[c] += tok[c] * tok[c];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt())
        .collect();
    Ok(Normalization { mean, std })
}
