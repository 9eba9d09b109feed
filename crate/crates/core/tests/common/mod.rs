//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance gate.
#![allow(dead_code, clippy::needless_range_loop)]

use std::path::Path;

use loffta::model::{ModelConfig, ModelDims};
use loffta::provider::{build_cache, SyntheticSpec};
use loffta::{FeatureGrid, FeatureRecord, Params, RngStream};

pub type Cells = Vec<Vec<Vec<f64>>>;

pub fn random_grid(rng: &mut RngStream, h: usize, w: usize, d: usize) -> FeatureGrid {
    let v = (0..h * w * d).map(|_| rng.normal()).collect();
    FeatureGrid::new(h, w, d, v).unwrap()
}

pub fn random_record(rng: &mut RngStream, h: usize, w: usize, d: usize, classes: u32) -> FeatureRecord {
    let cls = (0..d).map(|_| rng.normal()).collect();
    let grid = random_grid(rng, h, w, d);
    let label = rng.below(classes as u64) as u32;
    FeatureRecord::new(cls, grid, label).unwrap()
}

/// Random shape with each side in `1..=max_side` and channels in `1..=max_d`.
pub fn random_shape(rng: &mut RngStream, max_side: u64, max_d: u64) -> (usize, usize, usize) {
    (
        1 + rng.below(max_side) as usize,
        1 + rng.below(max_side) as usize,
        1 + rng.below(max_d) as usize,
    )
}

pub fn to_cells(g: &FeatureGrid) -> Cells {
    let (h, w, _) = g.shape();
    (0..h)
        .map(|r| (0..w).map(|c| g.cell(r, c).to_vec()).collect())
        .collect()
}

pub fn from_cells(cells: &Cells) -> Vec<f64> {
    cells.iter().flatten().flatten().copied().collect()
}

fn empty_like(cells: &Cells) -> Cells {
    let d = cells[0][0].len();
    vec![vec![vec![0.0; d]; cells[0].len()]; cells.len()]
}

/// Round to the nearest integer, exact halves going down.
pub fn round_half_down(x: f64) -> i64 {
    let f = x.floor();
    if x - f > 0.5 + 1e-9 {
        f as i64 + 1
    } else {
        f as i64
    }
}

fn fetch(cells: &Cells, r: i64, c: i64) -> Option<&Vec<f64>> {
    if r < 0 || c < 0 {
        return None;
    }
    cells.get(r as usize)?.get(c as usize)
}

/// Forward-mapped mirror.
pub fn flip_oracle(cells: &Cells, horizontal: bool) -> Cells {
    let (h, w) = (cells.len(), cells[0].len());
    let mut out = empty_like(cells);
    for r in 0..h {
        for c in 0..w {
            let (tr, tc) = if horizontal { (r, w - 1 - c) } else { (h - 1 - r, c) };
            out[tr][tc] = cells[r][c].clone();
        }
    }
    out
}

/// Forward-mapped shift; cells pushed off the grid are dropped.
pub fn translate_oracle(cells: &Cells, dr: i64, dc: i64) -> Cells {
    let (h, w) = (cells.len() as i64, cells[0].len() as i64);
    let mut out = empty_like(cells);
    for r in 0..h {
        for c in 0..w {
            let (tr, tc) = (r + dr, c + dc);
            if (0..h).contains(&tr) && (0..w).contains(&tc) {
                out[tr as usize][tc as usize] = cells[r as usize][c as usize].clone();
            }
        }
    }
    out
}

/// Rotation through polar coordinates: output offset `(rho, phi)` from the
/// center samples the input at `(rho, phi - angle)`, with x to the right and
/// y downward, so positive angles are clockwise on screen.
pub fn rotate_oracle(cells: &Cells, angle_deg: f64) -> Cells {
    let (h, w) = (cells.len(), cells[0].len());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = empty_like(cells);
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let rho = dx.hypot(dy);
            let phi = dy.atan2(dx) - angle_deg.to_radians();
            let sy = cy + rho * phi.sin();
            let sx = cx + rho * phi.cos();
            if let Some(v) = fetch(cells, round_half_down(sy), round_half_down(sx)) {
                out[r][c] = v.clone();
            }
        }
    }
    out
}

/// Shear by the inverse of the matrix `[[1, ty], [tx, 1]]` acting on
/// `(row, col)` offsets from the center.
pub fn shear_oracle(cells: &Cells, ax_deg: f64, ay_deg: f64) -> Cells {
    let (h, w) = (cells.len(), cells[0].len());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let tx = if ax_deg.abs() == 45.0 { ax_deg.signum() } else { ax_deg.to_radians().tan() };
    let ty = if ay_deg.abs() == 45.0 { ay_deg.signum() } else { ay_deg.to_radians().tan() };
    let mut out = empty_like(cells);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 - cy, c as f64 - cx);
            let sr = r as f64 - ty * x;
            let sc = c as f64 - tx * y;
            if let Some(v) = fetch(cells, round_half_down(sr), round_half_down(sc)) {
                out[r][c] = v.clone();
            }
        }
    }
    out
}

/// Tent-filter weights of source samples `0..n_in` for output index `i`.
fn tent_weights(i: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    (0..n_in)
        .map(|j| (1.0 - (x - j as f64).abs()).max(0.0))
        .collect()
}

/// Bilinear resample as a separable tent-filter sum over every source cell,
/// then center crop or zero pad back to the input size.
pub fn resize_oracle(cells: &Cells, scale: f64) -> Cells {
    let (h, w, d) = (cells.len(), cells[0].len(), cells[0][0].len());
    let nh = (h as f64 * scale).round() as usize;
    let nw = (w as f64 * scale).round() as usize;
    let mut big = vec![vec![vec![0.0; d]; nw]; nh];
    for (i, row) in big.iter_mut().enumerate() {
        let wr = tent_weights(i, h, nh);
        for (j, cell) in row.iter_mut().enumerate() {
            let wc = tent_weights(j, w, nw);
            for (sr, a) in wr.iter().enumerate() {
                for (sc, b) in wc.iter().enumerate() {
                    for k in 0..d {
                        cell[k] += a * b * cells[sr][sc][k];
                    }
                }
            }
        }
    }
    let off = |n: usize, m: usize| -> i64 {
        if m >= n {
            ((m - n) / 2) as i64
        } else {
            -(((n - m) / 2) as i64)
        }
    };
    let (or, oc) = (off(h, nh), off(w, nw));
    let mut out = empty_like(cells);
    for r in 0..h {
        for c in 0..w {
            if let Some(v) = fetch(&big, r as i64 + or, c as i64 + oc) {
                out[r][c] = v.clone();
            }
        }
    }
    out
}

/// Window scan over every output cell.
pub fn pool_oracle(cells: &Cells, max: bool, kernel: usize, stride: usize) -> Cells {
    let (h, w, d) = (cells.len(), cells[0].len(), cells[0][0].len());
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = vec![vec![vec![0.0; d]; ow]; oh];
    for i in 0..oh {
        for j in 0..ow {
            for k in 0..d {
                let window: Vec<f64> = (0..kernel)
                    .flat_map(|a| (0..kernel).map(move |b| (a, b)))
                    .map(|(a, b)| cells[i * stride + a][j * stride + b][k])
                    .collect();
                out[i][j][k] = if max {
                    window.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    window.iter().sum::<f64>() / window.len() as f64
                };
            }
        }
    }
    out
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 4,
    }
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        d: 3,
        h: 2,
        w: 2,
        classes: 2,
    }
}

/// Overwrite every tensor with `N(0, std^2)` entries and LayerNorm gains
/// with `1 + N(0, std^2)`.
pub fn scramble(p: &mut Params, rng: &mut RngStream, std: f64) {
    for (name, t) in p.named_mut() {
        let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        for v in t.as_mut_slice() {
            *v = base + std * rng.normal();
        }
    }
}

pub fn synthetic_cache(spec: &SyntheticSpec) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    build_cache(spec, dir.path()).unwrap();
    dir
}

pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        train_per_class: 12,
        val_per_class: 4,
        test_per_class: 4,
        d: 6,
        h: 4,
        w: 4,
        ..Default::default()
    }
}

pub fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

type M = Vec<Vec<f64>>;

fn mm(a: &M, b: &M) -> M {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn rows_of(t: &loffta::Mat) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn add_bias(x: &mut M, b: &[f64]) {
    for row in x.iter_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn ln(x: &M, gain: &[f64], bias: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let m = row.len() as f64;
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            row.iter()
                .enumerate()
                .map(|(k, v)| gain[k] * (v - mean) / (var + 1e-6).sqrt() + bias[k])
                .collect()
        })
        .collect()
}

fn erf_gelu(x: f64) -> f64 {
    // erf by Simpson integration of exp(-t^2)
    let n = 2000;
    let b = x / std::f64::consts::SQRT_2;
    let hstep = b / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += f(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let erf = 2.0 / std::f64::consts::PI.sqrt() * s * hstep / 3.0;
    0.5 * x * (1.0 + erf)
}

/// Straight-line reimplementation of the classifier forward pass on one
/// record, using nested `Vec`s and scalar loops only.
pub fn forward_oracle(p: &Params, rec: &FeatureRecord) -> Vec<f64> {
    let m = p.config.embed_dim;
    let heads = p.config.heads;
    let dh = m / heads;
    let mut tokens: M = vec![rec.cls.to_vec()];
    let (h, w, _) = rec.grid.shape();
    for r in 0..h {
        for c in 0..w {
            tokens.push(rec.grid.cell(r, c).to_vec());
        }
    }
    let mut z = mm(&tokens, &rows_of(&p.proj.weight));
    add_bias(&mut z, p.proj.bias.as_slice());
    let mut x = ln(&z, p.proj.ln_gain.as_slice(), p.proj.ln_bias.as_slice());
    let cls = &p.classifier;
    for k in 0..m {
        x[0][k] += cls.learned_cls.as_slice()[k];
    }
    let pos = rows_of(&cls.pos_embed);
    for (row, prow) in x.iter_mut().zip(&pos) {
        for (v, pv) in row.iter_mut().zip(prow) {
            *v += pv;
        }
    }
    let n = x.len();
    for b in &cls.blocks {
        let y = ln(&x, b.ln1_gain.as_slice(), b.ln1_bias.as_slice());
        let mut qkv = mm(&y, &rows_of(&b.qkv_weight));
        add_bias(&mut qkv, b.qkv_bias.as_slice());
        let mut attn = vec![vec![0.0; m]; n];
        for hd in 0..heads {
            for i in 0..n {
                let mut scores = vec![0.0; n];
                for (j, s) in scores.iter_mut().enumerate() {
                    for e in 0..dh {
                        *s += qkv[i][hd * dh + e] * qkv[j][m + hd * dh + e];
                    }
                    *s /= (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = ex.iter().sum();
                for e in 0..dh {
                    attn[i][hd * dh + e] = (0..n).map(|j| ex[j] / tot * qkv[j][2 * m + hd * dh + e]).sum();
                }
            }
        }
        let mut o = mm(&attn, &rows_of(&b.attn_out_weight));
        add_bias(&mut o, b.attn_out_bias.as_slice());
        for i in 0..n {
            for k in 0..m {
                x[i][k] += o[i][k];
            }
        }
        let y = ln(&x, b.ln2_gain.as_slice(), b.ln2_bias.as_slice());
        let mut a = mm(&y, &rows_of(&b.fc1_weight));
        add_bias(&mut a, b.fc1_bias.as_slice());
        for row in a.iter_mut() {
            for v in row.iter_mut() {
                *v = erf_gelu(*v);
            }
        }
        let mut o = mm(&a, &rows_of(&b.fc2_weight));
        add_bias(&mut o, b.fc2_bias.as_slice());
        for i in 0..n {
            for k in 0..m {
                x[i][k] += o[i][k];
            }
        }
    }
    let y = ln(&x[..1].to_vec(), cls.norm_gain.as_slice(), cls.norm_bias.as_slice());
    let mut logits = mm(&y, &rows_of(&cls.head_weight));
    add_bias(&mut logits, cls.head_bias.as_slice());
    logits.remove(0)
}

/// Mean cross-entropy computed directly from logits.
pub fn mean_ce(rows: &[Vec<f64>], labels: &[u32]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(row, &y)| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[y as usize]
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Worst elementwise relative error between backward and central differences
/// over every parameter, counting only entries with `|analytic| > 1e-8`.
pub fn gradient_check(params: &Params, batch: &[FeatureRecord], step: f64) -> (f64, String, usize) {
    let labels: Vec<u32> = batch.iter().map(|r| r.label).collect();
    let (_, grads) = loffta::model::backward(params, batch, &labels).unwrap();
    let loss_at = |p: &Params| {
        let logits = loffta::model::forward(p, batch).unwrap();
        let rows: Vec<Vec<f64>> = (0..logits.rows()).map(|r| logits.row(r).to_vec()).collect();
        mean_ce(&rows, &labels)
    };
    let mut worst = (0.0, String::new(), 0);
    let mut probe = params.clone();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let grad_tensors = grads.tensors();
    for (ti, name) in names.iter().enumerate() {
        let len = grad_tensors[ti].len();
        for i in 0..len {
            let analytic = grad_tensors[ti].as_slice()[i];
            let orig = probe.tensors()[ti].as_slice()[i];
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig + step;
            let up = loss_at(&probe);
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig - step;
            let down = loss_at(&probe);
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            if analytic.abs() > 1e-8 {
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                if rel > worst.0 {
                    worst = (rel, name.clone(), i);
                }
            }
        }
    }
    worst
}

#[derive(Clone, Copy, Debug)]
pub enum Corruption {
    Magic,
    Count,
    Shape,
    LabelRange,
    Truncation,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::Magic,
        Corruption::Count,
        Corruption::Shape,
        Corruption::LabelRange,
        Corruption::Truncation,
    ];

    /// Text the validation report must contain for this corruption.
    pub fn expected(self) -> &'static str {
        match self {
            Corruption::Magic => "bad magic",
            Corruption::Count => "record count mismatch",
            Corruption::Shape => "shape mismatch",
            Corruption::LabelRange => "out of range",
            Corruption::Truncation => "truncated",
        }
    }
}

fn edit_manifest(root: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = root.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
}

/// Damage the cache at `root` in place; returns the shard touched, if any.
pub fn inject(root: &Path, kind: Corruption) -> Option<std::path::PathBuf> {
    let shard = loffta::store::discover_shards(root, "train").unwrap()[0].clone();
    match kind {
        Corruption::Magic => {
            let mut b = std::fs::read(&shard).unwrap();
            b[0] = b'X';
            std::fs::write(&shard, b).unwrap();
            Some(shard)
        }
        Corruption::Count => {
            edit_manifest(root, |v| {
                let n = v["splits"]["train"].as_u64().unwrap();
                v["splits"]["train"] = (n + 1).into();
            });
            None
        }
        Corruption::Shape => {
            edit_manifest(root, |v| {
                let d = v["d"].as_u64().unwrap();
                v["d"] = (d + 1).into();
                v["normalization"] = serde_json::Value::Null;
            });
            None
        }
        Corruption::LabelRange => {
            let classes = loffta::CacheManifest::read(root).unwrap().num_classes() as u32;
            let mut b = std::fs::read(&shard).unwrap();
            b[32..36].copy_from_slice(&classes.to_le_bytes());
            std::fs::write(&shard, b).unwrap();
            Some(shard)
        }
        Corruption::Truncation => {
            let b = std::fs::read(&shard).unwrap();
            std::fs::write(&shard, &b[..b.len() - 5]).unwrap();
            Some(shard)
        }
    }
}

/// Weights drawn at `N(0, 1/fan_in)` so every LN input keeps unit-order
/// variance; gains 1 and biases 0.
pub fn variance_preserving(config: ModelConfig, dims: ModelDims, seed: u64) -> Params {
    let mut p = Params::init(config, dims, seed).unwrap();
    let mut rng = RngStream::new(seed ^ 0xabc);
    for (name, t) in p.named_mut() {
        if name.ends_with(".weight") {
            let std = 1.0 / (t.rows() as f64).sqrt();
            t.as_mut_slice().iter_mut().for_each(|v| *v = std * rng.normal());
        }
    }
    p
}

/// First row breaking `|mean| <= 1e-6` or `|variance - 1| <= 1e-5`.
pub fn ln_violation(out: &loffta::Mat) -> Option<String> {
    for r in 0..out.rows() {
        let row = out.row(r);
        let m = row.len() as f64;
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        if mean.abs() > 1e-6 || (var - 1.0).abs() > 1e-5 {
            return Some(format!("row {r}: mean {mean:e}, variance {var}"));
        }
    }
    None
}
