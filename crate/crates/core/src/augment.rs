//! Tensor augmentations: geometric transforms and Gaussian noise applied to a
//! cached feature grid as if it were a low-resolution image with `d` channels.
//!
//! Every geometric operator keeps the input `(h, w, d)`. Output cells whose
//! inverse-mapped source falls outside the grid are the zero vector. Nearest
//! neighbour lookups resolve exact half-way ties toward the lower index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::store::{FeatureGrid, FeatureRecord};
use crate::tensor::Buffer;

/// Coordinates within this distance above a `.5` tie still count as the tie.
const TIE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Mirror columns: `(r, c) -> (r, w - 1 - c)`.
    Horizontal,
    /// Mirror rows: `(r, c) -> (h - 1 - r, c)`.
    Vertical,
}

/// Index of the nearest grid point to `x`, ties going down.
fn nearest(x: f64) -> i64 {
    (x - 0.5 - TIE_EPS).ceil() as i64
}

fn in_range(i: i64, n: usize) -> Option<usize> {
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// `tan` of an angle in degrees, exact at multiples of 45 within (-90, 90).
fn tan_deg(deg: f64) -> f64 {
    if deg == 0.0 {
        0.0
    } else if deg == 45.0 {
        1.0
    } else if deg == -45.0 {
        -1.0
    } else {
        deg.to_radians().tan()
    }
}

/// Build an output grid where each cell copies the input cell returned by
/// `src`, or stays zero when `src` yields `None`.
fn remap(g: &FeatureGrid, src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> FeatureGrid {
    let (h, w, d) = g.shape();
    let mut out = FeatureGrid::zeros(h, w, d);
    for r in 0..h {
        for c in 0..w {
            if let Some((sr, sc)) = src(r, c) {
                out.cell_mut(r, c).copy_from_slice(g.cell(sr, sc));
            }
        }
    }
    out
}

fn center(g: &FeatureGrid) -> (f64, f64) {
    ((g.h() as f64 - 1.0) / 2.0, (g.w() as f64 - 1.0) / 2.0)
}

pub fn flip(g: &FeatureGrid, axis: FlipAxis) -> FeatureGrid {
    let (h, w, _) = g.shape();
    match axis {
        FlipAxis::Horizontal => remap(g, |r, c| Some((r, w - 1 - c))),
        FlipAxis::Vertical => remap(g, |r, c| Some((h - 1 - r, c))),
    }
}

/// Nearest-neighbour rotation about the continuous grid center. Positive
/// angles turn the content clockwise with rows running downward, so
/// `rotate(g, 90)` equals a transpose followed by a horizontal flip on square
/// grids.
pub fn rotate(g: &FeatureGrid, angle_deg: f64) -> Result<FeatureGrid> {
    if !angle_deg.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "rotation angle must be finite, got {angle_deg}"
        )));
    }
    let (h, w, _) = g.shape();
    let (cy, cx) = center(g);
    let (s, co) = sin_cos_deg(angle_deg);
    Ok(remap(g, |r, c| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        let sr = cy + dy * co - dx * s;
        let sc = cx + dy * s + dx * co;
        Some((in_range(nearest(sr), h)?, in_range(nearest(sc), w)?))
    }))
}

/// Nearest-neighbour shear. The source of output `(r, c)` is column
/// `c - tan(angle_x) * (r - cy)` and row `r - tan(angle_y) * (c - cx)`.
pub fn shear(g: &FeatureGrid, angle_x_deg: f64, angle_y_deg: f64) -> Result<FeatureGrid> {
    for a in [angle_x_deg, angle_y_deg] {
        if !a.is_finite() || a.abs() >= 90.0 {
            return Err(Error::InvalidParameter(format!(
                "shear angle must lie in (-90, 90) degrees, got {a}"
            )));
        }
    }
    let (h, w, _) = g.shape();
    let (cy, cx) = center(g);
    let (tx, ty) = (tan_deg(angle_x_deg), tan_deg(angle_y_deg));
    Ok(remap(g, |r, c| {
        let sc = c as f64 - tx * (r as f64 - cy);
        let sr = r as f64 - ty * (c as f64 - cx);
        Some((in_range(nearest(sr), h)?, in_range(nearest(sc), w)?))
    }))
}

/// Shift content by `(dr, dc)` cells.
pub fn translate(g: &FeatureGrid, dr: i64, dc: i64) -> FeatureGrid {
    let (h, w, _) = g.shape();
    remap(g, |r, c| {
        Some((
            in_range(r as i64 - dr, h)?,
            in_range(c as i64 - dc, w)?,
        ))
    })
}

/// Output size of the resampling step of [`resize`].
pub fn resized_len(len: usize, scale: f64) -> usize {
    (len as f64 * scale).round() as usize
}

/// Source coordinate and interpolation weight for output index `i` when
/// resampling `n_in` samples to `n_out` with half-pixel centers.
fn linear_source(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let ratio = n_in as f64 / n_out as f64;
    let x = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
    let i0 = (x.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, x - i0 as f64)
}

/// Offset mapping an output index onto the resampled axis: positive crops,
/// negative pads.
fn crop_offset(n: usize, resized: usize) -> i64 {
    if resized >= n {
        ((resized - n) / 2) as i64
    } else {
        -(((n - resized) / 2) as i64)
    }
}

/// Bilinear resample to `round(h*scale) x round(w*scale)`, then center-crop
/// or zero-pad back to `h x w`.
pub fn resize(g: &FeatureGrid, scale: f64) -> Result<FeatureGrid> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "resize scale must be positive and finite, got {scale}"
        )));
    }
    let (h, w, d) = g.shape();
    let (nh, nw) = (resized_len(h, scale), resized_len(w, scale));
    if nh == 0 || nw == 0 {
        return Err(Error::InvalidParameter(format!(
            "scale {scale} shrinks a {h}x{w} grid to {nh}x{nw}"
        )));
    }
    let (off_r, off_c) = (crop_offset(h, nh), crop_offset(w, nw));
    let mut out = FeatureGrid::zeros(h, w, d);
    for r in 0..h {
        let Some(rr) = in_range(r as i64 + off_r, nh) else { continue };
        let (r0, r1, fy) = linear_source(rr, h, nh);
        for c in 0..w {
            let Some(cc) = in_range(c as i64 + off_c, nw) else { continue };
            let (c0, c1, fx) = linear_source(cc, w, nw);
            let (a, b) = (g.cell(r0, c0), g.cell(r0, c1));
            let (p, q) = (g.cell(r1, c0), g.cell(r1, c1));
            let cell = out.cell_mut(r, c);
            for k in 0..d {
                // a + f*(b - a) keeps constant inputs exact
                let top = a[k] + fx * (b[k] - a[k]);
                let bottom = p[k] + fx * (q[k] - p[k]);
                cell[k] = top + fy * (bottom - top);
            }
        }
    }
    Ok(out)
}

/// Population standard deviation over the grid and cls values together.
pub fn record_std(g: &FeatureGrid, cls: &[f64]) -> f64 {
    let n = (g.values().len() + cls.len()) as f64;
    let mean = g.values().iter().chain(cls).sum::<f64>() / n;
    let var = g
        .values()
        .iter()
        .chain(cls)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Add independent `N(0, sigma^2)` noise to every grid and cls element, with
/// `sigma = sigma_rel * record_std`. Grid elements draw first, then cls.
pub fn add_noise(
    g: &FeatureGrid,
    cls: &[f64],
    sigma_rel: f64,
    rng: &mut RngStream,
) -> Result<(FeatureGrid, Buffer)> {
    if !sigma_rel.is_finite() || sigma_rel < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "noise sigma_rel must be finite and >= 0, got {sigma_rel}"
        )));
    }
    let mut grid = g.clone();
    let mut out_cls = Buffer::from_slice(cls);
    let sigma = sigma_rel * record_std(g, cls);
    if sigma == 0.0 {
        return Ok((grid, out_cls));
    }
    for v in grid.values_mut().iter_mut().chain(out_cls.iter_mut()) {
        *v += sigma * rng.normal();
    }
    Ok((grid, out_cls))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnabledTransforms {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotate: bool,
    pub shear: bool,
    pub resize: bool,
    pub translate: bool,
    pub noise: bool,
}

impl Default for EnabledTransforms {
    fn default() -> Self {
        Self::all(true)
    }
}

impl EnabledTransforms {
    pub fn all(on: bool) -> Self {
        Self {
            flip_h: on,
            flip_v: on,
            rotate: on,
            shear: on,
            resize: on,
            translate: on,
            noise: on,
        }
    }
}

/// Probabilities and magnitude ranges for the stochastic transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub rotate_max_deg: f64,
    pub shear_max_deg: f64,
    pub translate_max_frac: f64,
    pub scale_range: [f64; 2],
    pub noise_sigma_rel: f64,
    pub enabled: EnabledTransforms,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            rotate_max_deg: 15.0,
            shear_max_deg: 10.0,
            translate_max_frac: 0.1,
            scale_range: [0.8, 1.25],
            noise_sigma_rel: 0.1,
            enabled: EnabledTransforms::default(),
        }
    }
}

/// Concrete parameters drawn for one record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotate_deg: Option<f64>,
    pub shear_deg: Option<(f64, f64)>,
    pub scale: Option<f64>,
    pub translate: Option<(i64, i64)>,
    pub noise_sigma_rel: Option<f64>,
}

impl AugmentationPolicy {
    /// A policy that leaves records untouched.
    pub fn none() -> Self {
        Self {
            enabled: EnabledTransforms::all(false),
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.enabled == EnabledTransforms::all(false)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        for (name, p) in [("p_flip_h", self.p_flip_h), ("p_flip_v", self.p_flip_v)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, m) in [
            ("rotate_max_deg", self.rotate_max_deg),
            ("shear_max_deg", self.shear_max_deg),
            ("noise_sigma_rel", self.noise_sigma_rel),
        ] {
            if !m.is_finite() || m < 0.0 {
                return bad(format!("{name} = {m} must be finite and >= 0"));
            }
        }
        if self.shear_max_deg >= 90.0 {
            return bad(format!("shear_max_deg = {} must be < 90", self.shear_max_deg));
        }
        if !(0.0..1.0).contains(&self.translate_max_frac) {
            return bad(format!(
                "translate_max_frac = {} must lie in [0, 1)",
                self.translate_max_frac
            ));
        }
        let [lo, hi] = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= 1.0 && 1.0 <= hi) {
            return bad(format!("scale_range [{lo}, {hi}] must satisfy 0 < lo <= 1 <= hi"));
        }
        Ok(())
    }

    /// Draw per-record parameters for a `h x w` grid. Each enabled transform
    /// consumes a fixed number of uniforms, in application order: flip_h (1),
    /// flip_v (1), rotate (1), shear (2: x then y), resize (1), translate
    /// (2: rows then cols).
    pub fn sample(&self, h: usize, w: usize, rng: &mut RngStream) -> AugmentParams {
        let e = &self.enabled;
        let mut p = AugmentParams::default();
        if e.flip_h {
            p.flip_h = rng.uniform() < self.p_flip_h;
        }
        if e.flip_v {
            p.flip_v = rng.uniform() < self.p_flip_v;
        }
        if e.rotate {
            p.rotate_deg = Some(rng.uniform_range(-self.rotate_max_deg, self.rotate_max_deg));
        }
        if e.shear {
            let ax = rng.uniform_range(-self.shear_max_deg, self.shear_max_deg);
            let ay = rng.uniform_range(-self.shear_max_deg, self.shear_max_deg);
            p.shear_deg = Some((ax, ay));
        }
        if e.resize {
            p.scale = Some(rng.uniform_range(self.scale_range[0], self.scale_range[1]));
        }
        if e.translate {
            let f = self.translate_max_frac;
            let dr = (rng.uniform_range(-f, f) * h as f64).round() as i64;
            let dc = (rng.uniform_range(-f, f) * w as f64).round() as i64;
            p.translate = Some((dr, dc));
        }
        if e.noise && self.noise_sigma_rel > 0.0 {
            p.noise_sigma_rel = Some(self.noise_sigma_rel);
        }
        p
    }
}

impl AugmentParams {
    /// Apply in the fixed order flip_h, flip_v, rotate, shear, resize,
    /// translate, noise. Noise draws its normals from `rng`.
    pub fn apply(&self, rec: &FeatureRecord, rng: &mut RngStream) -> Result<FeatureRecord> {
        let mut grid = rec.grid.clone();
        if self.flip_h {
            grid = flip(&grid, FlipAxis::Horizontal);
        }
        if self.flip_v {
            grid = flip(&grid, FlipAxis::Vertical);
        }
        if let Some(a) = self.rotate_deg {
            grid = rotate(&grid, a)?;
        }
        if let Some((ax, ay)) = self.shear_deg {
            grid = shear(&grid, ax, ay)?;
        }
        if let Some(s) = self.scale {
            grid = resize(&grid, s)?;
        }
        if let Some((dr, dc)) = self.translate {
            grid = translate(&grid, dr, dc);
        }
        let cls = match self.noise_sigma_rel {
            Some(sigma) => {
                let (g, c) = add_noise(&grid, &rec.cls, sigma, rng)?;
                grid = g;
                c
            }
            None => rec.cls.clone(),
        };
        Ok(FeatureRecord {
            cls,
            grid,
            label: rec.label,
        })
    }
}

/// Draw parameters from `rng` and apply them to `rec`.
pub fn apply_policy(
    rec: &FeatureRecord,
    policy: &AugmentationPolicy,
    rng: &mut RngStream,
) -> Result<FeatureRecord> {
    if policy.is_identity() {
        return Ok(rec.clone());
    }
    let params = policy.sample(rec.grid.h(), rec.grid.w(), rng);
    params.apply(rec, rng)
}
