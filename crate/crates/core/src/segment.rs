//! White-box parcel-to-segment conversion.
//!
//! A [`SegmenterSpec`] lists the parcel IDs judged interior to one anatomical
//! region. [`segment`] unites those parcels in a parcel map and cleans the
//! result: keep the component with the most interior parcels, absorb
//! enclaves, close small gaps and refine the outline with a snake.
//!
//! Connectivity is 4-neighbour everywhere.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{BinaryMask, GrayFrame, ParcelMap};

pub const SPEC_FORMAT: &str = "ALANSEG";
pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Minimum fraction of a parcel's pixels inside the annotation for a hit.
    pub overlap_frac: f64,
    /// Minimum share of a parcel's present frames that must be hits.
    pub hit_rate: f64,
    /// Minimum share of all frames in which the parcel is present.
    pub presence_rate: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            overlap_frac: 0.75,
            hit_rate: 0.50,
            presence_rate: 0.30,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.overlap_frac, "overlap_frac"),
            (self.hit_rate, "hit_rate"),
            (self.presence_rate, "presence_rate"),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnakeParams {
    /// Continuity (membrane) weight.
    pub alpha: f64,
    /// Curvature (thin-plate) weight.
    pub beta: f64,
    /// Time step.
    pub gamma: f64,
    pub max_iters: usize,
    /// Attraction to edges.
    pub w_edge: f64,
}

impl Default for SnakeParams {
    fn default() -> Self {
        SnakeParams {
            alpha: 0.01,
            beta: 0.2,
            gamma: 0.01,
            max_iters: 10,
            w_edge: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostProcess {
    pub enclave_cutoff: usize,
    pub closing_radius: usize,
    pub snake: SnakeParams,
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess {
            enclave_cutoff: 8,
            closing_radius: 10,
            snake: SnakeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterSpec {
    #[serde(default = "spec_format")]
    pub format: String,
    #[serde(default = "spec_version")]
    pub version: u32,
    pub classes: usize,
    pub region_label: String,
    /// Sorted, unique.
    pub interior_ids: Vec<u16>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub postproc: PostProcess,
}

fn spec_format() -> String {
    SPEC_FORMAT.to_string()
}

fn spec_version() -> u32 {
    SPEC_VERSION
}

impl SegmenterSpec {
    pub fn new(
        classes: usize,
        region_label: impl Into<String>,
        interior_ids: impl IntoIterator<Item = u16>,
        thresholds: Thresholds,
        postproc: PostProcess,
    ) -> Result<Self> {
        let ids: BTreeSet<u16> = interior_ids.into_iter().collect();
        let spec = SegmenterSpec {
            format: spec_format(),
            version: SPEC_VERSION,
            classes,
            region_label: region_label.into(),
            interior_ids: ids.into_iter().collect(),
            thresholds,
            postproc,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != SPEC_FORMAT || self.version != SPEC_VERSION {
            return Err(Error::Config(format!(
                "expected {SPEC_FORMAT} v{SPEC_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        if let Some(&bad) = self.interior_ids.iter().find(|&&id| id as usize >= self.classes) {
            return Err(Error::Config(format!("interior id {bad} outside [0, {})", self.classes)));
        }
        if self.interior_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("interior ids must be sorted and unique".into()));
        }
        self.thresholds.validate()?;
        let s = &self.postproc.snake;
        if [s.alpha, s.beta, s.gamma, s.w_edge].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("snake parameters must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn interior_lookup(&self) -> Vec<bool> {
        interior_lookup(self.classes, &self.interior_ids)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("segmenter spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SegmenterSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn interior_lookup(classes: usize, ids: &[u16]) -> Vec<bool> {
    let mut lut = vec![false; classes.max(ids.iter().map(|&i| i as usize + 1).max().unwrap_or(0))];
    for &id in ids {
        lut[id as usize] = true;
    }
    lut
}

/// Per-parcel counts gathered over a validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapStats {
    /// Frames in which the parcel occupies at least one pixel.
    pub presence: Vec<usize>,
    /// Frames in which the parcel lies inside the annotation by at least `overlap_frac`.
    pub hits: Vec<usize>,
    pub frames: usize,
}

impl OverlapStats {
    pub fn is_interior(&self, id: usize, t: &Thresholds) -> bool {
        let present = self.presence[id];
        present > 0
            && present as f64 / self.frames as f64 >= t.presence_rate
            && self.hits[id] as f64 / present as f64 >= t.hit_rate
    }
}

pub fn overlap_stats(samples: &[(&ParcelMap, &BinaryMask)], classes: usize, t: &Thresholds) -> Result<OverlapStats> {
    if samples.is_empty() {
        return Err(Error::Empty("no annotated frames to fit on".into()));
    }
    let mut stats = OverlapStats {
        presence: vec![0; classes],
        hits: vec![0; classes],
        frames: samples.len(),
    };
    let mut area = vec![0usize; classes];
    let mut inside = vec![0usize; classes];
    for (map, mask) in samples {
        if !map.same_shape(mask) {
            return Err(Error::Dimension(format!(
                "parcel map {}x{} vs mask {}x{}",
                map.height, map.width, mask.height, mask.width
            )));
        }
        if map.classes > classes {
            return Err(Error::Dimension(format!("parcel map has K={}, expected {classes}", map.classes)));
        }
        area.fill(0);
        inside.fill(0);
        for (&label, &m) in map.labels.iter().zip(&mask.data) {
            area[label as usize] += 1;
            if m {
                inside[label as usize] += 1;
            }
        }
        for id in 0..classes {
            if area[id] > 0 {
                stats.presence[id] += 1;
                if inside[id] as f64 / area[id] as f64 >= t.overlap_frac {
                    stats.hits[id] += 1;
                }
            }
        }
    }
    Ok(stats)
}

/// Parcel IDs passing the overlap, hit-rate and presence rules.
pub fn fit_interior(samples: &[(&ParcelMap, &BinaryMask)], classes: usize, t: &Thresholds) -> Result<Vec<u16>> {
    t.validate()?;
    let stats = overlap_stats(samples, classes, t)?;
    Ok((0..classes)
        .filter(|&id| stats.is_interior(id, t))
        .map(|id| id as u16)
        .collect())
}

pub fn union_mask(map: &ParcelMap, interior_ids: &[u16]) -> BinaryMask {
    let lut = interior_lookup(map.classes, interior_ids);
    BinaryMask {
        height: map.height,
        width: map.width,
        data: map.labels.iter().map(|&l| lut[l as usize]).collect(),
    }
}

/// 4-connected components of the pixels where `member` holds, in raster
/// order of their first pixel.
pub fn components(height: usize, width: usize, member: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; height * width];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..height * width {
        if seen[start] || !member(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            for q in neighbors4(p, height, width).into_iter().flatten() {
                if !seen[q] && member(q) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

#[inline]
fn neighbors4(p: usize, height: usize, width: usize) -> [Option<usize>; 4] {
    let (r, c) = (p / width, p % width);
    [
        (r > 0).then(|| p - width),
        (r + 1 < height).then(|| p + width),
        (c > 0).then(|| p - 1),
        (c + 1 < width).then(|| p + 1),
    ]
}

fn mask_from_pixels(height: usize, width: usize, pixels: &[usize]) -> BinaryMask {
    let mut m = BinaryMask::new(height, width);
    for &p in pixels {
        m.data[p] = true;
    }
    m
}

/// Keeps the component touching the most distinct interior parcel IDs; ties
/// go to the larger area, then to the component whose first pixel comes
/// first in raster order.
pub fn largest_interior_component(
    mask: &BinaryMask,
    map: &ParcelMap,
    interior_ids: &[u16],
) -> Result<(BinaryMask, Option<String>)> {
    if !map.same_shape(mask) {
        return Err(Error::Dimension("mask and parcel map differ in size".into()));
    }
    let comps = components(mask.height, mask.width, |p| mask.data[p]);
    if comps.is_empty() {
        let msg = "empty mask: no component to keep".to_string();
        log::warn!("{msg}");
        return Ok((mask.clone(), Some(msg)));
    }
    let lut = interior_lookup(map.classes, interior_ids);
    let score = |comp: &Vec<usize>| {
        let ids: BTreeSet<u16> = comp
            .iter()
            .map(|&p| map.labels[p])
            .filter(|&l| lut[l as usize])
            .collect();
        (ids.len(), comp.len())
    };
    // components arrive in raster order, so the first maximum wins ties
    let mut best = 0;
    let mut best_score = score(&comps[0]);
    for (i, comp) in comps.iter().enumerate().skip(1) {
        let s = score(comp);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok((mask_from_pixels(mask.height, mask.width, &comps[best]), None))
}

/// Largest 4-connected component by area (first in raster order on ties).
pub fn keep_largest_component(mask: &BinaryMask) -> BinaryMask {
    let comps = components(mask.height, mask.width, |p| mask.data[p]);
    match comps.iter().enumerate().max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia))) {
        Some((_, comp)) => mask_from_pixels(mask.height, mask.width, comp),
        None => mask.clone(),
    }
}

/// For every connected non-mask region of one parcel ID, count its pixels
/// that touch the image border or a non-mask pixel outside the region
/// (exposed) and those that touch the mask (enclosed). A region joins the
/// mask when it is mostly surrounded, `enclosed >= exposed`, and at most
/// `cutoff` of its pixels are exposed.
pub fn absorb_enclaves(mask: &BinaryMask, map: &ParcelMap, cutoff: usize) -> Result<BinaryMask> {
    if !map.same_shape(mask) {
        return Err(Error::Dimension("mask and parcel map differ in size".into()));
    }
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.data[start] || seen[start] {
            continue;
        }
        let label = map.labels[start];
        let mut pixels = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            for q in neighbors4(p, h, w).into_iter().flatten() {
                if !seen[q] && !mask.data[q] && map.labels[q] == label {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        let (mut exposed, mut enclosed) = (0, 0);
        for &p in &pixels {
            let nb = neighbors4(p, h, w);
            // same-label non-mask neighbours already belong to this region
            exposed += nb.iter().any(|n| n.is_none_or(|q| !mask.data[q] && map.labels[q] != label)) as usize;
            enclosed += nb.iter().flatten().any(|&q| mask.data[q]) as usize;
        }
        if exposed <= cutoff && enclosed >= exposed {
            for &p in &pixels {
                out.data[p] = true;
            }
        }
    }
    Ok(out)
}

/// Offsets of a discrete disk: every `(dy, dx)` with `dy² + dx² ≤ radius²`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation followed by erosion with a disk. The image is treated as
/// embedded in an unbounded empty plane, so closing stays extensive at
/// the borders.
pub fn morph_close(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let pad = radius;
    let (ph, pw) = (mask.height + 2 * pad, mask.width + 2 * pad);
    let offsets = disk_offsets(radius);
    let mut dilated = vec![false; ph * pw];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if !mask.get(r, c) {
                continue;
            }
            let (cr, cc) = ((r + pad) as isize, (c + pad) as isize);
            for &(dy, dx) in &offsets {
                dilated[(cr + dy) as usize * pw + (cc + dx) as usize] = true;
            }
        }
    }
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < ph && (c as usize) < pw && dilated[r as usize * pw + c as usize]
    };
    BinaryMask::from_fn(mask.height, mask.width, |r, c| {
        let (cr, cc) = ((r + pad) as isize, (c + pad) as isize);
        offsets.iter().all(|&(dy, dx)| at(cr + dy, cc + dx))
    })
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(data: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for r in 0..height {
        for c in 0..width {
            tmp[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * data[r * width + clamp(c as isize + i as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(r as isize + i as isize - radius, height) * width + c])
                .sum();
        }
    }
    out
}

/// Central-difference gradient `(d/dx, d/dy)` with one-sided ends.
fn gradient(data: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; data.len()];
    let mut gy = vec![0.0; data.len()];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if width > 1 {
                let (l, rr) = (c.saturating_sub(1), (c + 1).min(width - 1));
                gx[i] = (data[r * width + rr] - data[r * width + l]) / (rr - l) as f64;
            }
            if height > 1 {
                let (u, d) = (r.saturating_sub(1), (r + 1).min(height - 1));
                gy[i] = (data[d * width + c] - data[u * width + c]) / (d - u) as f64;
            }
        }
    }
    (gx, gy)
}

/// Smoothing applied before taking the gradient magnitude of the edge source.
pub const EDGE_SIGMA: f64 = 2.0;

/// Edge-strength image scaled to a maximum of 1: the gradient magnitude of
/// the Gaussian-smoothed frame, or of the mask itself when no frame is given.
pub fn edge_map(mask: &BinaryMask, frame: Option<&GrayFrame>) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let source: Vec<f64> = match frame {
        Some(f) => f.data.clone(),
        None => mask.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    };
    let smooth = gaussian_blur(&source, h, w, EDGE_SIGMA);
    let (gx, gy) = gradient(&smooth, h, w);
    let mut mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.iter_mut().for_each(|v| *v /= max);
    }
    mag
}

/// Bilinear sample at continuous pixel coordinates (pixel centres at integers).
fn sample(data: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
    let bottom = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Outer boundary of the component containing the first mask pixel in
/// raster order, traced clockwise along pixel edges. Vertices are pixel
/// corners `(x, y)`; the polygon encloses exactly the component's pixels
/// (holes included).
pub fn trace_outer_boundary(mask: &BinaryMask) -> Option<Vec<[f64; 2]>> {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let start = mask.data.iter().position(|&v| v)?;
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && mask.get(r as usize, c as usize);
    // directions: 0 = +x, 1 = +y, 2 = −x, 3 = −y (clockwise on screen)
    const STEP: [(isize, isize); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    // An edge leaving vertex (x, y) in direction d is a boundary edge with
    // the interior on its right when the pixel on the right is set and the
    // pixel on the left is not.
    let is_edge = |x: isize, y: isize, d: usize| -> bool {
        let (right, left) = match d {
            0 => ((y, x), (y - 1, x)),
            1 => ((y, x - 1), (y, x)),
            2 => ((y - 1, x - 1), (y, x - 1)),
            _ => ((y - 1, x), (y - 1, x - 1)),
        };
        inside(right.0, right.1) && !inside(left.0, left.1)
    };
    let (sr, sc) = ((start / mask.width) as isize, (start % mask.width) as isize);
    let origin = (sc, sr);
    let mut pos = origin;
    let mut dir = 0usize;
    let mut out = vec![[pos.0 as f64, pos.1 as f64]];
    loop {
        pos = (pos.0 + STEP[dir].0, pos.1 + STEP[dir].1);
        if pos == origin {
            break;
        }
        out.push([pos.0 as f64, pos.1 as f64]);
        // prefer right turn, then straight, then left
        dir = [(dir + 1) % 4, dir, (dir + 3) % 4]
            .into_iter()
            .find(|&d| is_edge(pos.0, pos.1, d))?;
        if out.len() > 4 * mask.data.len() + 4 {
            return None;
        }
    }
    Some(out)
}

/// Even-odd fill of a closed polygon, sampled at pixel centres.
pub fn rasterize_polygon(points: &[[f64; 2]], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let n = points.len();
    if n < 3 {
        return mask;
    }
    let mut xs = Vec::new();
    for r in 0..height {
        let y = r as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let [x0, y0] = points[i];
            let [x1, y1] = points[(i + 1) % n];
            if (y0 <= y) != (y1 <= y) {
                xs.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            let c0 = (span[0] - 0.5).ceil().max(0.0) as usize;
            let c1 = ((span[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for c in c0..c1 {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

/// Pentadiagonal circulant internal-energy matrix of a closed snake.
fn internal_energy_matrix(n: usize, alpha: f64, beta: f64) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    let coeffs = [
        (-2isize, beta),
        (-1, -alpha - 4.0 * beta),
        (0, 2.0 * alpha + 6.0 * beta),
        (1, -alpha - 4.0 * beta),
        (2, beta),
    ];
    for i in 0..n {
        for &(off, v) in &coeffs {
            let j = (i as isize + off).rem_euclid(n as isize) as usize;
            a[i * n + j] += v;
        }
    }
    a
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
fn invert(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-14 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
        }
        let p = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[row * n + k] -= f * a[col * n + k];
                inv[row * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Some(inv)
}

/// Initial and final snake vertices, in pixel-corner coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SnakeTrace {
    pub initial: Vec<[f64; 2]>,
    pub fitted: Vec<[f64; 2]>,
}

impl SnakeTrace {
    pub fn rms_displacement(&self) -> f64 {
        let n = self.initial.len().max(1) as f64;
        let sq: f64 = self
            .initial
            .iter()
            .zip(&self.fitted)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum();
        (sq / n).sqrt()
    }
}

/// Runs the semi-implicit snake iteration
/// `x ← (I + γA)⁻¹ (x + γ·w_edge·∇E)` from the mask's outer boundary.
pub fn fit_snake(mask: &BinaryMask, frame: Option<&GrayFrame>, params: &SnakeParams) -> Option<SnakeTrace> {
    let component = keep_largest_component(mask);
    let initial = trace_outer_boundary(&component)?;
    let n = initial.len();
    if n < 3 {
        return None;
    }
    let (h, w) = (mask.height, mask.width);
    let frame = frame.filter(|f| f.height == h && f.width == w);
    let edges = edge_map(mask, frame);
    let (fx, fy) = gradient(&edges, h, w);
    let system = internal_energy_matrix(n, params.alpha, params.beta)
        .iter()
        .enumerate()
        .map(|(i, v)| params.gamma * v + if i % (n + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let inv = invert(system, n)?;
    let mut pts = initial.clone();
    let mut rhs_x = vec![0.0; n];
    let mut rhs_y = vec![0.0; n];
    for _ in 0..params.max_iters {
        for (i, p) in pts.iter().enumerate() {
            // corner coordinates → pixel-centre coordinates
            let (sx, sy) = (p[0] - 0.5, p[1] - 0.5);
            rhs_x[i] = p[0] + params.gamma * params.w_edge * sample(&fx, h, w, sx, sy);
            rhs_y[i] = p[1] + params.gamma * params.w_edge * sample(&fy, h, w, sx, sy);
        }
        for (i, p) in pts.iter_mut().enumerate() {
            let row = &inv[i * n..(i + 1) * n];
            p[0] = row.iter().zip(&rhs_x).map(|(a, b)| a * b).sum();
            p[1] = row.iter().zip(&rhs_y).map(|(a, b)| a * b).sum();
        }
    }
    Some(SnakeTrace { initial, fitted: pts })
}

/// Snake refinement of a single-component mask. Degenerate inputs come back
/// unchanged with a warning.
pub fn refine_snake(mask: &BinaryMask, frame: Option<&GrayFrame>, params: &SnakeParams) -> (BinaryMask, Option<String>) {
    if mask.count() < 3 {
        let msg = format!("snake skipped: mask has {} pixels", mask.count());
        log::warn!("{msg}");
        return (mask.clone(), Some(msg));
    }
    match fit_snake(mask, frame, params) {
        Some(trace) => {
            let filled = rasterize_polygon(&trace.fitted, mask.height, mask.width);
            (keep_largest_component(&filled), None)
        }
        None => {
            let msg = "snake skipped: degenerate boundary".to_string();
            log::warn!("{msg}");
            (mask.clone(), Some(msg))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutcome {
    pub mask: BinaryMask,
    pub warnings: Vec<String>,
}

/// The full chain: union, best component, enclaves, closing, snake.
pub fn segment(map: &ParcelMap, spec: &SegmenterSpec, frame: Option<&GrayFrame>) -> Result<SegmentOutcome> {
    if map.classes != spec.classes {
        return Err(Error::Dimension(format!(
            "parcel map has K={}, segmenter expects {}",
            map.classes, spec.classes
        )));
    }
    let mut warnings = Vec::new();
    let union = union_mask(map, &spec.interior_ids);
    if union.is_empty() {
        let msg = format!("no interior parcels of {} present", spec.region_label);
        log::warn!("{msg}");
        warnings.push(msg);
        return Ok(SegmentOutcome { mask: union, warnings });
    }
    let (best, warn) = largest_interior_component(&union, map, &spec.interior_ids)?;
    warnings.extend(warn);
    let filled = absorb_enclaves(&best, map, spec.postproc.enclave_cutoff)?;
    let closed = morph_close(&filled, spec.postproc.closing_radius);
    let (refined, warn) = refine_snake(&closed, frame, &spec.postproc.snake);
    warnings.extend(warn);
    Ok(SegmentOutcome {
        mask: keep_largest_component(&refined),
        warnings,
    })
}
