//! Procedural mixing-set synthesis: escape-time (Mandelbrot/Julia) renders
//! with orbit-trap coloring and chaos-game renders of iterated function
//! systems.

use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{enumerate, DatasetSource};
use crate::error::{Error, Result};
use crate::image::{decode, ImageBuffer};
use crate::rng::SeededRng;

pub type Rgb = [f64; 3];

/// Ordered gradient stops. Lookups interpolate linearly between stops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette(pub Vec<Rgb>);

impl Palette {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::param("palette needs at least one color"));
        }
        if self.0.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("palette colors must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Gradient color at `t` in `[0, 1]`.
    pub fn sample(&self, t: f64) -> Rgb {
        let n = self.0.len();
        if n == 1 {
            return self.0[0];
        }
        let pos = t.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (pos.floor() as usize).min(n - 2);
        let f = pos - i as f64;
        let (a, b) = (self.0[i], self.0[i + 1]);
        [
            a[0] + (b[0] - a[0]) * f,
            a[1] + (b[1] - a[1]) * f,
            a[2] + (b[2] - a[2]) * f,
        ]
    }

    /// 256-entry lookup table, cyclically shifted by `shift` and optionally
    /// reversed. Both are permutations that keep neighbouring entries
    /// neighbours, so color bands stay smooth.
    pub fn table(&self, shift: usize, reverse: bool) -> Vec<Rgb> {
        let base: Vec<Rgb> = (0..256).map(|i| self.sample(i as f64 / 255.0)).collect();
        (0..256)
            .map(|i| {
                let j = if reverse { 255 - i } else { i };
                base[(j + shift) % 256]
            })
            .collect()
    }

    pub fn random(rng: &mut SeededRng) -> Palette {
        let stops = 3 + rng.index(4);
        Palette(
            (0..stops)
                .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
                .collect(),
        )
    }
}

/// Rectangle `[re_min, re_max] x [im_min, im_max]` of the complex plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewport {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl Viewport {
    pub fn centered(center: Complex64, width: f64, height: f64) -> Self {
        Self {
            re_min: center.re - width / 2.0,
            re_max: center.re + width / 2.0,
            im_min: center.im - height / 2.0,
            im_max: center.im + height / 2.0,
        }
    }

    /// Complex coordinate of the center of pixel `(y, x)`; row 0 is the top
    /// (largest imaginary part).
    pub fn point(&self, y: usize, x: usize, height: usize, width: usize) -> Complex64 {
        let re = self.re_min + (x as f64 + 0.5) / width as f64 * (self.re_max - self.re_min);
        let im = self.im_max - (y as f64 + 0.5) / height as f64 * (self.im_max - self.im_min);
        Complex64::new(re, im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Real,
    Imaginary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trap {
    None,
    Point(Complex64),
    Line(Axis),
}

impl Trap {
    #[inline]
    fn distance(&self, z: Complex64) -> f64 {
        match self {
            Trap::None => 0.0,
            Trap::Point(p) => (z - p).norm(),
            Trap::Line(Axis::Real) => z.im.abs(),
            Trap::Line(Axis::Imaginary) => z.re.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscapeKind {
    /// `z0 = 0`, `c` = pixel coordinate.
    Mandelbrot,
    /// `z0` = pixel coordinate, `c` fixed.
    Julia { c: Complex64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeTimeSpec {
    pub kind: EscapeKind,
    pub viewport: Viewport,
    pub max_iter: u32,
    pub bailout: f64,
    pub trap: Trap,
    pub palette: Palette,
    pub height: usize,
    pub width: usize,
}

impl EscapeTimeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::param("max_iter must be >= 1"));
        }
        if !(self.bailout >= 2.0) {
            return Err(Error::param(format!("bailout must be >= 2, got {}", self.bailout)));
        }
        let v = &self.viewport;
        if !(v.re_max > v.re_min && v.im_max > v.im_min) {
            return Err(Error::param("viewport must have positive area"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::param("render size must be positive"));
        }
        self.palette.validate()
    }
}

/// Result of iterating `z <- z^2 + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Escape {
    /// First `n` with `|z_n| > bailout`, or `max_iter` if the orbit never left.
    pub count: u32,
    /// Minimum distance from `z_1 .. z_count` to the trap (0 without a trap).
    pub trap_distance: f64,
}

impl Escape {
    pub fn escaped(&self, max_iter: u32) -> bool {
        self.count < max_iter
    }
}

pub fn escape_iterations(z0: Complex64, c: Complex64, max_iter: u32, bailout: f64, trap: &Trap) -> Escape {
    let mut z = z0;
    let bailout_sq = bailout * bailout;
    let mut trap_distance = if matches!(trap, Trap::None) { 0.0 } else { f64::INFINITY };
    for n in 1..=max_iter {
        z = z * z + c;
        if !matches!(trap, Trap::None) {
            trap_distance = trap_distance.min(trap.distance(z));
        }
        if z.norm_sqr() > bailout_sq {
            // escaped at n; n == max_iter is reported as max_iter
            return Escape {
                count: n,
                trap_distance,
            };
        }
    }
    Escape {
        count: max_iter,
        trap_distance,
    }
}

/// Per-pixel escape results, row-major.
pub fn escape_map(spec: &EscapeTimeSpec) -> Result<Vec<Escape>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    Ok((0..h * w)
        .map(|i| {
            let p = spec.viewport.point(i / w, i % w, h, w);
            let (z0, c) = match spec.kind {
                EscapeKind::Mandelbrot => (Complex64::new(0.0, 0.0), p),
                EscapeKind::Julia { c } => (p, c),
            };
            escape_iterations(z0, c, spec.max_iter, spec.bailout, &spec.trap)
        })
        .collect())
}

/// Renders an escape-time fractal. The color index blends the normalized
/// iteration count with `exp(-trap_distance)`, looked up in a 256-entry
/// table derived from the palette and permuted by `rng`.
pub fn render_escape_time(spec: &EscapeTimeSpec, rng: &mut SeededRng) -> Result<ImageBuffer> {
    let escapes = escape_map(spec)?;
    let table = spec.palette.table(rng.index(256), rng.bernoulli(0.5));
    let trapped = !matches!(spec.trap, Trap::None);
    let mut data = Vec::with_capacity(escapes.len() * 3);
    for e in &escapes {
        let iter_term = (e.count as f64 / spec.max_iter as f64).sqrt();
        let t = if trapped {
            0.5 * iter_term + 0.5 * (-e.trap_distance).exp()
        } else {
            iter_term
        };
        let idx = ((t * 255.0).round() as usize).min(255);
        data.extend_from_slice(&table[idx]);
    }
    Ok(ImageBuffer::from_raw(spec.height, spec.width, data))
}

/// Affine map `p -> A p + b`, chosen with probability `prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub prob: f64,
}

impl AffineMap {
    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.b[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.b[1],
        ]
    }

    /// Spectral norm of the linear part.
    pub fn operator_norm(&self) -> f64 {
        let [[a, b], [c, d]] = self.a;
        // eigenvalues of A^T A
        let p = a * a + c * c;
        let q = a * b + c * d;
        let r = b * b + d * d;
        let mean = (p + r) / 2.0;
        let disc = (((p - r) / 2.0).powi(2) + q * q).sqrt();
        (mean + disc).max(0.0).sqrt()
    }

    /// Fixed point of a contraction (`I - A` is invertible when `||A|| < 1`).
    pub fn fixed_point(&self) -> [f64; 2] {
        let [[a, b], [c, d]] = self.a;
        let (m00, m01, m10, m11) = (1.0 - a, -b, -c, 1.0 - d);
        let det = m00 * m11 - m01 * m10;
        [
            (m11 * self.b[0] - m01 * self.b[1]) / det,
            (-m10 * self.b[0] + m00 * self.b[1]) / det,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfsSpec {
    pub maps: Vec<AffineMap>,
    pub n_points: usize,
    pub burn_in: usize,
    pub height: usize,
    pub width: usize,
    pub palette: Palette,
    pub background: Rgb,
}

impl IfsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.maps.len() < 2 {
            return Err(Error::param("an IFS needs at least two maps"));
        }
        if self.maps.iter().any(|m| !(m.prob >= 0.0)) {
            return Err(Error::param("map probabilities must be non-negative"));
        }
        let total: f64 = self.maps.iter().map(|m| m.prob).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::param(format!("map probabilities sum to {total}, expected 1")));
        }
        if let Some((i, m)) = self.maps.iter().enumerate().find(|(_, m)| !(m.operator_norm() < 1.0)) {
            return Err(Error::param(format!(
                "map {i} is not a contraction (operator norm {:.4})",
                m.operator_norm()
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::param("render size must be positive"));
        }
        self.palette.validate()?;
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("background color must lie in [0, 1]"));
        }
        Ok(())
    }

    /// A ball `(center, radius)` mapped into itself by every map, hence
    /// containing the attractor and every chaos-game point started inside
    /// it. With `s = max ||A_i||` and `R = max |f_i(c) - c| / (1 - s)`,
    /// `|f_i(x) - c| <= s|x - c| + |f_i(c) - c| <= R` whenever `|x - c| <= R`.
    pub fn invariant_ball(&self) -> ([f64; 2], f64) {
        let fixed: Vec<[f64; 2]> = self.maps.iter().map(AffineMap::fixed_point).collect();
        let n = fixed.len() as f64;
        let center = [
            fixed.iter().map(|p| p[0]).sum::<f64>() / n,
            fixed.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let s = self.maps.iter().map(AffineMap::operator_norm).fold(0.0, f64::max);
        let reach = self
            .maps
            .iter()
            .map(|m| {
                let q = m.apply(center);
                ((q[0] - center[0]).powi(2) + (q[1] - center[1]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max);
        (center, reach / (1.0 - s))
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.maps
            .iter()
            .map(|m| {
                acc += m.prob;
                acc
            })
            .collect()
    }
}

/// Raw chaos-game point stream after burn-in. The orbit starts at the
/// center of [`IfsSpec::invariant_ball`].
pub fn chaos_game(spec: &IfsSpec, rng: &mut SeededRng) -> Result<Vec<[f64; 2]>> {
    spec.validate()?;
    let cumulative = spec.cumulative();
    let total = *cumulative.last().expect("validated nonempty");
    let (mut p, _) = spec.invariant_ball();
    let mut points = Vec::with_capacity(spec.n_points);
    for step in 0..spec.burn_in + spec.n_points {
        let u = rng.next_f64() * total;
        let i = cumulative.partition_point(|&c| c <= u).min(spec.maps.len() - 1);
        p = spec.maps[i].apply(p);
        if step >= spec.burn_in {
            points.push(p);
        }
    }
    Ok(points)
}

/// Chaos-game render: hit density over the point cloud's bounding box,
/// log-scaled through the palette; empty pixels take the background color.
pub fn render_ifs(spec: &IfsSpec, rng: &mut SeededRng) -> Result<ImageBuffer> {
    let points = chaos_game(spec, rng)?;
    let (h, w) = (spec.height, spec.width);
    let mut hits = vec![0u32; h * w];
    if !points.is_empty() {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &points {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        // 5% margin, and keep degenerate extents drawable
        let span_x = (x1 - x0).max(1e-9);
        let span_y = (y1 - y0).max(1e-9);
        let (x0, span_x) = (x0 - 0.05 * span_x, span_x * 1.1);
        let (y0, span_y) = (y0 - 0.05 * span_y, span_y * 1.1);
        for p in &points {
            let px = (((p[0] - x0) / span_x) * w as f64) as usize;
            let py = (((p[1] - y0) / span_y) * h as f64) as usize;
            let (px, py) = (px.min(w - 1), py.min(h - 1));
            // flip so +y points up
            hits[(h - 1 - py) * w + px] += 1;
        }
    }
    let max_hits = hits.iter().copied().max().unwrap_or(0).max(1) as f64;
    let norm = (1.0 + max_hits).ln();
    let table = spec.palette.table(rng.index(256), rng.bernoulli(0.5));
    let mut data = Vec::with_capacity(h * w * 3);
    for &count in &hits {
        if count == 0 {
            data.extend_from_slice(&spec.background);
        } else {
            let t = (1.0 + count as f64).ln() / norm;
            let idx = ((t * 255.0).round() as usize).min(255);
            data.extend_from_slice(&table[idx]);
        }
    }
    Ok(ImageBuffer::from_raw(h, w, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    EscapeTime,
    Ifs,
    External,
}

#[derive(Debug, Clone)]
pub struct MixingEntry {
    pub image: ImageBuffer,
    pub source: SourceTag,
    /// Hex SHA-256 of the generating spec (or of the file bytes for
    /// external images).
    pub spec_hash: String,
}

/// Immutable corpus of images blended into training inputs.
#[derive(Debug, Clone, Default)]
pub struct MixingSet {
    entries: Vec<MixingEntry>,
}

impl MixingSet {
    pub fn new(entries: Vec<MixingEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("mixing set is empty"));
        }
        Ok(Self { entries })
    }

    /// Wraps in-memory images as external entries.
    pub fn from_images(images: Vec<ImageBuffer>) -> Result<Self> {
        Self::new(
            images
                .into_iter()
                .map(|image| MixingEntry {
                    spec_hash: hash_bytes(&crate::image::to_rgb8(&image)),
                    image,
                    source: SourceTag::External,
                })
                .collect(),
        )
    }

    /// Loads every PNG/JPEG in `dir` (sorted by path) without resizing.
    /// Unreadable files are skipped with a warning.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::new(load_external(dir, None)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&MixingEntry> {
        self.entries.get(i)
    }

    pub fn entries(&self) -> &[MixingEntry] {
        &self.entries
    }
}

fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn spec_hash<T: Serialize>(spec: &T) -> String {
    hash_bytes(&serde_json::to_vec(spec).expect("spec serializes"))
}

fn load_external(dir: &Path, size: Option<(usize, usize)>) -> Result<Vec<MixingEntry>> {
    let paths = enumerate(&DatasetSource::images(dir, false))?;
    let total = paths.len();
    let mut entries = Vec::with_capacity(total);
    for path in paths {
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let image = match decode(&bytes) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let image = match size {
            Some((h, w)) => image.fit_to(h, w)?,
            None => image,
        };
        entries.push(MixingEntry {
            image,
            source: SourceTag::External,
            spec_hash: hash_bytes(&bytes),
        });
    }
    if total > 0 && entries.is_empty() {
        return Err(Error::config(format!(
            "none of the {total} files in {} could be decoded",
            dir.display()
        )));
    }
    Ok(entries)
}

/// Fraction of pixels sharing the most common 8-bit color.
pub fn dominant_color_fraction(img: &ImageBuffer) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for px in img.data().chunks_exact(3) {
        let key = [
            crate::image::quantize(px[0]),
            crate::image::quantize(px[1]),
            crate::image::quantize(px[2]),
        ];
        *counts.entry(key).or_insert(0usize) += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    max as f64 / (img.height() * img.width()) as f64
}

const MAX_SINGLE_COLOR_FRACTION: f64 = 0.95;
const MAX_ATTEMPTS: usize = 24;

/// Random Julia constant, uniform by area on the annulus `0.3 <= |c| <= 1.2`.
pub fn sample_julia_constant(rng: &mut SeededRng) -> Complex64 {
    let (r0, r1) = (0.3f64, 1.2f64);
    let r = (rng.uniform(r0 * r0, r1 * r1)).sqrt();
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    Complex64::from_polar(r, theta)
}

fn random_trap(rng: &mut SeededRng) -> Trap {
    match rng.index(4) {
        0 => Trap::None,
        1 => Trap::Point(Complex64::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))),
        2 => Trap::Line(Axis::Real),
        _ => Trap::Line(Axis::Imaginary),
    }
}

/// Random escape-time spec: Julia sets over a fixed window, or Mandelbrot
/// zooms centered on points near the set boundary.
pub fn random_escape_spec(height: usize, width: usize, rng: &mut SeededRng) -> EscapeTimeSpec {
    let max_iter = 64 + rng.index(193) as u32;
    let aspect = width as f64 / height as f64;
    let (kind, viewport) = if rng.bernoulli(0.5) {
        let c = sample_julia_constant(rng);
        let half = rng.uniform(1.2, 1.8);
        (
            EscapeKind::Julia { c },
            Viewport::centered(Complex64::new(0.0, 0.0), 2.0 * half * aspect, 2.0 * half),
        )
    } else {
        // boundary-adjacent centers escape, but not immediately
        let mut center = Complex64::new(-0.75, 0.1);
        for _ in 0..64 {
            let cand = Complex64::new(rng.uniform(-2.0, 0.5), rng.uniform(-1.2, 1.2));
            let e = escape_iterations(Complex64::new(0.0, 0.0), cand, max_iter, 2.0, &Trap::None);
            if e.count >= 8 && e.escaped(max_iter) {
                center = cand;
                break;
            }
        }
        let span = 10f64.powf(rng.uniform(-2.0, 0.4));
        (
            EscapeKind::Mandelbrot,
            Viewport::centered(center, span * aspect, span),
        )
    };
    EscapeTimeSpec {
        kind,
        viewport,
        max_iter,
        bailout: 2.0,
        trap: random_trap(rng),
        palette: Palette::random(rng),
        height,
        width,
    }
}

/// Random IFS with 2-4 maps, each redrawn until contractive. Selection
/// probabilities follow `|det A|` with a floor so no map starves.
pub fn random_ifs_spec(height: usize, width: usize, rng: &mut SeededRng) -> IfsSpec {
    let n_maps = 2 + rng.index(3);
    let mut maps = Vec::with_capacity(n_maps);
    while maps.len() < n_maps {
        let m = AffineMap {
            a: [
                [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
            ],
            b: [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
            prob: 0.0,
        };
        let norm = m.operator_norm();
        if norm < 0.95 && norm > 0.1 {
            maps.push(m);
        }
    }
    let weights: Vec<f64> = maps
        .iter()
        .map(|m| (m.a[0][0] * m.a[1][1] - m.a[0][1] * m.a[1][0]).abs().max(0.02))
        .collect();
    let total: f64 = weights.iter().sum();
    for (m, wgt) in maps.iter_mut().zip(&weights) {
        m.prob = wgt / total;
    }
    IfsSpec {
        maps,
        n_points: (height * width * 4).max(10_000),
        burn_in: 20,
        height,
        width,
        palette: Palette::random(rng),
        background: [rng.next_f64(), rng.next_f64(), rng.next_f64()],
    }
}

fn render_with_rejection<S: Serialize>(
    rng: &mut SeededRng,
    mut make: impl FnMut(&mut SeededRng) -> S,
    render: impl Fn(&S, &mut SeededRng) -> Result<ImageBuffer>,
) -> Result<(ImageBuffer, String)> {
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let spec = make(rng);
        let img = render(&spec, rng)?;
        let flat = dominant_color_fraction(&img) > MAX_SINGLE_COLOR_FRACTION;
        let hashed = spec_hash(&spec);
        if !flat {
            return Ok((img, hashed));
        }
        last = Some((img, hashed));
    }
    Ok(last.expect("at least one attempt"))
}

/// Builds a mixing set of `n_escape` escape-time renders, `n_ifs` IFS renders
/// and every decodable image in `external_dir` (center-cropped and resized).
/// Render `i` uses child stream `i` of a seed drawn from `rng`, so results do
/// not depend on thread scheduling.
pub fn build_mixing_set(
    n_escape: usize,
    n_ifs: usize,
    external_dir: Option<&Path>,
    size: (usize, usize),
    rng: &mut SeededRng,
) -> Result<MixingSet> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::param("mixing-set image size must be positive"));
    }
    let base = rng.next_u64();
    let generated: Result<Vec<MixingEntry>> = (0..n_escape + n_ifs)
        .into_par_iter()
        .map(|i| {
            let mut child = SeededRng::stream(base, i as u64);
            if i < n_escape {
                let (image, spec_hash) =
                    render_with_rejection(&mut child, |r| random_escape_spec(h, w, r), render_escape_time)?;
                Ok(MixingEntry {
                    image,
                    source: SourceTag::EscapeTime,
                    spec_hash,
                })
            } else {
                let (image, spec_hash) =
                    render_with_rejection(&mut child, |r| random_ifs_spec(h, w, r), render_ifs)?;
                Ok(MixingEntry {
                    image,
                    source: SourceTag::Ifs,
                    spec_hash,
                })
            }
        })
        .collect();
    let mut entries = generated?;
    if let Some(dir) = external_dir {
        entries.extend(load_external(dir, Some(size))?);
    }
    if entries.is_empty() {
        return Err(Error::config("mixing set would be empty"));
    }
    MixingSet::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ZERO: Complex64 = Complex64::new(0.0, 0.0);

    fn mandelbrot_spec(h: usize, w: usize, max_iter: u32) -> EscapeTimeSpec {
        EscapeTimeSpec {
            kind: EscapeKind::Mandelbrot,
            viewport: Viewport {
                re_min: -2.0,
                re_max: 1.0,
                im_min: -1.5,
                im_max: 1.5,
            },
            max_iter,
            bailout: 2.0,
            trap: Trap::Point(Complex64::new(0.25, 0.0)),
            palette: Palette(vec![[0.0, 0.0, 0.2], [1.0, 0.6, 0.0], [1.0, 1.0, 1.0]]),
            height: h,
            width: w,
        }
    }

    pub(crate) fn sierpinski() -> IfsSpec {
        let half = |bx: f64, by: f64| AffineMap {
            a: [[0.5, 0.0], [0.0, 0.5]],
            b: [bx, by],
            prob: 1.0 / 3.0,
        };
        IfsSpec {
            maps: vec![half(0.0, 0.0), half(0.5, 0.0), half(0.25, 0.5)],
            n_points: 20_000,
            burn_in: 0,
            height: 32,
            width: 32,
            palette: Palette(vec![[1.0, 1.0, 1.0]]),
            background: [0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn escape_hand_cases() {
        assert_eq!(escape_iterations(ZERO, ZERO, 50, 2.0, &Trap::None).count, 50);
        // z1 = 2 (not > 2), z2 = 6
        assert_eq!(escape_iterations(ZERO, Complex64::new(2.0, 0.0), 50, 2.0, &Trap::None).count, 2);
        assert_eq!(escape_iterations(Complex64::new(0.5, 0.0), ZERO, 50, 2.0, &Trap::None).count, 50);
        // c = 1: 1, 2, 5
        assert_eq!(escape_iterations(ZERO, Complex64::new(1.0, 0.0), 100, 2.0, &Trap::None).count, 3);
    }

    #[test]
    fn trap_distance_tracks_orbit_minimum() {
        // c = 1: orbit 1, 2, 5; nearest to the point trap at 2 is z2
        let e = escape_iterations(ZERO, Complex64::new(1.0, 0.0), 100, 2.0, &Trap::Point(Complex64::new(2.0, 0.0)));
        assert_eq!(e.trap_distance, 0.0);
        let e = escape_iterations(ZERO, Complex64::new(1.0, 0.5), 100, 2.0, &Trap::Line(Axis::Real));
        assert_eq!(e.trap_distance, 0.5);
        assert_eq!(escape_iterations(ZERO, ZERO, 5, 2.0, &Trap::None).trap_distance, 0.0);
    }

    #[test]
    fn escape_monotone_in_max_iter() {
        let mut rng = SeededRng::new(1);
        for _ in 0..2000 {
            let c = Complex64::new(rng.uniform(-2.0, 1.0), rng.uniform(-1.5, 1.5));
            let lo = escape_iterations(ZERO, c, 40, 2.0, &Trap::None);
            let hi = escape_iterations(ZERO, c, 200, 2.0, &Trap::None);
            assert!(hi.count >= lo.count);
            if lo.escaped(40) {
                assert_eq!(hi.count, lo.count);
            }
        }
    }

    #[test]
    fn mandelbrot_has_interior_and_exterior() {
        let spec = mandelbrot_spec(48, 48, 100);
        let map = escape_map(&spec).unwrap();
        assert!(map.iter().any(|e| e.count == 100));
        assert!(map.iter().any(|e| e.count < 100));
    }

    #[test]
    fn escape_render_deterministic() {
        let spec = mandelbrot_spec(24, 32, 60);
        let a = render_escape_time(&spec, &mut SeededRng::new(3)).unwrap();
        let b = render_escape_time(&spec, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (24, 32));
    }

    #[test]
    fn single_pixel_interior_render() {
        let mut spec = mandelbrot_spec(1, 1, 30);
        spec.viewport = Viewport::centered(ZERO, 0.01, 0.01);
        let img = render_escape_time(&spec, &mut SeededRng::new(0)).unwrap();
        assert_eq!(img.dims(), (1, 1));
        assert_eq!(escape_map(&spec).unwrap()[0].count, 30);
    }

    #[test]
    fn escape_spec_validation() {
        let mut spec = mandelbrot_spec(4, 4, 10);
        spec.max_iter = 0;
        assert!(spec.validate().is_err());
        let mut spec = mandelbrot_spec(4, 4, 10);
        spec.bailout = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = mandelbrot_spec(4, 4, 10);
        spec.viewport.re_max = spec.viewport.re_min;
        assert!(render_escape_time(&spec, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn sierpinski_points_stay_in_hull() {
        let spec = sierpinski();
        let pts = chaos_game(&spec, &mut SeededRng::new(8)).unwrap();
        // triangle (0,0), (1,0), (0.5,1)
        let inside = |p: &[f64; 2]| {
            let eps = 1e-12;
            p[1] >= -eps && p[1] <= 2.0 * p[0] + eps && p[1] <= 2.0 * (1.0 - p[0]) + eps
        };
        assert!(pts.iter().all(inside));
    }

    #[test]
    fn ifs_rejects_bad_specs() {
        let mut single = sierpinski();
        single.maps.truncate(1);
        single.maps[0].prob = 1.0;
        assert!(render_ifs(&single, &mut SeededRng::new(0)).is_err());
        let mut expanding = sierpinski();
        expanding.maps[0].a = [[1.1, 0.0], [0.0, 0.5]];
        assert!(matches!(render_ifs(&expanding, &mut SeededRng::new(0)), Err(Error::Parameter(_))));
        let mut bad_probs = sierpinski();
        bad_probs.maps[0].prob = 0.9;
        assert!(bad_probs.validate().is_err());
    }

    #[test]
    fn ifs_render_deterministic() {
        let spec = sierpinski();
        let a = render_ifs(&spec, &mut SeededRng::new(4)).unwrap();
        let b = render_ifs(&spec, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn operator_norm_and_fixed_point() {
        let m = AffineMap {
            a: [[0.0, -0.5], [0.5, 0.0]],
            b: [1.0, 0.0],
            prob: 1.0,
        };
        assert!((m.operator_norm() - 0.5).abs() < 1e-12);
        let p = m.fixed_point();
        let q = m.apply(p);
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    }

    #[test]
    fn julia_constants_in_annulus() {
        let mut rng = SeededRng::new(6);
        for _ in 0..1000 {
            let c = sample_julia_constant(&mut rng);
            assert!(c.norm() >= 0.3 - 1e-12 && c.norm() <= 1.2 + 1e-12);
        }
    }

    #[test]
    fn random_ifs_specs_are_valid() {
        let mut rng = SeededRng::new(12);
        for _ in 0..200 {
            random_ifs_spec(16, 16, &mut rng).validate().unwrap();
            random_escape_spec(16, 16, &mut rng).validate().unwrap();
        }
    }

    #[test]
    fn build_generated_set() {
        let set = build_mixing_set(10, 10, None, (24, 20), &mut SeededRng::new(1)).unwrap();
        assert_eq!(set.len(), 20);
        for e in set.entries() {
            assert_eq!(e.image.dims(), (24, 20));
            assert!(e.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(set.entries().iter().filter(|e| e.source == SourceTag::EscapeTime).count(), 10);
        assert_eq!(set.entries().iter().filter(|e| e.source == SourceTag::Ifs).count(), 10);
    }

    #[test]
    fn build_empty_set_is_config_error() {
        assert!(matches!(
            build_mixing_set(0, 0, None, (8, 8), &mut SeededRng::new(0)),
            Err(Error::Config(_))
        ));
    }
}
