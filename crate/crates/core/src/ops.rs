//! Whole-image transforms with sampled strengths.
//!
//! The bank follows the PIL operations used by AugMix-style pipelines and
//! deliberately excludes anything that overlaps the ImageNet-C corruption
//! families (noise, blur, weather, contrast, pixelation, compression).
//! Geometric ops resample bilinearly and fill vacated pixels with 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize, ImageBuffer, CHANNELS};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageOp {
    Autocontrast,
    Equalize,
    Posterize,
    Solarize,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    /// PIL `ImageEnhance.Brightness`: multiplicative gain.
    EnhanceBrightness,
    Sharpness,
    Invert,
    Mirror,
}

impl ImageOp {
    pub const ALL: [ImageOp; 13] = [
        ImageOp::Autocontrast,
        ImageOp::Equalize,
        ImageOp::Posterize,
        ImageOp::Solarize,
        ImageOp::Rotate,
        ImageOp::ShearX,
        ImageOp::ShearY,
        ImageOp::TranslateX,
        ImageOp::TranslateY,
        ImageOp::EnhanceBrightness,
        ImageOp::Sharpness,
        ImageOp::Invert,
        ImageOp::Mirror,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImageOp::Autocontrast => "autocontrast",
            ImageOp::Equalize => "equalize",
            ImageOp::Posterize => "posterize",
            ImageOp::Solarize => "solarize",
            ImageOp::Rotate => "rotate",
            ImageOp::ShearX => "shear_x",
            ImageOp::ShearY => "shear_y",
            ImageOp::TranslateX => "translate_x",
            ImageOp::TranslateY => "translate_y",
            ImageOp::EnhanceBrightness => "enhance_brightness",
            ImageOp::Sharpness => "sharpness",
            ImageOp::Invert => "invert",
            ImageOp::Mirror => "mirror",
        }
    }

    /// Sampling range `[lo, hi]` of the strength parameter. Units:
    /// degrees (rotate), shear factor, fraction of the side (translate),
    /// bits (posterize), threshold (solarize), enhancement factor
    /// (brightness, sharpness). Parameterless ops use `[0, 0]`.
    pub fn strength_range(self) -> (f64, f64) {
        match self {
            ImageOp::Rotate => (-30.0, 30.0),
            ImageOp::ShearX | ImageOp::ShearY => (-0.3, 0.3),
            ImageOp::TranslateX | ImageOp::TranslateY => (-1.0 / 3.0, 1.0 / 3.0),
            ImageOp::Posterize => (1.0, 4.0),
            ImageOp::Solarize => (0.0, 1.0),
            ImageOp::EnhanceBrightness | ImageOp::Sharpness => (0.1, 1.9),
            ImageOp::Autocontrast | ImageOp::Equalize | ImageOp::Invert | ImageOp::Mirror => (0.0, 0.0),
        }
    }

    /// Strength at which the op is the identity, for parameterized ops.
    /// This point may lie outside the sampling range (posterize keeps all
    /// precision at 8 bits).
    pub fn identity_strength(self) -> Option<f64> {
        match self {
            ImageOp::Rotate
            | ImageOp::ShearX
            | ImageOp::ShearY
            | ImageOp::TranslateX
            | ImageOp::TranslateY => Some(0.0),
            ImageOp::Posterize => Some(8.0),
            ImageOp::Solarize => Some(1.0),
            ImageOp::EnhanceBrightness | ImageOp::Sharpness => Some(1.0),
            ImageOp::Autocontrast | ImageOp::Equalize | ImageOp::Invert | ImageOp::Mirror => None,
        }
    }
}

impl fmt::Display for ImageOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImageOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ImageOp::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::param(format!("unknown image op '{s}'")))
    }
}

/// An op paired with a concrete strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpDraw {
    pub op: ImageOp,
    pub strength: f64,
}

/// Uniform op from the full bank, then uniform strength in its range.
pub fn sample_op(rng: &mut SeededRng) -> OpDraw {
    sample_op_from(&ImageOp::ALL, rng).expect("bank is nonempty")
}

pub fn sample_op_from(bank: &[ImageOp], rng: &mut SeededRng) -> Result<OpDraw> {
    let op = *crate::rng::choose_uniform(bank, rng)?;
    let (lo, hi) = op.strength_range();
    Ok(OpDraw {
        op,
        strength: rng.uniform(lo, hi),
    })
}

pub fn apply_op(img: &ImageBuffer, draw: OpDraw) -> ImageBuffer {
    let (h, w) = img.dims();
    render(img, draw, Window { y0: 0, x0: 0, h, w })
}

/// The `h x w` window at `(y0, x0)` of `apply_op(img, draw)`, computing
/// only those pixels. Ops with global statistics still read the whole input.
pub fn apply_op_window(img: &ImageBuffer, draw: OpDraw, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageBuffer> {
    if h == 0 || w == 0 || y0 + h > img.height() || x0 + w > img.width() {
        return Err(Error::param(format!(
            "window {h}x{w} at ({y0}, {x0}) does not fit {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(render(img, draw, Window { y0, x0, h, w }))
}

/// Applies an op given by name; unknown names are parameter errors.
pub fn apply_named(img: &ImageBuffer, name: &str, strength: f64) -> Result<ImageBuffer> {
    let op: ImageOp = name.parse()?;
    Ok(apply_op(img, OpDraw { op, strength }))
}

#[derive(Debug, Clone, Copy)]
struct Window {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

fn render(img: &ImageBuffer, draw: OpDraw, win: Window) -> ImageBuffer {
    let s = draw.strength;
    match draw.op {
        ImageOp::Autocontrast => autocontrast(img, win),
        ImageOp::Equalize => equalize(img, win),
        ImageOp::Posterize => posterize(img, s, win),
        ImageOp::Solarize => map_samples(img, win, |v| if v > s { 1.0 - v } else { v }),
        ImageOp::Rotate => {
            let (sin, cos) = (-s.to_radians()).sin_cos();
            // inverse map about the image center
            warp_centered(img, [cos, -sin, sin, cos], [0.0, 0.0], win)
        }
        ImageOp::ShearX => warp_centered(img, [1.0, s, 0.0, 1.0], [0.0, 0.0], win),
        ImageOp::ShearY => warp_centered(img, [1.0, 0.0, s, 1.0], [0.0, 0.0], win),
        ImageOp::TranslateX => warp_centered(img, [1.0, 0.0, 0.0, 1.0], [-s * img.width() as f64, 0.0], win),
        ImageOp::TranslateY => warp_centered(img, [1.0, 0.0, 0.0, 1.0], [0.0, -s * img.height() as f64], win),
        ImageOp::EnhanceBrightness => map_samples(img, win, |v| v * s),
        ImageOp::Sharpness => sharpness(img, s, win),
        ImageOp::Invert => map_samples(img, win, |v| 1.0 - v),
        ImageOp::Mirror => mirror(img, win),
    }
}

fn crop(img: &ImageBuffer, win: Window) -> ImageBuffer {
    if (win.h, win.w) == img.dims() {
        return img.clone();
    }
    img.crop(win.y0, win.x0, win.h, win.w).expect("window checked by caller")
}

/// `f` over every sample of the window; `f` sees the sample and its channel.
fn map_window(img: &ImageBuffer, win: Window, f: impl Fn(f64, usize) -> f64) -> ImageBuffer {
    let mut data = Vec::with_capacity(win.h * win.w * CHANNELS);
    for y in win.y0..win.y0 + win.h {
        let start = img.index(y, win.x0, 0);
        for px in img.data()[start..start + win.w * CHANNELS].chunks_exact(CHANNELS) {
            data.extend([f(px[0], 0), f(px[1], 1), f(px[2], 2)]);
        }
    }
    ImageBuffer::from_raw(win.h, win.w, data)
}

fn map_samples(img: &ImageBuffer, win: Window, f: impl Fn(f64) -> f64) -> ImageBuffer {
    map_window(img, win, |v, _| f(v))
}

fn mirror(img: &ImageBuffer, win: Window) -> ImageBuffer {
    let w = img.width();
    let mut data = Vec::with_capacity(win.h * win.w * CHANNELS);
    for y in win.y0..win.y0 + win.h {
        for x in win.x0..win.x0 + win.w {
            data.extend_from_slice(&img.pixel(y, w - 1 - x));
        }
    }
    ImageBuffer::from_raw(win.h, win.w, data)
}

/// Quantizes to `bits` (rounded, clamped to 1..=8) on the 8-bit projection,
/// as PIL does. At 8 bits the buffer is returned unchanged.
fn posterize(img: &ImageBuffer, strength: f64, win: Window) -> ImageBuffer {
    let bits = strength.round().clamp(1.0, 8.0) as u32;
    if bits >= 8 {
        return crop(img, win);
    }
    let mask = !((1u8 << (8 - bits)) - 1);
    map_samples(img, win, |v| (quantize(v) & mask) as f64 / 255.0)
}

fn autocontrast(img: &ImageBuffer, win: Window) -> ImageBuffer {
    let mut lo = [f64::INFINITY; CHANNELS];
    let mut hi = [f64::NEG_INFINITY; CHANNELS];
    for px in img.data().chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            lo[c] = lo[c].min(px[c]);
            hi[c] = hi[c].max(px[c]);
        }
    }
    map_window(img, win, |v, c| {
        if hi[c] > lo[c] {
            (v - lo[c]) / (hi[c] - lo[c])
        } else {
            v
        }
    })
}

/// Per-channel histogram equalization on 256 bins, following PIL's lookup
/// table construction. Output samples lie on the 8-bit grid.
fn equalize(img: &ImageBuffer, win: Window) -> ImageBuffer {
    let mut hist = [[0usize; 256]; CHANNELS];
    for px in img.data().chunks_exact(CHANNELS) {
        for c in 0..CHANNELS {
            hist[c][quantize(px[c]) as usize] += 1;
        }
    }
    let mut luts = [[0.0f64; 256]; CHANNELS];
    for (lut, hist) in luts.iter_mut().zip(&hist) {
        let last = hist.iter().rposition(|&n| n > 0).map(|i| hist[i]).unwrap_or(0);
        let step = (hist.iter().sum::<usize>() - last) / 255;
        let mut n = step / 2;
        for (i, v) in lut.iter_mut().enumerate() {
            let level = if step == 0 { i } else { (n / step).min(255) };
            *v = level as f64 / 255.0;
            n += hist[i];
        }
    }
    map_window(img, win, |v, c| luts[c][quantize(v) as usize])
}

/// PIL-style sharpness: interpolate between a 3x3 smoothed copy (kernel
/// `[1 1 1; 1 5 1; 1 1 1] / 13`, border pixels untouched) and the original.
fn sharpness(img: &ImageBuffer, factor: f64, win: Window) -> ImageBuffer {
    let (h, w) = img.dims();
    if (factor - 1.0).abs() == 0.0 {
        return crop(img, win);
    }
    let src = img.data();
    let stride = w * CHANNELS;
    let mut data = Vec::with_capacity(win.h * win.w * CHANNELS);
    for y in win.y0..win.y0 + win.h {
        let row = &src[y * stride..(y + 1) * stride];
        let interior_row = y > 0 && y + 1 < h;
        for x in win.x0..win.x0 + win.w {
            let i = x * CHANNELS;
            if !interior_row || x == 0 || x + 1 >= w {
                data.extend_from_slice(&row[i..i + CHANNELS]);
                continue;
            }
            let up = &src[(y - 1) * stride + i - CHANNELS..(y - 1) * stride + i + 2 * CHANNELS];
            let mid = &row[i - CHANNELS..i + 2 * CHANNELS];
            let down = &src[(y + 1) * stride + i - CHANNELS..(y + 1) * stride + i + 2 * CHANNELS];
            for c in 0..CHANNELS {
                let v = mid[CHANNELS + c];
                let mut acc = 4.0 * v;
                for r in [up, mid, down] {
                    acc += r[c] + r[CHANNELS + c] + r[2 * CHANNELS + c];
                }
                let d = acc / 13.0;
                data.push(d + factor * (v - d));
            }
        }
    }
    ImageBuffer::from_raw(win.h, win.w, data)
}

/// Inverse-mapped affine warp about the image center: output pixel `p`
/// samples the input at `M (p - center - offset) + center`. Bilinear, zero
/// fill outside the source.
fn warp_centered(img: &ImageBuffer, m: [f64; 4], offset: [f64; 2], win: Window) -> ImageBuffer {
    if m == [1.0, 0.0, 0.0, 1.0] && offset == [0.0, 0.0] {
        return crop(img, win);
    }
    let (h, w) = img.dims();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let src = img.data();
    let stride = w * CHANNELS;
    let (hf, wf) = (h as f64, w as f64);
    let mut data = vec![0.0; win.h * win.w * CHANNELS];
    let mut i = 0;
    for y in win.y0..win.y0 + win.h {
        let dy = y as f64 - cy - offset[1];
        for x in win.x0..win.x0 + win.w {
            let dx = x as f64 - cx - offset[0];
            let sx = m[0] * dx + m[1] * dy + cx;
            let sy = m[2] * dx + m[3] * dy + cy;
            let out = &mut data[i..i + CHANNELS];
            i += CHANNELS;
            if !(sx > -1.0 && sy > -1.0 && sx < wf && sy < hf) {
                continue;
            }
            let x0 = floor_isize(sx);
            let y0 = floor_isize(sy);
            let tx = sx - x0 as f64;
            let ty = sy - y0 as f64;
            let weights = [
                (1.0 - ty) * (1.0 - tx),
                (1.0 - ty) * tx,
                ty * (1.0 - tx),
                ty * tx,
            ];
            let in_x = x0 >= 0 && (x0 as usize) + 1 < w;
            let in_y = y0 >= 0 && (y0 as usize) + 1 < h;
            // Axis-aligned warps land on whole rows or columns; the zero-weight
            // taps would only add +0.
            if ty == 0.0 && in_x {
                let b = (y0 as usize * w + x0 as usize) * CHANNELS;
                let top = &src[b..b + 2 * CHANNELS];
                for c in 0..CHANNELS {
                    out[c] = weights[0] * top[c] + weights[1] * top[CHANNELS + c];
                }
                continue;
            }
            if tx == 0.0 && in_y {
                let b = (y0 as usize * w + x0 as usize) * CHANNELS;
                for c in 0..CHANNELS {
                    out[c] = weights[0] * src[b + c] + weights[2] * src[b + stride + c];
                }
                continue;
            }
            if in_x && in_y {
                let b = (y0 as usize * w + x0 as usize) * CHANNELS;
                let top = &src[b..b + 2 * CHANNELS];
                let bot = &src[b + stride..b + stride + 2 * CHANNELS];
                for c in 0..CHANNELS {
                    out[c] = weights[0] * top[c]
                        + weights[1] * top[CHANNELS + c]
                        + weights[2] * bot[c]
                        + weights[3] * bot[CHANNELS + c];
                }
                continue;
            }
            let taps = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
            for ((yy, xx), wt) in taps.into_iter().zip(weights) {
                if wt == 0.0 || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let base = (yy as usize * w + xx as usize) * CHANNELS;
                for c in 0..CHANNELS {
                    out[c] += wt * src[base + c];
                }
            }
        }
    }
    ImageBuffer::from_raw(win.h, win.w, data)
}

/// `floor` for values well inside the `isize` range, without a libm call.
#[inline]
fn floor_isize(v: f64) -> isize {
    let t = v as isize;
    if (t as f64) > v {
        t - 1
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, |y, x, c| ((y * 7 + x * 3 + c * 11) % 29) as f64 / 28.0).unwrap()
    }

    #[test]
    fn involutions() {
        let img = gradient(9, 13);
        let inv = OpDraw { op: ImageOp::Invert, strength: 0.0 };
        let mir = OpDraw { op: ImageOp::Mirror, strength: 0.0 };
        // 1 - (1 - v) may differ from v in the last bit
        assert!(apply_op(&apply_op(&img, inv), inv).max_abs_diff(&img) < 1e-15);
        assert_eq!(apply_op(&apply_op(&img, mir), mir), img);
    }

    #[test]
    fn identity_points() {
        let img = gradient(11, 8);
        for op in ImageOp::ALL {
            if let Some(s) = op.identity_strength() {
                let out = apply_op(&img, OpDraw { op, strength: s });
                assert!(out.max_abs_diff(&img) <= 1e-6, "{op} not identity at {s}");
            }
        }
    }

    #[test]
    fn posterize_one_bit() {
        let img = ImageBuffer::from_fn(4, 4, |y, _, _| if y % 2 == 0 { 0.3 } else { 0.7 }).unwrap();
        let out = apply_op(&img, OpDraw { op: ImageOp::Posterize, strength: 1.0 });
        // 0.3 -> 77 -> 0, 0.7 -> 179 -> 128
        for (&v, &src) in out.data().iter().zip(img.data()) {
            let expected = if src < 0.5 { 0.0 } else { 128.0 / 255.0 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn solarize_threshold() {
        let img = ImageBuffer::from_fn(1, 3, |_, x, _| [0.2, 0.5, 0.9][x]).unwrap();
        let out = apply_op(&img, OpDraw { op: ImageOp::Solarize, strength: 0.5 });
        assert_eq!(out.pixel(0, 0), [0.2; 3]);
        assert_eq!(out.pixel(0, 1), [0.5; 3]);
        assert!((out.get(0, 2, 0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn translate_fills_with_zero() {
        let img = ImageBuffer::filled(4, 6, 1.0).unwrap();
        // positive strength samples from +x as PIL does, so content moves
        // left and the right half is vacated
        let out = apply_op(&img, OpDraw { op: ImageOp::TranslateX, strength: 0.5 });
        for y in 0..4 {
            assert_eq!(out.pixel(y, 0), [1.0; 3]);
            assert_eq!(out.pixel(y, 5), [0.0; 3]);
        }
    }

    #[test]
    fn rotate_180_matches_double_mirror() {
        let img = gradient(5, 5);
        let rot = apply_op(&img, OpDraw { op: ImageOp::Rotate, strength: 180.0 });
        let flipped = ImageBuffer::from_fn(5, 5, |y, x, c| img.get(4 - y, 4 - x, c)).unwrap();
        assert!(rot.max_abs_diff(&flipped) < 1e-9);
    }

    #[test]
    fn autocontrast_stretches() {
        let img = ImageBuffer::from_fn(1, 2, |_, x, _| if x == 0 { 0.25 } else { 0.75 }).unwrap();
        let out = apply_op(&img, OpDraw { op: ImageOp::Autocontrast, strength: 0.0 });
        assert_eq!(out.pixel(0, 0), [0.0; 3]);
        assert_eq!(out.pixel(0, 1), [1.0; 3]);
        let flat = ImageBuffer::filled(2, 2, 0.4).unwrap();
        assert_eq!(apply_op(&flat, OpDraw { op: ImageOp::Autocontrast, strength: 0.0 }), flat);
    }

    #[test]
    fn equalize_spreads_two_levels() {
        // 512 samples at 51 and 512 at 102 per channel: step = 512 / 255 = 2,
        // so the low level maps to 0 and the high level saturates
        let img = ImageBuffer::from_fn(32, 32, |y, _, _| if y < 16 { 0.2 } else { 0.4 }).unwrap();
        let out = apply_op(&img, OpDraw { op: ImageOp::Equalize, strength: 0.0 });
        assert_eq!(out.pixel(0, 0), [0.0; 3]);
        assert_eq!(out.pixel(31, 0), [1.0; 3]);
        // too few samples for a nonzero step: identity on the 8-bit grid
        let tiny = ImageBuffer::from_fn(2, 2, |y, _, _| if y == 0 { 0.2 } else { 0.4 }).unwrap();
        assert_eq!(apply_op(&tiny, OpDraw { op: ImageOp::Equalize, strength: 0.0 }), tiny);
    }

    #[test]
    fn unknown_name_rejected() {
        let img = gradient(2, 2);
        assert!(matches!(apply_named(&img, "gaussian_noise", 1.0), Err(Error::Parameter(_))));
        assert_eq!(apply_named(&img, "invert", 0.0).unwrap(), apply_op(&img, OpDraw { op: ImageOp::Invert, strength: 0.0 }));
    }

    #[test]
    fn names_round_trip() {
        for op in ImageOp::ALL {
            assert_eq!(op.name().parse::<ImageOp>().unwrap(), op);
        }
    }

    #[test]
    fn disjoint_from_imagenet_c() {
        const CORRUPTIONS: [&str; 15] = [
            "gaussian_noise",
            "shot_noise",
            "impulse_noise",
            "defocus_blur",
            "glass_blur",
            "motion_blur",
            "zoom_blur",
            "snow",
            "frost",
            "fog",
            "brightness",
            "contrast",
            "elastic_transform",
            "pixelate",
            "jpeg_compression",
        ];
        for op in ImageOp::ALL {
            assert!(!CORRUPTIONS.contains(&op.name()), "{op} overlaps ImageNet-C");
        }
    }

    #[test]
    fn sampled_ops_uniform_and_in_range() {
        let mut rng = SeededRng::new(13);
        let n = 13_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let d = sample_op(&mut rng);
            let (lo, hi) = d.op.strength_range();
            assert!(d.strength >= lo && d.strength <= hi);
            *counts.entry(d.op).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 13);
        for (op, c) in counts {
            assert!((c as f64 / n as f64 - 1.0 / 13.0).abs() < 0.01, "{op}: {c}");
        }
        assert_eq!(sample_op(&mut SeededRng::new(4)), sample_op(&mut SeededRng::new(4)));
    }

    #[test]
    fn windows_match_full_render() {
        let img = gradient(11, 14);
        let mut rng = SeededRng::new(21);
        for op in ImageOp::ALL {
            for _ in 0..5 {
                let (lo, hi) = op.strength_range();
                let draw = OpDraw { op, strength: rng.uniform(lo, hi) };
                let full = apply_op(&img, draw);
                for (y0, x0, h, w) in [(0, 0, 11, 14), (2, 3, 5, 7), (10, 13, 1, 1), (0, 5, 11, 2)] {
                    let win = apply_op_window(&img, draw, y0, x0, h, w).unwrap();
                    assert_eq!(win, full.crop(y0, x0, h, w).unwrap(), "{op} window ({y0}, {x0}) {h}x{w}");
                }
            }
        }
        assert!(apply_op_window(&img, sample_op(&mut rng), 5, 5, 7, 1).is_err());
    }
}
