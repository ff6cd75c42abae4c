//! Real-valued RGB buffers, masks, codec glue and the convex blend that
//! every mixing operator builds on.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major as `(y, x, channel)`.
//! Quantization to 8 bits happens only in [`encode_png`], using
//! round-half-up: `q = floor(v * 255 + 0.5)`.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Validating constructor: dimensions must be positive, `data` must hold
    /// `height * width * 3` finite samples in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * CHANNELS {
            return Err(Error::param(format!(
                "buffer length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * CHANNELS],
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    /// Builds a buffer from `f(y, x, c)`, clamping each sample into range.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(height, width)?;
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(clamp_unit(f(y, x, c)));
                }
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Crate-internal constructor for data already known to be valid up to
    /// rounding; samples are clamped.
    pub(crate) fn from_raw(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Callers must keep every sample in `[0, 1]`.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = self.index(y, x, 0);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Largest absolute per-sample difference. Panics on dimension mismatch.
    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear resize (pixel-center aligned, edge clamped).
    pub fn resize(&self, height: usize, width: usize) -> Result<ImageBuffer> {
        check_dims(height, width)?;
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        Ok(self.resize_window(height, width, Window::full(height, width)))
    }

    /// The `win` part of `resize(height, width)`, computing only those pixels.
    fn resize_window(&self, height: usize, width: usize, win: Window) -> ImageBuffer {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let cols: Vec<(usize, usize, f64)> = (win.x0..win.x0 + win.w)
            .map(|x| {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                (x0, (x0 + 1).min(self.width - 1), fx - x0 as f64)
            })
            .collect();
        let mut data = Vec::with_capacity(win.h * win.w * CHANNELS);
        for y in win.y0..win.y0 + win.h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for &(x0, x1, tx) in &cols {
                for c in 0..CHANNELS {
                    let top = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
                    let bot = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        ImageBuffer::from_raw(win.h, win.w, data)
    }

    /// Copies out the `h x w` window at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageBuffer> {
        check_dims(h, w)?;
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::param(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(ImageBuffer { height: h, width: w, data })
    }

    /// Center-crops to the target aspect ratio, then resizes.
    pub fn fit_to(&self, height: usize, width: usize) -> Result<ImageBuffer> {
        check_dims(height, width)?;
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        self.fit_window(height, width, 0, 0, height, width)
    }

    /// The `h x w` window at `(y0, x0)` of `fit_to(height, width)`, without
    /// rendering the rest of it.
    pub fn fit_window(&self, height: usize, width: usize, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageBuffer> {
        check_dims(height, width)?;
        check_dims(h, w)?;
        if y0 + h > height || x0 + w > width {
            return Err(Error::param(format!("window {h}x{w} at ({y0}, {x0}) exceeds {height}x{width}")));
        }
        let win = Window { y0, x0, h, w };
        if (height, width) == self.dims() {
            return self.crop(y0, x0, h, w);
        }
        let target = width as f64 / height as f64;
        let current = self.width as f64 / self.height as f64;
        let (ch, cw) = if current > target {
            let cw = ((self.height as f64 * target).round() as usize).clamp(1, self.width);
            (self.height, cw)
        } else {
            let ch = ((self.width as f64 / target).round() as usize).clamp(1, self.height);
            (ch, self.width)
        };
        if (ch, cw) == self.dims() {
            return Ok(self.resize_window(height, width, win));
        }
        let cropped = self.crop((self.height - ch) / 2, (self.width - cw) / 2, ch, cw)?;
        if (height, width) == cropped.dims() {
            return cropped.crop(y0, x0, h, w);
        }
        Ok(cropped.resize_window(height, width, win))
    }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

impl Window {
    fn full(h: usize, w: usize) -> Self {
        Self { y0: 0, x0: 0, h, w }
    }
}

/// Blend mask with one channel (broadcast) or three.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl MaskBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if channels != 1 && channels != CHANNELS {
            return Err(Error::param(format!("mask channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::param("mask length does not match its dimensions"));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("mask values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        let c = if self.channels == 1 { 0 } else { c };
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// `1 - mask`, elementwise.
    pub fn complement(&self) -> MaskBuffer {
        MaskBuffer {
            data: self.data.iter().map(|v| 1.0 - v).collect(),
            ..self.clone()
        }
    }
}

/// `mask * x1 + (1 - mask) * x2`, elementwise.
pub fn blend_convex(x1: &ImageBuffer, x2: &ImageBuffer, mask: &MaskBuffer) -> Result<ImageBuffer> {
    if x1.dims() != x2.dims() || x1.dims() != (mask.height, mask.width) {
        return Err(Error::param(format!(
            "shape mismatch: x1 {:?}, x2 {:?}, mask {:?}",
            x1.dims(),
            x2.dims(),
            (mask.height, mask.width)
        )));
    }
    let data = x1
        .data
        .iter()
        .zip(&x2.data)
        .enumerate()
        .map(|(i, (&a, &b))| {
            let m = if mask.channels == 1 {
                mask.data[i / CHANNELS]
            } else {
                mask.data[i]
            };
            m * a + (1.0 - m) * b
        })
        .collect();
    Ok(ImageBuffer::from_raw(x1.height, x1.width, data))
}

/// Decodes PNG or JPEG bytes. Alpha is dropped and grayscale promoted to RGB.
pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        len: bytes.len(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    check_dims(h as usize, w as usize)?;
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(ImageBuffer {
        height: h as usize,
        width: w as usize,
        data,
    })
}

/// Round-half-up quantization of one sample.
#[inline]
pub fn quantize(v: f64) -> u8 {
    // Saturating cast truncates toward zero, which is floor for the
    // non-negative range and clamps (NaN to 0) outside it.
    (v * 255.0 + 0.5) as u8
}

/// 8-bit RGB samples, row-major.
pub fn to_rgb8(img: &ImageBuffer) -> Vec<u8> {
    img.data.iter().map(|&v| quantize(v)).collect()
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let rgb = RgbImage::from_raw(img.width as u32, img.height as u32, to_rgb8(img))
        .ok_or_else(|| Error::Encode("buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    // NaN collapses to 0
    if v >= 0.0 {
        v.min(1.0)
    } else {
        0.0
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::param(format!("image dimensions must be positive, got {height}x{width}")));
    }
    Ok(())
}
