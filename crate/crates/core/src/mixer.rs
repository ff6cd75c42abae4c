//! Patch- and pixel-level mixing of an input with a second image.
//!
//! A [`MixRegion`] is the support of the mask `B`: outside it `B = 1` and the
//! output is `x1` bit-for-bit; inside it the chosen [`MixOperator`] combines
//! `x1` and `x2` with intensity `lambda`. A region covering the whole image
//! is pixel-level mixing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_unit, ImageBuffer, MaskBuffer, CHANNELS};
use crate::rng::{sample_beta, SeededRng};

/// Floor applied before the geometric blend so `0^0` never occurs.
pub const GEOMETRIC_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixRegion {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub lambda: f64,
}

impl MixRegion {
    pub fn whole(height: usize, width: usize, lambda: f64) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w: width,
            h: height,
            lambda,
        }
    }

    pub fn is_whole_image(&self, height: usize, width: usize) -> bool {
        self.x0 == 0 && self.y0 == 0 && self.w == width && self.h == height
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::param("region must be nonempty"));
        }
        if self.x0 + self.w > width || self.y0 + self.h > height {
            return Err(Error::param(format!(
                "region {}x{}+{}+{} exceeds {height}x{width} image",
                self.h, self.w, self.y0, self.x0
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// How `x1` and `x2` combine inside the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixOperator {
    /// `lambda * x1 + (1 - lambda) * x2`, the plain mask blend.
    Convex,
    /// `clamp(x1 + (1 - lambda) * x2)`.
    Addition,
    /// `x1^lambda * x2^(1 - lambda)` on inputs floored at [`GEOMETRIC_FLOOR`].
    Multiplication,
    /// Binary `H x W x 1` mask, ones with probability `lambda`, shared by
    /// all channels.
    RandomPixel,
    /// Binary `H x W x 3` mask, ones with probability `lambda`, channels
    /// drawn independently.
    RandomElement,
}

impl MixOperator {
    /// The four operators IPMix samples from by default.
    pub const DEFAULT_SET: [MixOperator; 4] = [
        MixOperator::Addition,
        MixOperator::Multiplication,
        MixOperator::RandomPixel,
        MixOperator::RandomElement,
    ];

    pub const ALL: [MixOperator; 5] = [
        MixOperator::Convex,
        MixOperator::Addition,
        MixOperator::Multiplication,
        MixOperator::RandomPixel,
        MixOperator::RandomElement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixOperator::Convex => "convex",
            MixOperator::Addition => "addition",
            MixOperator::Multiplication => "multiplication",
            MixOperator::RandomPixel => "random_pixel",
            MixOperator::RandomElement => "random_element",
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, MixOperator::RandomPixel | MixOperator::RandomElement)
    }
}

impl fmt::Display for MixOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixOperator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixOperator::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::param(format!("unknown mix operator '{s}'")))
    }
}

/// Square patch with side drawn uniformly from `size_set`. A side at least
/// as large as the shorter image side selects the whole image.
pub fn sample_square_region(
    dims: (usize, usize),
    size_set: &[usize],
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<MixRegion> {
    let (h, w) = dims;
    if size_set.is_empty() {
        return Err(Error::param("patch size set is empty"));
    }
    if size_set.contains(&0) {
        return Err(Error::param("patch sizes must be positive"));
    }
    let side = size_set[rng.index(size_set.len())];
    let region = if side >= h.min(w) {
        // draw offsets anyway so the stream advances identically
        rng.index(1);
        rng.index(1);
        MixRegion::whole(h, w, 0.0)
    } else {
        let y0 = rng.index(h - side + 1);
        let x0 = rng.index(w - side + 1);
        MixRegion {
            x0,
            y0,
            w: side,
            h: side,
            lambda: 0.0,
        }
    };
    let lambda = sample_beta(alpha, rng)?.0;
    Ok(MixRegion { lambda, ..region })
}

/// Long, thin patch. With `m = min(H, W)`: the long side is uniform in
/// `[0.3 m, 0.8 m]` (rounded, at least 4), the short side uniform in
/// `[2, max(3, 0.1 m)]` (rounded) and capped at half the long side, so the
/// aspect ratio is always at least 2. Orientation is a fair coin.
pub fn sample_scar_region(dims: (usize, usize), alpha: f64, rng: &mut SeededRng) -> Result<MixRegion> {
    let (h, w) = dims;
    let m = h.min(w);
    if m < 8 {
        return Err(Error::param(format!("scar patches need min side >= 8, got {m}")));
    }
    let mf = m as f64;
    let long = (rng.uniform(0.3 * mf, 0.8 * mf).round() as usize).clamp(4, m);
    let short = (rng.uniform(2.0, (0.1 * mf).max(3.0)).round() as usize).clamp(2, long / 2);
    let (rh, rw) = if rng.bernoulli(0.5) { (short, long) } else { (long, short) };
    let y0 = rng.index(h - rh + 1);
    let x0 = rng.index(w - rw + 1);
    let lambda = sample_beta(alpha, rng)?.0;
    Ok(MixRegion {
        x0,
        y0,
        w: rw,
        h: rh,
        lambda,
    })
}

/// Binary mask over the region for the random operators, drawn from a
/// ChaCha8 stream seeded with `mask_seed`. Returns `None` for deterministic
/// operators. The mask is `region.h x region.w` with 1 or 3 channels.
pub fn region_mask(op: MixOperator, region: &MixRegion, mask_seed: u64) -> Option<MaskBuffer> {
    let channels = match op {
        MixOperator::RandomPixel => 1,
        MixOperator::RandomElement => CHANNELS,
        _ => return None,
    };
    let mut gen = ChaCha8Rng::seed_from_u64(mask_seed);
    let p = region.lambda;
    let data = (0..region.h * region.w * channels)
        .map(|_| if gen.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Some(MaskBuffer::new(region.h, region.w, channels, data).expect("mask dims are consistent"))
}

/// Mixes `x2` into `x1` inside `region`. Random operators draw their mask
/// from a seed taken from `rng`.
pub fn mix_in_region(
    x1: &ImageBuffer,
    x2: &ImageBuffer,
    region: &MixRegion,
    op: MixOperator,
    rng: &mut SeededRng,
) -> Result<ImageBuffer> {
    let mask_seed = rng.next_u64();
    mix_in_region_seeded(x1, x2, region, op, mask_seed)
}

/// [`mix_in_region`] with an explicit mask seed (used for trace replay).
pub fn mix_in_region_seeded(
    x1: &ImageBuffer,
    x2: &ImageBuffer,
    region: &MixRegion,
    op: MixOperator,
    mask_seed: u64,
) -> Result<ImageBuffer> {
    if x1.dims() != x2.dims() {
        return Err(Error::param(format!(
            "mix inputs differ in size: {:?} vs {:?}",
            x1.dims(),
            x2.dims()
        )));
    }
    let (h, w) = x1.dims();
    region.validate(h, w)?;
    let patch = x2.crop(region.y0, region.x0, region.h, region.w)?;
    let mut out = x1.clone();
    mix_patch_in_place(&mut out, &patch, region, op, mask_seed)?;
    Ok(out)
}

/// Mixes `patch`, the second input restricted to `region`, into `x1` in
/// place. Pixels outside the region are not touched.
pub fn mix_patch_in_place(
    x1: &mut ImageBuffer,
    patch: &ImageBuffer,
    region: &MixRegion,
    op: MixOperator,
    mask_seed: u64,
) -> Result<()> {
    let (h, w) = x1.dims();
    region.validate(h, w)?;
    if patch.dims() != (region.h, region.w) {
        return Err(Error::param(format!(
            "patch is {:?} but the region is {}x{}",
            patch.dims(),
            region.h,
            region.w
        )));
    }
    let lambda = region.lambda;
    let mask = region_mask(op, region, mask_seed);
    let b = patch.data();
    let row_len = region.w * CHANNELS;
    for ry in 0..region.h {
        let start = x1.index(region.y0 + ry, region.x0, 0);
        let row = &mut x1.data_mut()[start..start + row_len];
        let other = &b[ry * row_len..(ry + 1) * row_len];
        for (j, (p, &q)) in row.iter_mut().zip(other).enumerate() {
            let v = match op {
                MixOperator::Convex => lambda * *p + (1.0 - lambda) * q,
                MixOperator::Addition => *p + (1.0 - lambda) * q,
                MixOperator::Multiplication => {
                    (lambda * p.max(GEOMETRIC_FLOOR).ln() + (1.0 - lambda) * q.max(GEOMETRIC_FLOOR).ln()).exp()
                }
                MixOperator::RandomPixel | MixOperator::RandomElement => {
                    let m = mask.as_ref().expect("random operator has a mask");
                    if m.get(ry, j / CHANNELS, j % CHANNELS) == 1.0 {
                        *p
                    } else {
                        q
                    }
                }
            };
            *p = clamp_unit(v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> ImageBuffer {
        ImageBuffer::filled(32, 32, v).unwrap()
    }

    #[test]
    fn convex_patch_hand_case() {
        let region = MixRegion {
            x0: 0,
            y0: 0,
            w: 8,
            h: 8,
            lambda: 0.5,
        };
        let out = mix_in_region(&flat(0.2), &flat(0.6), &region, MixOperator::Convex, &mut SeededRng::new(0)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let expected = if y < 8 && x < 8 { 0.4 } else { 0.2 };
                assert!((out.get(y, x, 1) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_lambdas() {
        let x1 = ImageBuffer::from_fn(32, 32, |y, x, c| ((x + y + c) % 7) as f64 / 6.0).unwrap();
        let x2 = flat(0.9);
        let mut rng = SeededRng::new(1);
        let r1 = MixRegion { x0: 3, y0: 5, w: 10, h: 9, lambda: 1.0 };
        assert_eq!(mix_in_region(&x1, &x2, &r1, MixOperator::Convex, &mut rng).unwrap(), x1);
        assert_eq!(mix_in_region(&x1, &x2, &r1, MixOperator::RandomPixel, &mut rng).unwrap(), x1);
        assert_eq!(mix_in_region(&x1, &x2, &r1, MixOperator::RandomElement, &mut rng).unwrap(), x1);
        let whole0 = MixRegion::whole(32, 32, 0.0);
        assert_eq!(mix_in_region(&x1, &x2, &whole0, MixOperator::Convex, &mut rng).unwrap(), x2);
        assert_eq!(mix_in_region(&x1, &x2, &whole0, MixOperator::RandomPixel, &mut rng).unwrap(), x2);
    }

    #[test]
    fn addition_and_multiplication_forms() {
        let whole = MixRegion::whole(32, 32, 0.25);
        let mut rng = SeededRng::new(0);
        let add = mix_in_region(&flat(0.3), &flat(0.4), &whole, MixOperator::Addition, &mut rng).unwrap();
        assert!((add.get(0, 0, 0) - 0.6).abs() < 1e-12);
        let sat = mix_in_region(&flat(0.9), &flat(0.9), &whole, MixOperator::Addition, &mut rng).unwrap();
        assert_eq!(sat.get(0, 0, 0), 1.0);
        let mul = mix_in_region(&flat(0.25), &flat(1.0), &whole, MixOperator::Multiplication, &mut rng).unwrap();
        assert!((mul.get(0, 0, 0) - 0.25f64.powf(0.25)).abs() < 1e-12);
        let zero = mix_in_region(&flat(0.0), &flat(0.0), &whole, MixOperator::Multiplication, &mut rng).unwrap();
        assert!((zero.get(0, 0, 0) - GEOMETRIC_FLOOR).abs() < 1e-15);
    }

    #[test]
    fn random_pixel_mask_shared_across_channels() {
        let region = MixRegion::whole(32, 32, 0.5);
        let mask = region_mask(MixOperator::RandomPixel, &region, 77).unwrap();
        assert_eq!(mask.channels(), 1);
        let out = mix_in_region_seeded(&flat(0.0), &flat(1.0), &region, MixOperator::RandomPixel, 77).unwrap();
        for px in out.data().chunks_exact(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
        assert_eq!(region_mask(MixOperator::RandomElement, &region, 1).unwrap().channels(), 3);
        assert!(region_mask(MixOperator::Addition, &region, 1).is_none());
    }

    #[test]
    fn random_element_inclusion_rate() {
        let region = MixRegion::whole(64, 64, 0.5);
        let x1 = ImageBuffer::filled(64, 64, 1.0).unwrap();
        let x2 = ImageBuffer::zeros(64, 64).unwrap();
        let out = mix_in_region(&x1, &x2, &region, MixOperator::RandomElement, &mut SeededRng::new(3)).unwrap();
        let frac = out.data().iter().filter(|&&v| v == 1.0).count() as f64 / out.data().len() as f64;
        assert!((frac - 0.5).abs() < 0.04);
    }

    #[test]
    fn square_regions() {
        let mut rng = SeededRng::new(2);
        let r = sample_square_region((32, 32), &[32], 1.0, &mut rng).unwrap();
        assert!(r.is_whole_image(32, 32));
        for _ in 0..2000 {
            let r = sample_square_region((32, 32), &[4], 1.0, &mut rng).unwrap();
            assert!(r.x0 <= 28 && r.y0 <= 28 && r.w == 4 && r.h == 4);
            assert!((0.0..=1.0).contains(&r.lambda));
        }
        // sizes beyond the image select the whole image
        let r = sample_square_region((224, 224), &[256], 1.0, &mut rng).unwrap();
        assert!(r.is_whole_image(224, 224));
        assert!(sample_square_region((32, 32), &[], 1.0, &mut rng).is_err());
    }

    #[test]
    fn square_size_frequencies() {
        let mut rng = SeededRng::new(10);
        let sizes = [4, 8, 16, 32];
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let r = sample_square_region((32, 32), &sizes, 1.0, &mut rng).unwrap();
            counts[sizes.iter().position(|&s| s == r.w).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn scar_regions() {
        let mut rng = SeededRng::new(4);
        for _ in 0..10_000 {
            let r = sample_scar_region((32, 32), 1.0, &mut rng).unwrap();
            r.validate(32, 32).unwrap();
            let (long, short) = (r.w.max(r.h), r.w.min(r.h));
            assert!(long >= 2 * short);
        }
        for _ in 0..5_000 {
            let r = sample_scar_region((224, 224), 1.0, &mut rng).unwrap();
            let (long, short) = (r.w.max(r.h), r.w.min(r.h));
            assert!((67..=179).contains(&long), "long {long}");
            assert!((2..=22).contains(&short), "short {short}");
        }
        for _ in 0..1000 {
            let r = sample_scar_region((8, 8), 1.0, &mut rng).unwrap();
            r.validate(8, 8).unwrap();
            assert!(r.w.max(r.h) >= 2 * r.w.min(r.h));
        }
        assert!(sample_scar_region((7, 100), 1.0, &mut rng).is_err());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let region = MixRegion::whole(32, 32, 0.5);
        let small = ImageBuffer::zeros(16, 16).unwrap();
        assert!(mix_in_region(&flat(0.1), &small, &region, MixOperator::Convex, &mut SeededRng::new(0)).is_err());
        let outside = MixRegion { x0: 30, y0: 0, w: 4, h: 4, lambda: 0.5 };
        assert!(mix_in_region(&flat(0.1), &flat(0.2), &outside, MixOperator::Convex, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn operator_names_round_trip() {
        for op in MixOperator::ALL {
            assert_eq!(op.name().parse::<MixOperator>().unwrap(), op);
        }
        assert!("blend".parse::<MixOperator>().is_err());
    }
}
