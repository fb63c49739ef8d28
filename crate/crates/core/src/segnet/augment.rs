//! Weak (geometric) and strong (photometric) augmentation.
//!
//! Weak transforms move the image and its mask together: a horizontal flip,
//! a number of quarter turns and an optional small affine warp (rotation up
//! to ±15°, isotropic scale in `[0.9, 1.1]`, translation up to two pixels).
//! Images are resampled bilinearly and masks by nearest neighbour, both with
//! edge clamping. Strong transforms only touch intensities.

use alloc::vec;

use rand::Rng;

use crate::domainsim::Sample;
use crate::math;
use crate::seed;
use crate::tensor::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub angle_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakTransform {
    pub hflip: bool,
    pub quarter_turns: u8,
    pub affine: Option<Affine>,
}

impl WeakTransform {
    pub const IDENTITY: WeakTransform = WeakTransform {
        hflip: false,
        quarter_turns: 0,
        affine: None,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5);
        let quarter_turns = rng.random_range(0..4u8);
        let affine = rng.random_bool(0.5).then(|| Affine {
            angle_deg: rng.random_range(-15.0..=15.0),
            scale: rng.random_range(0.9..=1.1),
            tx: rng.random_range(-2.0..=2.0),
            ty: rng.random_range(-2.0..=2.0),
        });
        WeakTransform {
            hflip,
            quarter_turns,
            affine,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let s = img.size();
        let mut out = permute(s, img.pixels(), self.hflip, self.quarter_turns);
        if let Some(a) = self.affine {
            let src = out.clone();
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) = a.source(s, y, x);
                    out[y * s + x] = bilinear(&src, s, sy, sx);
                }
            }
        }
        let mut img = Image::new(s, out).expect("same size");
        img.clip_unit();
        img
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let s = mask.size();
        let mut out = permute(s, mask.labels(), self.hflip, self.quarter_turns);
        if let Some(a) = self.affine {
            let src = out.clone();
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) = a.source(s, y, x);
                    let yi = clamp_index(libm::round(sy), s);
                    let xi = clamp_index(libm::round(sx), s);
                    out[y * s + x] = src[yi * s + xi];
                }
            }
        }
        Mask::new(s, out).expect("same size")
    }
}

impl Affine {
    /// Source coordinate sampled for output pixel `(y, x)`.
    fn source(&self, s: usize, y: usize, x: usize) -> (f64, f64) {
        let c = (s as f64 - 1.0) / 2.0;
        let theta = self.angle_deg.to_radians();
        let (sin, cos) = (math::sin(theta), math::cos(theta));
        let py = (y as f64 - c - self.ty) / self.scale;
        let px = (x as f64 - c - self.tx) / self.scale;
        // inverse rotation
        let sx = cos * px + sin * py;
        let sy = -sin * px + cos * py;
        (sy + c, sx + c)
    }
}

fn clamp_index(v: f64, s: usize) -> usize {
    v.clamp(0.0, (s - 1) as f64) as usize
}

fn bilinear(src: &[f64], s: usize, y: f64, x: f64) -> f64 {
    let max = (s - 1) as f64;
    let y = y.clamp(0.0, max);
    let x = x.clamp(0.0, max);
    let y0 = math::floor(y) as usize;
    let x0 = math::floor(x) as usize;
    let y1 = (y0 + 1).min(s - 1);
    let x1 = (x0 + 1).min(s - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = src[y0 * s + x0] * (1.0 - fx) + src[y0 * s + x1] * fx;
    let bot = src[y1 * s + x0] * (1.0 - fx) + src[y1 * s + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Horizontal flip followed by `turns` counter-clockwise quarter turns.
fn permute<T: Copy + Default>(s: usize, src: &[T], hflip: bool, turns: u8) -> alloc::vec::Vec<T> {
    let mut out = vec![T::default(); s * s];
    for y in 0..s {
        for x in 0..s {
            let (mut yy, mut xx) = (y, if hflip { s - 1 - x } else { x });
            for _ in 0..turns % 4 {
                (yy, xx) = (s - 1 - xx, yy);
            }
            out[yy * s + xx] = src[y * s + x];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongTransform {
    /// Contrast factor around the image mean.
    pub contrast: f64,
    pub brightness: f64,
    pub blur_sigma: Option<f64>,
}

impl StrongTransform {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StrongTransform {
            contrast: rng.random_range(0.7..=1.3),
            brightness: rng.random_range(-0.15..=0.15),
            blur_sigma: rng.random_bool(0.5).then(|| rng.random_range(0.3..=1.0)),
        }
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let s = img.size();
        let mean = img.mean();
        let mut px: alloc::vec::Vec<f64> = img
            .pixels()
            .iter()
            .map(|&p| (p - mean) * self.contrast + mean + self.brightness)
            .collect();
        if let Some(sigma) = self.blur_sigma {
            px = gaussian_blur(&px, s, sigma);
        }
        let mut out = Image::new(s, px).expect("same size");
        out.clip_unit();
        out
    }
}

fn gaussian_blur(src: &[f64], s: usize, sigma: f64) -> alloc::vec::Vec<f64> {
    const R: isize = 2;
    let mut k = [0.0; 5];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - R as f64;
        *w = math::exp(-d * d / (2.0 * sigma * sigma));
    }
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= z);
    let at = |i: isize| i.clamp(0, s as isize - 1) as usize;
    let mut tmp = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            tmp[y * s + x] = (-R..=R)
                .map(|d| k[(d + R) as usize] * src[y * s + at(x as isize + d)])
                .sum();
        }
    }
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = (-R..=R)
                .map(|d| k[(d + R) as usize] * tmp[at(y as isize + d) * s + x])
                .sum();
        }
    }
    out
}

/// Applies a seeded weak transform to the image and, if present, the mask.
pub fn weak_augment(sample: &Sample, rng_seed: u64) -> Sample {
    let t = WeakTransform::sample(&mut seed::rng(rng_seed, &[]));
    let mut out = sample.clone();
    if t.is_identity() {
        return out;
    }
    out.image = t.apply_image(&sample.image);
    out.mask = sample.mask.as_ref().map(|m| t.apply_mask(m));
    out
}

/// Applies a seeded photometric transform; masks are left untouched.
pub fn strong_augment(sample: &Sample, rng_seed: u64) -> Sample {
    let t = StrongTransform::sample(&mut seed::rng(rng_seed, &[]));
    let mut out = sample.clone();
    out.image = t.apply_image(&sample.image);
    out
}
