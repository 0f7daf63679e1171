//! Seeded synthetic datasets. Images are on the 0–255 scale.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::tasks::TaskSpec;
use crate::tensor::Tensor;

/// Noise is rounded to this grid so `x̂ − residual` recovers the clean
/// image exactly.
pub const NOISE_QUANTUM: f64 = 1.0 / 1024.0;

pub const MIN_POSITIVE_FRACTION: f64 = 0.05;
pub const MAX_POSITIVE_FRACTION: f64 = 0.80;

/// Smooth random field: integer values around 128 from a few low-frequency
/// sinusoids.
pub fn smooth_field<R: Rng>(h: usize, w: usize, rng: &mut R) -> Tensor {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(10.0..30.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..TAU),
            ]
        })
        .collect();
    Tensor::from_fn(&[h, w, 1], |k| {
        let (i, j) = ((k / w) as f64, (k % w) as f64);
        let v: f64 = waves
            .iter()
            .map(|[a, fy, fx, p]| a * (TAU * (fy * i / h as f64 + fx * j / w as f64) + p).sin())
            .sum();
        (128.0 + v).round().clamp(0.0, 255.0)
    })
}

fn shape_mask<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<bool> {
    loop {
        let mut mask = vec![false; h * w];
        for _ in 0..rng.random_range(1..=3) {
            let ellipse = rng.random_bool(0.5);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(0.15..0.4) * h as f64;
            let rx = rng.random_range(0.15..0.4) * w as f64;
            for (k, m) in mask.iter_mut().enumerate() {
                let dy = ((k / w) as f64 + 0.5 - cy) / ry;
                let dx = ((k % w) as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                *m |= inside;
            }
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (h * w) as f64;
        if (MIN_POSITIVE_FRACTION..=MAX_POSITIVE_FRACTION).contains(&frac) {
            return mask;
        }
    }
}

/// Bright ellipses/rectangles on a darker textured background. `y` is the
/// shape mask tiled over three channels.
pub fn gen_binary_seg<R: Rng>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<Vec<Example>> {
    let (h, w) = spec.size;
    if h < 8 || w < 8 {
        return Err(Error::Invalid(format!("binary segmentation needs size >= 8, got {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mask = shape_mask(h, w, rng);
        let bg = rng.random_range(30.0..80.0);
        let fg = rng.random_range(170.0..220.0);
        let (fy, fx, ph) = (
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..TAU),
        );
        let x = Tensor::from_fn(&[h, w, 1], |k| {
            let (i, j) = ((k / w) as f64, (k % w) as f64);
            let base = if mask[k] {
                fg
            } else {
                bg + 12.0 * (TAU * (fy * i / h as f64 + fx * j / w as f64) + ph).sin()
            };
            (base + rng.random_range(-8.0..8.0)).round().clamp(0.0, 255.0)
        });
        let y = Tensor::from_fn(&[h, w, 3], |k| if mask[k / 3] { 1.0 } else { 0.0 });
        out.push(Example { x, y });
    }
    Ok(out)
}

/// Noisy image `x̂ = clean + noise` and residual target `y = noise`, with
/// noise `N(0, σ²)` rounded to [`NOISE_QUANTUM`].
pub fn gen_denoise<R: Rng>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<Vec<Example>> {
    let (h, w) = spec.size;
    let normal = Normal::new(0.0, spec.sigma)
        .ok()
        .filter(|_| spec.sigma > 0.0)
        .ok_or_else(|| Error::Invalid(format!("noise sigma {} must be positive", spec.sigma)))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let clean = smooth_field(h, w, rng);
        let noise = Tensor::from_fn(&[h, w, 1], |_| (normal.sample(rng) / NOISE_QUANTUM).round() * NOISE_QUANTUM);
        let x = clean.zip_map(&noise, |c, e| c + e)?;
        out.push(Example { x, y: noise });
    }
    Ok(out)
}

/// Central hidden block of an `h×w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Block {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.top + self.h).contains(&i) && (self.left..self.left + self.w).contains(&j)
    }
}

/// Block of area `fraction·h·w`; each side must be even and the block
/// exactly centred.
pub fn inpaint_block(size: (usize, usize), fraction: f64) -> Result<Block> {
    let (h, w) = size;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("mask fraction {fraction} outside (0, 1)")));
    }
    let side = |n: usize| (n as f64 * fraction.sqrt()).round() as usize;
    let (bh, bw) = (side(h), side(w));
    if bh == 0 || bw == 0 || bh % 2 != 0 || bw % 2 != 0 || (h - bh) % 2 != 0 || (w - bw) % 2 != 0 {
        return Err(Error::Invalid(format!(
            "mask fraction {fraction} on {h}x{w} gives a {bh}x{bw} block that is not even and centred"
        )));
    }
    if ((bh * bw) as f64 - fraction * (h * w) as f64).abs() > 0.5 {
        return Err(Error::Invalid(format!(
            "mask fraction {fraction} on {h}x{w} is not an exact block area"
        )));
    }
    Ok(Block {
        top: (h - bh) / 2,
        left: (w - bw) / 2,
        h: bh,
        w: bw,
    })
}

/// Occluded image (block zeroed) and the hidden block contents.
pub fn gen_inpaint<R: Rng>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<Vec<Example>> {
    let (h, w) = spec.size;
    let b = inpaint_block(spec.size, spec.mask_fraction)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let img = smooth_field(h, w, rng);
        let x = Tensor::from_fn(&[h, w, 1], |k| {
            if b.contains(k / w, k % w) {
                0.0
            } else {
                img.data()[k]
            }
        });
        let y = Tensor::from_fn(&[b.h, b.w, 1], |k| img.data()[(b.top + k / b.w) * w + b.left + k % b.w]);
        out.push(Example { x, y });
    }
    Ok(out)
}

/// Paste a block back into an occluded image.
pub fn paste_block(x: &Tensor, block: &Tensor, b: Block) -> Tensor {
    let w = x.shape()[1];
    let mut out = x.clone();
    for (k, &v) in block.data().iter().enumerate() {
        out.data_mut()[(b.top + k / b.w) * w + b.left + k % b.w] = v;
    }
    out
}
