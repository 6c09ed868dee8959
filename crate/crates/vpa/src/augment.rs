//! Seeded image augmentations: weak (random crop), strong (reduced
//! RandAugment pool), and AugMix-style chain mixing.
//!
//! All functions are pure in (image, parameters, seed): the same triple
//! always produces bit-identical output. Images are `[3, H, W]` tensors in
//! `[0, 1]`; every augmentation preserves shape and value range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VpaError};
use crate::tensor::Tensor;

/// Which augmentation to apply and with what knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentSpec {
    Weak { padding: usize },
    Strong { n_ops: usize, magnitude: u8 },
    Augmix { width: usize, depth: usize, alpha: f64 },
}

impl AugmentSpec {
    pub fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        match *self {
            AugmentSpec::Weak { padding } => random_crop(image, padding, seed),
            AugmentSpec::Strong { n_ops, magnitude } => {
                rand_augment_lite(image, n_ops, magnitude, seed)
            }
            AugmentSpec::Augmix { width, depth, alpha } => {
                augmix_lite(image, width, depth, alpha, seed)
            }
        }
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize)> {
    if image.ndim() != 3 || image.shape[0] != 3 {
        return Err(VpaError::Shape(format!("expected [3, H, W] image, got {:?}", image.shape)));
    }
    Ok((image.shape[1], image.shape[2]))
}

fn px(image: &Tensor, c: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    image.data[c * h * w + y * w + x]
}

/// Reflect index into [0, n).
fn reflect(i: isize, n: isize) -> usize {
    let mut i = i;
    // period 2(n-1) reflection
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    i = i.rem_euclid(p);
    if i >= n {
        i = p - i;
    }
    i as usize
}

/// Sample with edge clamp at non-integer coordinates (bilinear).
fn sample_bilinear(image: &Tensor, c: usize, fy: f64, fx: f64, h: usize, w: usize) -> f64 {
    let y0 = fy.floor();
    let x0 = fx.floor();
    let dy = fy - y0;
    let dx = fx - x0;
    let cl = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (y0i, y1i) = (cl(y0, h), cl(y0 + 1.0, h));
    let (x0i, x1i) = (cl(x0, w), cl(x0 + 1.0, w));
    let v00 = px(image, c, y0i, x0i, h, w);
    let v01 = px(image, c, y0i, x1i, h, w);
    let v10 = px(image, c, y1i, x0i, h, w);
    let v11 = px(image, c, y1i, x1i, h, w);
    v00 * (1.0 - dy) * (1.0 - dx) + v01 * (1.0 - dy) * dx + v10 * dy * (1.0 - dx) + v11 * dy * dx
}

/// Reflect-pad by `padding` pixels, then crop back to the original size at a
/// seeded offset. padding = 0 is the identity.
pub fn random_crop(image: &Tensor, padding: usize, seed: u64) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    if padding == 0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = rng.gen_range(0..=2 * padding) as isize - padding as isize;
    let dx = rng.gen_range(0..=2 * padding) as isize - padding as isize;
    let mut out = Tensor::zeros(&image.shape);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = reflect(y as isize + dy, h as isize);
                let sx = reflect(x as isize + dx, w as isize);
                out.data[c * h * w + y * w + x] = px(image, c, sy, sx, h, w);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StrongOp {
    Brightness,
    Contrast,
    Solarize,
    Posterize,
    TranslateX,
    TranslateY,
    Rotate,
    Sharpness,
}

const STRONG_POOL: [StrongOp; 8] = [
    StrongOp::Brightness,
    StrongOp::Contrast,
    StrongOp::Solarize,
    StrongOp::Posterize,
    StrongOp::TranslateX,
    StrongOp::TranslateY,
    StrongOp::Rotate,
    StrongOp::Sharpness,
];

/// AugMix chains avoid the inversion-style ops so the mixed result stays
/// close to the natural image manifold.
const MIX_POOL: [StrongOp; 5] = [
    StrongOp::Brightness,
    StrongOp::TranslateX,
    StrongOp::TranslateY,
    StrongOp::Rotate,
    StrongOp::Sharpness,
];

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Magnitude scale: each op maps magnitude 0..10 linearly onto its own
/// parameter range (0 = identity or near-identity, 10 = strongest).
fn apply_op(image: &Tensor, op: StrongOp, magnitude: u8, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = dims(image).expect("validated upstream");
    let m = f64::from(magnitude.min(10)) / 10.0;
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    match op {
        StrongOp::Brightness => {
            // delta in [-0.3, 0.3]
            let delta = sign * m * 0.3;
            image.map(|v| clamp01(v + delta))
        }
        StrongOp::Contrast => {
            // factor in [1/(1+0.6m), 1+0.6m] around the image mean
            let factor = if sign > 0.0 { 1.0 + 0.6 * m } else { 1.0 / (1.0 + 0.6 * m) };
            let mean = image.data.iter().sum::<f64>() / image.numel() as f64;
            image.map(|v| clamp01(mean + factor * (v - mean)))
        }
        StrongOp::Solarize => {
            // threshold from 1.0 (identity) down to 0.3
            let t = 1.0 - m * 0.7;
            image.map(|v| if v >= t { 1.0 - v } else { v })
        }
        StrongOp::Posterize => {
            // 256 levels (identity) down to 16
            let levels = (256.0 - m * 240.0).round().max(2.0);
            image.map(|v| clamp01((v * (levels - 1.0)).round() / (levels - 1.0)))
        }
        StrongOp::TranslateX | StrongOp::TranslateY => {
            // shift up to 30% of the side, edge clamp fill
            let shift = sign * m * 0.3 * w as f64;
            let (dy, dx) = if op == StrongOp::TranslateX { (0.0, shift) } else { (shift, 0.0) };
            let mut out = Tensor::zeros(&image.shape);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out.data[c * h * w + y * w + x] =
                            sample_bilinear(image, c, y as f64 + dy, x as f64 + dx, h, w);
                    }
                }
            }
            out
        }
        StrongOp::Rotate => {
            // up to +/-30 degrees about the center
            let theta = sign * m * 30.0_f64.to_radians();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (sin, cos) = theta.sin_cos();
            let mut out = Tensor::zeros(&image.shape);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let ry = y as f64 - cy;
                        let rx = x as f64 - cx;
                        let sy = cy + cos * ry - sin * rx;
                        let sx = cx + sin * ry + cos * rx;
                        out.data[c * h * w + y * w + x] = sample_bilinear(image, c, sy, sx, h, w);
                    }
                }
            }
            out
        }
        StrongOp::Sharpness => {
            // unsharp mask: img + amount * (img - box3(img))
            let amount = m * 1.5;
            let mut out = Tensor::zeros(&image.shape);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for oy in -1isize..=1 {
                            for ox in -1isize..=1 {
                                let sy = reflect(y as isize + oy, h as isize);
                                let sx = reflect(x as isize + ox, w as isize);
                                acc += px(image, c, sy, sx, h, w);
                            }
                        }
                        let blur = acc / 9.0;
                        let v = px(image, c, y, x, h, w);
                        out.data[c * h * w + y * w + x] = clamp01(v + amount * (v - blur));
                    }
                }
            }
            out
        }
    }
}

/// Reduced RandAugment: `n_ops` uniformly drawn ops from the raw-array pool
/// (brightness, contrast, solarize, posterize, translate x/y, rotate,
/// sharpness) at a shared magnitude.
pub fn rand_augment_lite(image: &Tensor, n_ops: usize, magnitude: u8, seed: u64) -> Result<Tensor> {
    dims(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for _ in 0..n_ops {
        let op = STRONG_POOL[rng.gen_range(0..STRONG_POOL.len())];
        out = apply_op(&out, op, magnitude, &mut rng);
    }
    Ok(out)
}

/// AugMix-style composition: `width` chains of `depth` ops mixed with
/// Dirichlet(alpha) weights, then a Beta(alpha, alpha) skip-connection back
/// to the clean image.
pub fn augmix_lite(
    image: &Tensor,
    width: usize,
    depth: usize,
    alpha: f64,
    seed: u64,
) -> Result<Tensor> {
    dims(image)?;
    if width < 1 {
        return Err(VpaError::Param("augmix width must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = if width == 1 {
        vec![1.0]
    } else {
        Dirichlet::new(&vec![alpha; width])
            .map_err(|e| VpaError::Param(format!("augmix alpha: {e}")))?
            .sample(&mut rng)
    };
    let mut mixed = Tensor::zeros(&image.shape);
    for wgt in weights {
        let mut chain = image.clone();
        for _ in 0..depth {
            let op = MIX_POOL[rng.gen_range(0..MIX_POOL.len())];
            let mag = rng.gen_range(1..=7u8);
            chain = apply_op(&chain, op, mag, &mut rng);
        }
        for (o, v) in mixed.data.iter_mut().zip(&chain.data) {
            *o += wgt * v;
        }
    }
    let skip = Beta::new(alpha, alpha)
        .map_err(|e| VpaError::Param(format!("augmix alpha: {e}")))?
        .sample(&mut rng);
    let mut out = Tensor::zeros(&image.shape);
    for i in 0..out.data.len() {
        out.data[i] = clamp01(skip * image.data[i] + (1.0 - skip) * mixed.data[i]);
    }
    Ok(out)
}
