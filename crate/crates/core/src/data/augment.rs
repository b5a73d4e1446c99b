//! Resizing, mean subtraction, cropping and flipping.
//!
//! Training views: resize the shorter side to a random length in
//! `[jitter_min, jitter_max]`, subtract channel means, take a random
//! `crop x crop` window, flip horizontally with probability `flip_prob`.
//!
//! Ten-crop order: top-left, top-right, bottom-left, bottom-right, center of
//! the image resized to `eval_scale`, then the same five windows taken from
//! its horizontal mirror.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter_min: usize,
    pub jitter_max: usize,
    pub crop: usize,
    pub flip_prob: f64,
    /// Shorter-side length used for evaluation views.
    pub eval_scale: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_min: 36,
            jitter_max: 48,
            crop: 28,
            flip_prob: 0.5,
            eval_scale: 36,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.jitter_min == 0 || self.jitter_min > self.jitter_max || self.eval_scale == 0 {
            return Err(Error::BadConfig(format!("invalid augmentation sizes: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::BadConfig(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape("[C,H,W] image", s)),
    }
}

/// Source coordinate of output index `i` when mapping `n_in` samples onto
/// `n_out` with the first and last samples aligned.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("positive output size", [out_h, out_w]));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = source_coord(i, n_in, n_out);
                let i0 = (s.floor() as usize).min(n_in - 1);
                (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = img.values();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
            for &(x0, x1, fx) in &tx {
                let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Resizes so the shorter side equals `side`, keeping the aspect ratio
/// (longer side rounded to the nearest integer).
pub fn resize_shorter(img: &Tensor, side: usize) -> Result<Tensor> {
    let (_, h, w) = dims(img)?;
    let scaled = |long: usize, short: usize| (long * side + short / 2) / short;
    let (oh, ow) = if h <= w { (side, scaled(w, h)) } else { (scaled(h, w), side) };
    resize_bilinear(img, oh, ow)
}

/// Per-channel mean over every pixel of every image.
pub fn channel_means<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for img in images {
        let (c, h, w) = dims(img)?;
        if sums.is_empty() {
            sums = vec![0.0; c];
        } else if sums.len() != c {
            return Err(Error::shape(format!("{} channels", sums.len()), c));
        }
        for (ch, plane) in img.values().chunks_exact(h * w).enumerate() {
            sums[ch] += plane.iter().sum::<f64>();
        }
        count += h * w;
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

pub fn subtract_means(img: &Tensor, means: &[f64]) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if means.len() != c {
        return Err(Error::shape(format!("{c} channel means"), means.len()));
    }
    let mut out = img.clone();
    for (plane, m) in out.values_mut().chunks_exact_mut(h * w).zip(means) {
        plane.iter_mut().for_each(|v| *v -= m);
    }
    Ok(out)
}

pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::CropTooLarge { crop: size, height: h, width: w });
    }
    let src = img.values();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            out.extend_from_slice(&src[(ch * h + y) * w + left..][..size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(img)?;
    let mut out = img.clone();
    out.values_mut().chunks_exact_mut(w).for_each(<[f64]>::reverse);
    Ok(out)
}

fn check_fits(img: &Tensor, size: usize) -> Result<()> {
    let (_, h, w) = dims(img)?;
    if size > h.min(w) {
        return Err(Error::CropTooLarge { crop: size, height: h, width: w });
    }
    Ok(())
}

/// One random training view. Draws, in order: the jittered side, the crop
/// row, the crop column, the flip coin.
pub fn augment(img: &Tensor, rng: &mut impl Rng, cfg: &AugmentConfig, means: &[f64]) -> Result<Tensor> {
    cfg.validate()?;
    let side = rng.gen_range(cfg.jitter_min..=cfg.jitter_max);
    let resized = resize_shorter(img, side)?;
    check_fits(&resized, cfg.crop)?;
    let (_, h, w) = dims(&resized)?;
    let top = rng.gen_range(0..=h - cfg.crop);
    let left = rng.gen_range(0..=w - cfg.crop);
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    // Cropping before subtracting touches fewer pixels and is elementwise
    // identical to the documented order.
    let view = subtract_means(&crop(&resized, top, left, cfg.crop)?, means)?;
    if flip {
        flip_horizontal(&view)
    } else {
        Ok(view)
    }
}

/// Offsets `(top, left)` of the five windows, in ten-crop order.
fn five_offsets(h: usize, w: usize, size: usize) -> [(usize, usize); 5] {
    let (b, r) = (h - size, w - size);
    [(0, 0), (0, r), (b, 0), (b, r), (b / 2, r / 2)]
}

fn eval_base(img: &Tensor, cfg: &AugmentConfig, means: &[f64]) -> Result<Tensor> {
    let resized = resize_shorter(img, cfg.eval_scale)?;
    check_fits(&resized, cfg.crop)?;
    subtract_means(&resized, means)
}

pub fn ten_crop(img: &Tensor, cfg: &AugmentConfig, means: &[f64]) -> Result<Vec<Tensor>> {
    let base = eval_base(img, cfg, means)?;
    let (_, h, w) = dims(&base)?;
    let mirrored = flip_horizontal(&base)?;
    let offsets = five_offsets(h, w, cfg.crop);
    [&base, &mirrored]
        .into_iter()
        .flat_map(|src| offsets.iter().map(move |&(t, l)| crop(src, t, l, cfg.crop)))
        .collect()
}

/// The deterministic single evaluation view: the center window of the
/// ten-crop set.
pub fn center_crop(img: &Tensor, cfg: &AugmentConfig, means: &[f64]) -> Result<Tensor> {
    let base = eval_base(img, cfg, means)?;
    let (_, h, w) = dims(&base)?;
    let (t, l) = five_offsets(h, w, cfg.crop)[4];
    crop(&base, t, l, cfg.crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| i as f64)
    }

    #[test]
    fn ten_crop_offsets_on_8x8() {
        let img = ramp(1, 8, 8);
        let cfg = AugmentConfig {
            crop: 4,
            eval_scale: 8,
            ..AugmentConfig::default()
        };
        let crops = ten_crop(&img, &cfg, &[0.0]).unwrap();
        assert_eq!(crops.len(), 10);
        // Ramp value at (y, x) is 8y + x, so the first element names the offset.
        let firsts: Vec<f64> = crops[..5].iter().map(|t| t.values()[0]).collect();
        assert_eq!(firsts, vec![0.0, 4.0, 32.0, 36.0, 18.0]);
        for (k, c) in crops[5..].iter().enumerate() {
            let (t, l) = [(0, 0), (0, 4), (4, 0), (4, 4), (2, 2)][k];
            let mirrored = flip_horizontal(&img).unwrap();
            assert_eq!(c, &crop(&mirrored, t, l, 4).unwrap());
        }
    }

    #[test]
    fn ten_crop_on_crop_sized_image_has_two_distinct_views() {
        let img = ramp(3, 5, 5);
        let cfg = AugmentConfig {
            crop: 5,
            eval_scale: 5,
            ..AugmentConfig::default()
        };
        let crops = ten_crop(&img, &cfg, &[0.0; 3]).unwrap();
        assert!(crops[..5].iter().all(|c| c == &img));
        let flipped = flip_horizontal(&img).unwrap();
        assert!(crops[5..].iter().all(|c| c == &flipped));
    }

    #[test]
    fn symmetric_image_mirrored_crops_collapse() {
        let img = Tensor::from_fn(&[2, 8, 8], |i| {
            let x = i % 8;
            (x.min(7 - x) + i / 8) as f64
        });
        let cfg = AugmentConfig {
            crop: 4,
            eval_scale: 8,
            ..AugmentConfig::default()
        };
        let crops = ten_crop(&img, &cfg, &[0.5, 0.25]).unwrap();
        for k in 0..5 {
            assert_eq!(crops[k], crops[k + 5]);
        }
        assert_eq!(center_crop(&img, &cfg, &[0.5, 0.25]).unwrap(), crops[4]);
    }

    #[test]
    fn crop_too_large() {
        let cfg = AugmentConfig {
            crop: 9,
            eval_scale: 8,
            jitter_min: 8,
            jitter_max: 8,
            ..AugmentConfig::default()
        };
        let img = ramp(1, 8, 8);
        assert_eq!(ten_crop(&img, &cfg, &[0.0]).unwrap_err().kind(), "CropTooLarge");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &mut rng, &cfg, &[0.0]).unwrap_err().kind(), "CropTooLarge");
    }

    #[test]
    fn resize_identity_and_constants() {
        let img = ramp(2, 5, 7);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
        let flat = Tensor::filled(&[3, 4, 6], 0.3);
        let big = resize_bilinear(&flat, 9, 11).unwrap();
        assert!(big.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn resize_corner_aligned_linear_ramp() {
        // A linear ramp is reproduced exactly by bilinear sampling.
        let img = Tensor::from_fn(&[1, 1, 3], |i| i as f64);
        let up = resize_bilinear(&img, 1, 5).unwrap();
        assert_eq!(up.values(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        // Upsample then downsample back lands on the original grid.
        let img = ramp(1, 4, 4);
        let round = resize_bilinear(&resize_bilinear(&img, 7, 7).unwrap(), 4, 4).unwrap();
        for (a, b) in round.values().iter().zip(img.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_shorter_keeps_aspect() {
        let img = ramp(1, 32, 48);
        assert_eq!(resize_shorter(&img, 40).unwrap().shape(), &[1, 40, 60]);
        let img = ramp(1, 30, 20);
        assert_eq!(resize_shorter(&img, 10).unwrap().shape(), &[1, 15, 10]);
    }

    #[test]
    fn degenerate_jitter_is_mean_subtracted_center_content() {
        let img = Tensor::from_fn(&[3, 6, 6], |i| (i % 7) as f64 / 7.0);
        let means = channel_means([&img]).unwrap();
        let cfg = AugmentConfig {
            jitter_min: 6,
            jitter_max: 6,
            crop: 6,
            flip_prob: 0.0,
            eval_scale: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = augment(&img, &mut rng, &cfg, &means).unwrap();
        assert_eq!(out, subtract_means(&img, &means).unwrap());
        for m in channel_means([&out]).unwrap() {
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_stays_constant_and_rng_is_reproducible() {
        let img = Tensor::filled(&[3, 32, 32], 0.7);
        let cfg = AugmentConfig::default();
        let means = [0.1, 0.2, 0.3];
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = augment(&img, &mut a, &cfg, &means).unwrap();
            assert_eq!(x.shape(), &[3, 28, 28]);
            for (ch, plane) in x.values().chunks(28 * 28).enumerate() {
                assert!(plane.iter().all(|v| (v - (0.7 - means[ch])).abs() < 1e-12));
            }
            assert_eq!(x, augment(&img, &mut b, &cfg, &means).unwrap());
        }
    }
}
