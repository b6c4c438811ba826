//! Paired geometric augmentation: image and mask receive the identical
//! transform; the mask is resampled nearest-neighbor so it stays binary.

use rand::Rng;

use crate::tensor::Tensor;
use crate::types::BinaryMask;

use super::types::ImageMaskPair;

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Uniform scale factor range.
    pub scale: (f64, f64),
    pub hflip_prob: f64,
    /// Rotation is drawn from [-rotate_deg, rotate_deg].
    pub rotate_deg: f64,
    /// Output side length. If the (scaled) source is smaller than the crop,
    /// the sampler reads outside the source and pads with zeros
    /// (pad-then-crop).
    pub crop: usize,
}

impl AugmentConfig {
    pub fn identity(crop: usize) -> Self {
        AugmentConfig {
            scale: (1.0, 1.0),
            hflip_prob: 0.0,
            rotate_deg: 0.0,
            crop,
        }
    }

    /// The training recipe: scale jitter, coin-flip mirror, rotation within
    /// [-10, 10] degrees.
    pub fn training(crop: usize) -> Self {
        AugmentConfig {
            scale: (0.9, 1.1),
            hflip_prob: 0.5,
            rotate_deg: 10.0,
            crop,
        }
    }
}

struct SampledTransform {
    scale: f64,
    flip: bool,
    angle_rad: f64,
    /// Source-space translation of the crop window center.
    jitter: (f64, f64),
}

/// Inverse-map an output pixel to source coordinates.
fn source_coords(
    t: &SampledTransform,
    x_out: f64,
    y_out: f64,
    out_side: f64,
    in_h: f64,
    in_w: f64,
) -> (f64, f64) {
    let cx_out = (out_side - 1.0) / 2.0;
    let cy_out = (out_side - 1.0) / 2.0;
    let u = x_out - cx_out;
    let v = y_out - cy_out;
    // Inverse rotation, then inverse scale.
    let (sin, cos) = t.angle_rad.sin_cos();
    let ur = (cos * u + sin * v) / t.scale;
    let vr = (-sin * u + cos * v) / t.scale;
    let ur = if t.flip { -ur } else { ur };
    (
        ur + (in_w - 1.0) / 2.0 + t.jitter.0,
        vr + (in_h - 1.0) / 2.0 + t.jitter.1,
    )
}

fn sample_bilinear_padded(img: &Tensor, sx: f64, sy: f64, out: &mut [f64]) {
    // Snap near-integer coordinates so identity transforms are exact.
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let sx = snap(sx);
    let sy = snap(sy);
    let x0 = sx.floor() as isize;
    let y0 = sy.floor() as isize;
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let fetch = |y: isize, x: isize, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= img.h as isize || x >= img.w as isize {
            0.0
        } else {
            img.at(y as usize, x as usize, ch)
        }
    };
    for (ch, o) in out.iter_mut().enumerate() {
        let v00 = fetch(y0, x0, ch);
        let v01 = fetch(y0, x0 + 1, ch);
        let v10 = fetch(y0 + 1, x0, ch);
        let v11 = fetch(y0 + 1, x0 + 1, ch);
        let top = v00 + (v01 - v00) * fx;
        let bot = v10 + (v11 - v10) * fx;
        *o = top + (bot - top) * fy;
    }
}

fn sample_nearest_mask(mask: &BinaryMask, sx: f64, sy: f64) -> u8 {
    let x = sx.round() as isize;
    let y = sy.round() as isize;
    if x < 0 || y < 0 || x >= mask.w as isize || y >= mask.h as isize {
        0
    } else {
        mask.at(y as usize, x as usize)
    }
}

/// Apply one random geometric augmentation. Deterministic given the RNG
/// state; pure otherwise.
pub fn augment(pair: &ImageMaskPair, cfg: &AugmentConfig, rng: &mut impl Rng) -> ImageMaskPair {
    let scale = if cfg.scale.0 < cfg.scale.1 {
        rng.gen_range(cfg.scale.0..cfg.scale.1)
    } else {
        cfg.scale.0
    };
    let flip = cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob);
    let angle_deg = if cfg.rotate_deg > 0.0 {
        rng.gen_range(-cfg.rotate_deg..cfg.rotate_deg)
    } else {
        0.0
    };
    // Random crop-window shift, only where the scaled source exceeds the
    // crop; otherwise center (and pad where the window reads outside).
    let max_jx = ((pair.image.w as f64 - cfg.crop as f64 / scale) / 2.0).max(0.0);
    let max_jy = ((pair.image.h as f64 - cfg.crop as f64 / scale) / 2.0).max(0.0);
    let jitter = (
        if max_jx > 0.0 { rng.gen_range(-max_jx..max_jx) } else { 0.0 },
        if max_jy > 0.0 { rng.gen_range(-max_jy..max_jy) } else { 0.0 },
    );
    let t = SampledTransform {
        scale,
        flip,
        angle_rad: angle_deg.to_radians(),
        jitter,
    };

    let side = cfg.crop;
    let mut image = Tensor::zeros(side, side, 3);
    let mut mask = BinaryMask::zeros(side, side);
    let mut px = [0.0f64; 3];
    for y in 0..side {
        for x in 0..side {
            let (sx, sy) = source_coords(
                &t,
                x as f64,
                y as f64,
                side as f64,
                pair.image.h as f64,
                pair.image.w as f64,
            );
            sample_bilinear_padded(&pair.image, sx, sy, &mut px);
            for ch in 0..3 {
                *image.at_mut(y, x, ch) = px[ch];
            }
            mask.set(y, x, sample_nearest_mask(&pair.mask, sx, sy));
        }
    }
    ImageMaskPair {
        image,
        mask,
        class_id: pair.class_id,
        sample_id: pair.sample_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker_pair(h: usize, w: usize) -> ImageMaskPair {
        let mut image = Tensor::zeros(h, w, 3);
        let mut mask = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    *image.at_mut(y, x, ch) = ((y * 31 + x * 7 + ch * 3) % 17) as f64 / 16.0;
                }
                mask.set(y, x, u8::from((x + 2 * y) % 5 == 0));
            }
        }
        ImageMaskPair::new(image, mask, 0, "t".into()).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let pair = checker_pair(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&pair, &AugmentConfig::identity(16), &mut rng);
        assert_eq!(out.image, pair.image);
        assert_eq!(out.mask, pair.mask);
    }

    #[test]
    fn horizontal_flip_reverses_columns_of_both() {
        let pair = checker_pair(12, 12);
        let cfg = AugmentConfig {
            scale: (1.0, 1.0),
            hflip_prob: 1.0,
            rotate_deg: 0.0,
            crop: 12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&pair, &cfg, &mut rng);
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(out.mask.at(y, x), pair.mask.at(y, 11 - x));
                for ch in 0..3 {
                    assert_eq!(out.image.at(y, x, ch), pair.image.at(y, 11 - x, ch));
                }
            }
        }
    }

    #[test]
    fn rotation_preserves_mask_area_within_5_percent() {
        // Centered 20x20 square in a 64x64 grid, rotated exactly 10 degrees.
        let mut mask = BinaryMask::zeros(64, 64);
        for y in 22..42 {
            for x in 22..42 {
                mask.set(y, x, 1);
            }
        }
        let image = Tensor::zeros(64, 64, 3);
        let pair = ImageMaskPair::new(image, mask, 0, "sq".into()).unwrap();
        let t = SampledTransform {
            scale: 1.0,
            flip: false,
            angle_rad: 10f64.to_radians(),
            jitter: (0.0, 0.0),
        };
        let mut rotated = BinaryMask::zeros(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let (sx, sy) = source_coords(&t, x as f64, y as f64, 64.0, 64.0, 64.0);
                rotated.set(y, x, sample_nearest_mask(&pair.mask, sx, sy));
            }
        }
        let before = pair.mask.count_ones() as f64;
        let after = rotated.count_ones() as f64;
        assert!(
            (after - before).abs() / before < 0.05,
            "area {before} -> {after}"
        );
    }

    #[test]
    fn mask_stays_binary_and_aligned_under_random_configs() {
        let pair = checker_pair(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let out = augment(&pair, &AugmentConfig::training(32), &mut rng);
            assert!(out.mask.data.iter().all(|&v| v <= 1));
            assert_eq!(out.image.h, 32);
            assert_eq!(out.mask.h, 32);
        }
    }

    #[test]
    fn pad_then_crop_when_crop_exceeds_source() {
        let pair = checker_pair(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment(&pair, &AugmentConfig::identity(12), &mut rng);
        assert_eq!(out.image.h, 12);
        // Corners fall outside the 8x8 source and must be zero-padded.
        assert_eq!(out.image.at(0, 0, 0), 0.0);
        assert_eq!(out.mask.at(0, 0), 0);
        // The source center is preserved.
        assert_eq!(out.image.at(6, 6, 0), pair.image.at(4, 4, 0));
    }
}
