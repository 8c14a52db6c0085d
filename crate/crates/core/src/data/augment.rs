use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{derive_image_labels, Sample};
use crate::rng::Rng;

/// One draw of the augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    /// Counter-clockwise rotation in degrees.
    pub angle_deg: f64,
    /// Zoom about the image center; values above 1 crop, below 1 pad with zeros.
    pub scale: f64,
    /// Additive brightness offset.
    pub brightness: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle_deg: 0.0,
        scale: 1.0,
        brightness: 0.0,
    };

    pub const MAX_ANGLE_DEG: f64 = 10.0;
    pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);
    pub const MAX_BRIGHTNESS: f64 = 0.1;

    pub fn sample(rng: &mut Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let angle_deg = rng.random_range(-Self::MAX_ANGLE_DEG..=Self::MAX_ANGLE_DEG);
        let scale = rng.random_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1);
        let brightness = rng.random_range(-Self::MAX_BRIGHTNESS..=Self::MAX_BRIGHTNESS);
        AugmentParams {
            flip,
            angle_deg,
            scale,
            brightness,
        }
    }
}

/// Random flip, rotation, scale and brightness jitter drawn from `seed`.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = Rng::seed_from_u64(seed);
    apply_augment(sample, &AugmentParams::sample(&mut rng))
}

/// Applies `p` to image and mask with the same geometry: bilinear for the
/// image, nearest neighbour for the mask, zeros outside the source.
pub fn apply_augment(sample: &Sample, p: &AugmentParams) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let plane = h * w;
    let mut image = vec![0f32; 3 * plane];
    let mut mask = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            // output pixel center back to source coordinates
            let px = (x as f64 + 0.5 - cx) / p.scale;
            let py = (y as f64 + 0.5 - cy) / p.scale;
            let mut qx = cos * px + sin * py + cx;
            let qy = -sin * px + cos * py + cy;
            if p.flip {
                qx = w as f64 - qx;
            }
            let (sx, sy) = (qx - 0.5, qy - 0.5);

            let (nx, ny) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                mask[y * w + x] = sample.mask[ny as usize * w + nx as usize];
            }

            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for c in 0..3 {
                let src = &sample.image[c * plane..(c + 1) * plane];
                let mut v = 0.0f64;
                for &(tx, ty, wt) in &taps {
                    if wt != 0.0 && tx >= 0.0 && ty >= 0.0 && (tx as usize) < w && (ty as usize) < h {
                        v += wt * src[ty as usize * w + tx as usize] as f64;
                    }
                }
                image[c * plane + y * w + x] = (v + p.brightness).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let labels = derive_image_labels(&mask);
    Sample {
        height: h,
        width: w,
        image,
        mask,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, DatasetConfig};

    #[test]
    fn identity_params_are_exact() {
        let s = generate_sample(1, 2, &DatasetConfig::default());
        assert_eq!(apply_augment(&s, &AugmentParams::IDENTITY), s);
    }

    #[test]
    fn double_flip_restores() {
        let s = generate_sample(1, 5, &DatasetConfig::default());
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = apply_augment(&s, &flip);
        assert_ne!(once, s);
        assert_eq!(apply_augment(&once, &flip), s);
    }

    #[test]
    fn labels_never_created() {
        let cfg = DatasetConfig::default();
        for i in 0..200 {
            let s = generate_sample(4, i, &cfg);
            let a = augment(&s, i as u64 * 31 + 7);
            for (after, before) in a.labels.iter().zip(&s.labels) {
                assert!(after <= before);
            }
            assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
