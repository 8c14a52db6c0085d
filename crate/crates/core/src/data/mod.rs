//! Synthetic shapes dataset: noisy RGB images with circles, squares and
//! triangles, their pixel masks, and image-level label vectors.

mod augment;
mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub use augment::{apply_augment, augment, AugmentParams};
pub use io::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_dataset, write_dataset, Manifest, ManifestEntry};
pub use synth::{generate_dataset, generate_sample};

/// Foreground shape classes; the mask id is fixed per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    /// Mask value; 0 is background.
    pub fn id(self) -> u8 {
        match self {
            ShapeClass::Circle => 1,
            ShapeClass::Square => 2,
            ShapeClass::Triangle => 3,
        }
    }

    /// Base RGB color before noise.
    pub fn base_color(self) -> [f64; 3] {
        match self {
            ShapeClass::Circle => [0.80, 0.35, 0.30],
            ShapeClass::Square => [0.35, 0.75, 0.35],
            ShapeClass::Triangle => [0.35, 0.40, 0.80],
        }
    }
}

/// Number of foreground classes; label vectors always have this length.
pub const NUM_FG_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Training samples.
    pub count: usize,
    /// Held-out samples, drawn from an independent stream.
    pub eval_count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ShapeClass>,
    /// Inclusive range of objects placed per image.
    pub objects_per_image: [usize; 2],
    /// Smallest object area as a fraction of the image area.
    pub min_object_fraction: f64,
    pub max_object_fraction: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            count: 512,
            eval_count: 128,
            height: 64,
            width: 64,
            classes: ShapeClass::ALL.to_vec(),
            objects_per_image: [1, 4],
            min_object_fraction: 0.005,
            max_object_fraction: 0.05,
            noise_sigma: 0.25,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("count", "must be at least 1"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(
                "height",
                format!("images must be at least 16x16, got {}x{}", self.height, self.width),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::config("classes", "needs at least one shape class"));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::config("classes", "contains duplicates"));
        }
        let [lo, hi] = self.objects_per_image;
        if lo > hi {
            return Err(Error::config("objects_per_image", format!("min {lo} exceeds max {hi}")));
        }
        if !(self.min_object_fraction > 0.0 && self.min_object_fraction <= self.max_object_fraction) {
            return Err(Error::config(
                "min_object_fraction",
                format!(
                    "must satisfy 0 < min ({}) <= max ({})",
                    self.min_object_fraction, self.max_object_fraction
                ),
            ));
        }
        if !(self.max_object_fraction < 0.5) {
            return Err(Error::config("max_object_fraction", "must be below 0.5"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be a finite value >= 0"));
        }
        Ok(())
    }

    /// The held-out split: same geometry, its own seed, `eval_count` samples.
    pub fn eval_split(&self) -> DatasetConfig {
        DatasetConfig {
            seed: derive_seed(self.seed, &[stream::SPLIT]),
            count: self.eval_count.max(1),
            ..self.clone()
        }
    }
}

/// One image with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Channel-major RGB in `[0, 1]`, length `3·H·W`.
    pub image: Vec<f32>,
    /// Class id per pixel, length `H·W`.
    pub mask: Vec<u8>,
    /// Presence of each foreground class.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// `labels[c] = 1` iff class `c + 1` occurs in `mask`.
pub fn derive_image_labels(mask: &[u8]) -> Vec<u8> {
    let mut labels = vec![0u8; NUM_FG_CLASSES];
    for &m in mask {
        if (1..=NUM_FG_CLASSES as u8).contains(&m) {
            labels[m as usize - 1] = 1;
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_from_mask() {
        assert_eq!(derive_image_labels(&[0; 16]), vec![0, 0, 0]);
        assert_eq!(derive_image_labels(&[0, 1, 3, 3, 0, 1]), vec![1, 0, 1]);
    }

    #[test]
    fn labels_invariant_under_flip() {
        let (h, w) = (4, 5);
        let mask: Vec<u8> = (0..h * w).map(|i| ((i * 7) % 4) as u8).collect();
        let mut flipped = mask.clone();
        for y in 0..h {
            flipped[y * w..(y + 1) * w].reverse();
        }
        assert_eq!(derive_image_labels(&mask), derive_image_labels(&flipped));
    }

    #[test]
    fn default_config_is_valid() {
        DatasetConfig::default().validate().unwrap();
        let bad = DatasetConfig {
            height: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
