//! Data model and synthetic two-domain dataset machinery.
//!
//! Samples are image pairs with optional ground-truth flow. The source
//! domain is labeled; the target domain is unlabeled for training (its
//! ground truth exists on disk only in a quarantined subdirectory that the
//! training loaders never touch).

mod augment;
mod dataset;
mod flo;
mod pad;
mod scene;

pub use augment::{photometric_augment, random_crop, AugmentParams, AugmentedView, EraseRect};
pub use dataset::{load_quarantined_gt, write_dataset, Dataset, Manifest, ManifestEntry};
pub use flo::{read_flo, write_flo};
pub use pad::pad_student_to_full;
pub use scene::{gen_synthetic_pair, BackgroundKind, Degradation, MotionKind, SceneSpec};

use crate::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// RGB image with values in `[0, 1]`; sides at least 64 and divisible by 8.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::Data(format!("image must have 3 channels, got {c}")));
        }
        if h < 64 || w < 64 {
            return Err(Error::Data(format!("image too small: {h}x{w} (min 64)")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Data(format!("image sides must be multiples of 8, got {h}x{w}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values outside [0,1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// (height, width)
    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }
}

/// Dense 2-D displacement field `[H, W, 2]` in pixels (dx, dy).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: Array3<f64>,
}

impl FlowField {
    pub fn new(vectors: Array3<f64>) -> Result<Self> {
        if vectors.dim().2 != 2 {
            return Err(Error::Data("flow field must have 2 channels".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &Array3<f64> {
        &self.vectors
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.vectors.dim();
        (h, w)
    }
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    weights: Array2<f64>,
}

impl Mask {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("mask values outside [0,1]".into()));
        }
        Ok(Self { weights })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            weights: Array2::ones((h, w)),
        }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One training/evaluation unit: an image pair plus (for labeled data)
/// ground-truth flow and a validity mask.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x1: Image,
    pub x2: Image,
    pub flow: Option<FlowField>,
    pub valid: Option<Mask>,
    pub domain: Domain,
}

/// Crop geometry; offsets are constrained to multiples of 8 so cropped
/// predictions align with the 1/8-resolution grid of the full frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub offset_x: usize,
    pub offset_y: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl CropSpec {
    pub fn validate(&self, full_h: usize, full_w: usize) -> Result<()> {
        if self.offset_x % 8 != 0 || self.offset_y % 8 != 0 {
            return Err(Error::Data(format!(
                "crop offsets must be multiples of 8, got ({}, {})",
                self.offset_x, self.offset_y
            )));
        }
        if self.offset_y + self.crop_h > full_h || self.offset_x + self.crop_w > full_w {
            return Err(Error::Data("crop window exceeds image".into()));
        }
        Ok(())
    }
}
