//! Zero-padding that aligns 1/8-resolution crop outputs with the full frame.

use super::CropSpec;
use crate::{Error, Result};
use ndarray::Array3;

/// Place a coarse (1/8-resolution) crop-sized array into a zeroed coarse
/// full-frame canvas at the crop's offset. Works for flow (`C = 2`) and
/// hidden state (`C = D`) alike; values are copied verbatim.
pub fn pad_student_to_full(
    coarse: &Array3<f64>,
    crop: &CropSpec,
    full_size: (usize, usize),
) -> Result<Array3<f64>> {
    let (full_h, full_w) = full_size;
    if full_h % 8 != 0 || full_w % 8 != 0 {
        return Err(Error::Data("full size must be multiples of 8".into()));
    }
    crop.validate(full_h, full_w)?;
    let (ch, cw, c) = coarse.dim();
    if ch != crop.crop_h / 8 || cw != crop.crop_w / 8 {
        return Err(Error::Shape(format!(
            "coarse array {ch}x{cw} does not match crop {}x{} at 1/8 resolution",
            crop.crop_h, crop.crop_w
        )));
    }
    let (oy, ox) = (crop.offset_y / 8, crop.offset_x / 8);
    let mut out = Array3::<f64>::zeros((full_h / 8, full_w / 8, c));
    out.slice_mut(ndarray::s![oy..oy + ch, ox..ox + cw, ..])
        .assign(coarse);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_frame_crop_is_identity() {
        let coarse = Array3::from_shape_fn((16, 16, 2), |(i, j, c)| (i * 100 + j * 2 + c) as f64);
        let crop = CropSpec {
            offset_x: 0,
            offset_y: 0,
            crop_h: 128,
            crop_w: 128,
        };
        let out = pad_student_to_full(&coarse, &crop, (128, 128)).unwrap();
        assert_eq!(out, coarse);
    }

    #[test]
    fn offset_window_lands_on_expected_cells() {
        // 64x64 crop at offset (x=8, y=16) in a 128x128 frame: nonzero cells
        // are rows 2..10, cols 1..9 of the 16x16 coarse grid.
        let coarse = Array3::from_elem((8, 8, 2), 1.5);
        let crop = CropSpec {
            offset_x: 8,
            offset_y: 16,
            crop_h: 64,
            crop_w: 64,
        };
        let out = pad_student_to_full(&coarse, &crop, (128, 128)).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let inside = (2..10).contains(&i) && (1..9).contains(&j);
                for c in 0..2 {
                    assert_eq!(out[[i, j, c]], if inside { 1.5 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn misaligned_offset_rejected() {
        let coarse = Array3::zeros((8, 8, 2));
        let crop = CropSpec {
            offset_x: 4,
            offset_y: 0,
            crop_h: 64,
            crop_w: 64,
        };
        assert!(pad_student_to_full(&coarse, &crop, (128, 128)).is_err());
    }

    proptest! {
        /// Padding conserves the absolute sum (values are moved, not scaled)
        /// and writes exact zeros elsewhere.
        #[test]
        fn padding_conserves_values(
            oy in 0usize..8,
            ox in 0usize..8,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let coarse = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(-2.0..2.0));
            let crop = CropSpec { offset_x: ox * 8, offset_y: oy * 8, crop_h: 64, crop_w: 64 };
            let out = pad_student_to_full(&coarse, &crop, (128, 128)).unwrap();
            let sum_in: f64 = coarse.iter().map(|v| v.abs()).sum();
            let sum_out: f64 = out.iter().map(|v| v.abs()).sum();
            prop_assert_eq!(sum_in, sum_out);
            // Window values are verbatim.
            for i in 0..8 {
                for j in 0..8 {
                    for c in 0..3 {
                        prop_assert_eq!(out[[i + oy, j + ox, c]], coarse[[i, j, c]]);
                    }
                }
            }
        }
    }
}
