//! Remote-sensing crop augmentation: random square crop, independent
//! horizontal and vertical flips, then a rotation by a multiple of 90 degrees.

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{CrispError, Result};

/// Crop edge used on 256 pixel aerial tiles.
pub const REFERENCE_CROP: usize = 100;

/// One realization of the random transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
}

impl AugmentDraw {
    /// Draws the crop offset first, then hflip, vflip and rotation, in that
    /// order, from the caller's generator.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, crop: usize) -> Result<Self> {
        check_crop(height, width, crop)?;
        Ok(Self {
            top: rng.random_range(0..=height - crop),
            left: rng.random_range(0..=width - crop),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4u8),
        })
    }

    /// Centered crop with no flip or rotation.
    pub fn centered(height: usize, width: usize, crop: usize) -> Result<Self> {
        check_crop(height, width, crop)?;
        Ok(Self {
            top: (height - crop) / 2,
            left: (width - crop) / 2,
            hflip: false,
            vflip: false,
            quarter_turns: 0,
        })
    }
}

fn check_crop(height: usize, width: usize, crop: usize) -> Result<()> {
    if crop == 0 || crop > height || crop > width {
        Err(CrispError::CropLargerThanImage { crop, height, width })
    } else {
        Ok(())
    }
}

/// Applies a fixed draw to a `(channels, h, w)` raster.
pub fn apply_augmentation(image: ArrayView3<'_, f64>, crop: usize, draw: AugmentDraw) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    check_crop(h, w, crop)?;
    if draw.top + crop > h || draw.left + crop > w {
        return Err(CrispError::CropLargerThanImage { crop, height: h, width: w });
    }
    let mut out = image
        .slice(s![.., draw.top..draw.top + crop, draw.left..draw.left + crop])
        .to_owned();
    if draw.hflip {
        out.invert_axis(Axis(2));
    }
    if draw.vflip {
        out.invert_axis(Axis(1));
    }
    for _ in 0..draw.quarter_turns % 4 {
        // counter-clockwise: new[r][c] = old[c][n - 1 - r]
        let mut rotated = out.view().permuted_axes([0, 2, 1]).to_owned();
        rotated.invert_axis(Axis(1));
        out = rotated;
    }
    Ok(out.as_standard_layout().into_owned())
}

/// Samples a draw and applies it.
pub fn augment_aerial<R: Rng + ?Sized>(image: ArrayView3<'_, f64>, crop: usize, rng: &mut R) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    let draw = AugmentDraw::sample(rng, h, w, crop)?;
    apply_augmentation(image, crop, draw)
}
