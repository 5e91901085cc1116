//! Anchor grids for the 5 pyramid levels.

use crate::error::{Error, Result};

/// Aspect ratios per cell, in fixed order: 1:1, 2:1 (wide), 1:2 (tall).
pub const ASPECTS: [(f64, f64); 3] = [(1.0, 1.0), (std::f64::consts::SQRT_2, std::f64::consts::FRAC_1_SQRT_2), (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::SQRT_2)];

pub const NUM_ASPECTS: usize = ASPECTS.len();

/// Pyramid strides for P3..P7.
pub const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

/// Anchors for one pyramid level, in (row, col, aspect) order. Base size is
/// 4x the stride; aspects preserve area.
pub fn anchors_for_level(image_size: usize, level: usize) -> Result<Vec<Anchor>> {
    if image_size % 128 != 0 {
        return Err(Error::invalid(
            "anchors_for_level",
            format!("image size {image_size} must be divisible by 128"),
        ));
    }
    let stride = STRIDES[level];
    let cells = image_size / stride;
    let base = 4.0 * stride as f64;
    let mut out = Vec::with_capacity(cells * cells * NUM_ASPECTS);
    for row in 0..cells {
        for col in 0..cells {
            let cx = (col as f64 + 0.5) * stride as f64;
            let cy = (row as f64 + 0.5) * stride as f64;
            for &(aw, ah) in &ASPECTS {
                out.push(Anchor {
                    level,
                    cx,
                    cy,
                    width: base * aw,
                    height: base * ah,
                });
            }
        }
    }
    Ok(out)
}

/// All anchors, level-major (P3 first), matching the head's output order.
pub fn anchors_for(image_size: usize) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for level in 0..STRIDES.len() {
        out.extend(anchors_for_level(image_size, level)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_level_has_one_cell() {
        let a = anchors_for_level(128, 4).unwrap();
        assert_eq!(a.len(), NUM_ASPECTS);
        assert_eq!(a[0].cx, 64.0);
        assert_eq!(a[0].width, 512.0);
    }

    #[test]
    fn total_count_matches_grid_arithmetic() {
        let all = anchors_for(128).unwrap();
        let expect: usize = STRIDES.iter().map(|s| (128 / s) * (128 / s) * NUM_ASPECTS).sum();
        assert_eq!(all.len(), expect);
        assert_eq!(expect, 3 * (256 + 64 + 16 + 4 + 1));
    }

    #[test]
    fn regeneration_is_identical() {
        assert_eq!(anchors_for(128).unwrap(), anchors_for(128).unwrap());
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(anchors_for(100).is_err());
    }
}
