//! Box geometry, anchor coding and non-maximum suppression.

use serde::{Deserialize, Serialize};

use super::anchors::Anchor;
use crate::error::{Error, Result};
use crate::eval::iou;

/// Axis-aligned box in pixel coordinates, corners exclusive of each other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        (self.width()).max(0.0) * (self.height()).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    /// Sigmoid of the class logit, in [0,1].
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Standard anchor offsets: center deltas normalized by anchor size, log
/// width/height ratios.
pub fn box_encode(gt: &BBox, anchor: &Anchor) -> Result<[f64; 4]> {
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::invalid(
            "box_encode",
            format!("non-positive box dims {}x{}", gt.width(), gt.height()),
        ));
    }
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - anchor.cx) / anchor.width,
        (gcy - anchor.cy) / anchor.height,
        (gt.width() / anchor.width).ln(),
        (gt.height() / anchor.height).ln(),
    ])
}

pub fn box_decode(offsets: &[f64; 4], anchor: &Anchor) -> BBox {
    let cx = anchor.cx + offsets[0] * anchor.width;
    let cy = anchor.cy + offsets[1] * anchor.height;
    // clamp the log-ratios so an untrained head cannot overflow
    let w = anchor.width * offsets[2].clamp(-10.0, 10.0).exp();
    let h = anchor.height * offsets[3].clamp(-10.0, 10.0).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Greedy per-class NMS: keep by descending score (ties by earlier index),
/// drop anything overlapping a kept box of the same class at or above the
/// IoU threshold.
pub fn nms(detections: &[Detection], iou_threshold: f64, score_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= score_threshold && detections[i].bbox.is_valid())
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        let suppressed = kept.iter().any(|k| {
            k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(cand.clone());
        }
    }
    kept
}
