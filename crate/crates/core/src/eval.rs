//! Detection and classification metrics: IoU, greedy matching, PASCAL/COCO
//! style AP and mAP, KITTI-style bucketed AP, Top-1 accuracy.

use serde::{Deserialize, Serialize};

use crate::detector::boxes::{BBox, Detection, GroundTruthBox};
use crate::error::{Error, Result};

/// Intersection over union. Degenerate (zero-area) boxes have IoU 0 by
/// convention.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy match of one image's detections (single class) against its ground
/// truth at a fixed IoU threshold.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// TP flag per detection, aligned with the input order.
    pub tp: Vec<bool>,
    /// Ground-truth boxes left unmatched.
    pub unmatched_gt: usize,
}

/// Detections are visited by descending score (score ties keep input order);
/// each claims the highest-IoU unmatched ground truth at or above the
/// threshold.
pub fn match_detections(detections: &[Detection], gts: &[BBox], iou_thr: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut tp = vec![false; detections.len()];
    for idx in order {
        let mut best = iou_thr;
        let mut best_gt: Option<usize> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let v = iou(&detections[idx].bbox, gt);
            if v >= best && (best_gt.is_none() || v > best) {
                best = v;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            gt_used[gi] = true;
            tp[idx] = true;
        }
    }
    MatchResult {
        tp,
        unmatched_gt: gt_used.iter().filter(|u| !**u).count(),
    }
}

/// One image's worth of evaluation input.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruthBox>,
}

/// How the precision envelope is integrated into an AP number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integration {
    /// Exact area under the precision envelope.
    Continuous,
    /// COCO-style sampling at recalls {0, 1/(n-1), ..., 1}.
    CocoPoints(usize),
    /// KITTI-style sampling at recalls {1/n, ..., n/n} (zero excluded).
    KittiPoints(usize),
}

/// (recall, precision) curve points in ranked order, one per detection.
fn pr_curve(ranked_tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut curve = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &is_tp) in ranked_tp.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    curve
}

/// Max precision at recall >= r over the curve (the monotone envelope).
fn envelope_at(curve: &[(f64, f64)], r: f64) -> f64 {
    curve
        .iter()
        .filter(|(rec, _)| *rec >= r - 1e-12)
        .map(|(_, p)| *p)
        .fold(0.0, f64::max)
}

fn integrate(curve: &[(f64, f64)], method: Integration) -> f64 {
    match method {
        Integration::Continuous => {
            // walk distinct recall levels, multiply each step by envelope
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for i in 0..curve.len() {
                let (r, _) = curve[i];
                let last_at_r = i + 1 == curve.len() || curve[i + 1].0 > r;
                if last_at_r && r > prev_r {
                    ap += (r - prev_r) * envelope_at(curve, r);
                    prev_r = r;
                }
            }
            ap
        }
        Integration::CocoPoints(n) => {
            let mut acc = 0.0;
            for i in 0..n {
                let r = i as f64 / (n - 1) as f64;
                acc += envelope_at(curve, r);
            }
            acc / n as f64
        }
        Integration::KittiPoints(n) => {
            let mut acc = 0.0;
            for i in 1..=n {
                let r = i as f64 / n as f64;
                acc += envelope_at(curve, r);
            }
            acc / n as f64
        }
    }
}

/// AP for one class over a set of images. Returns None when the class has no
/// ground truth (such classes are skipped in the mean).
pub fn average_precision(
    images: &[ImageEval],
    class_id: usize,
    iou_thr: f64,
    method: Integration,
) -> Option<f64> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new(); // score, image, index, tp
    let mut num_gt = 0usize;
    for (img_idx, img) in images.iter().enumerate() {
        let dets: Vec<Detection> = img
            .detections
            .iter()
            .filter(|d| d.class_id == class_id)
            .cloned()
            .collect();
        let gts: Vec<BBox> = img
            .gts
            .iter()
            .filter(|g| g.class_id == class_id)
            .map(|g| g.bbox)
            .collect();
        num_gt += gts.len();
        let m = match_detections(&dets, &gts, iou_thr);
        for (i, d) in dets.iter().enumerate() {
            ranked.push((d.score, img_idx, i, m.tp[i]));
        }
    }
    if num_gt == 0 {
        return None;
    }
    // stable: ties keep (image, index) order
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Some(integrate(&pr_curve(&flags, num_gt), method))
}

/// Mean AP over classes (zero-GT classes skipped), then over IoU thresholds.
/// None when there is no ground truth at all.
pub fn map_at(
    images: &[ImageEval],
    num_classes: usize,
    thresholds: &[f64],
    method: Integration,
) -> Option<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for &thr in thresholds {
        let mut class_acc = 0.0;
        let mut class_count = 0usize;
        for c in 0..num_classes {
            if let Some(ap) = average_precision(images, c, thr, method) {
                class_acc += ap;
                class_count += 1;
            }
        }
        if class_count > 0 {
            acc += class_acc / class_count as f64;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(acc / count as f64)
    }
}

pub const COCO_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub fn map50(images: &[ImageEval], num_classes: usize) -> Option<f64> {
    map_at(images, num_classes, &[0.5], Integration::CocoPoints(101))
}

pub fn map5095(images: &[ImageEval], num_classes: usize) -> Option<f64> {
    map_at(images, num_classes, &COCO_THRESHOLDS, Integration::CocoPoints(101))
}

/// KITTI-style difficulty buckets, degraded to box-height thresholds: the
/// synthetic annotations carry no occlusion or truncation, so eligibility is
/// minimum ground-truth height (40/25/15 px at a 128-px image, scaled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyBucket {
    pub name: &'static str,
    pub min_height: f64,
}

impl DifficultyBucket {
    pub fn easy(image_size: usize) -> Self {
        DifficultyBucket {
            name: "easy",
            min_height: 40.0 * image_size as f64 / 128.0,
        }
    }

    pub fn moderate(image_size: usize) -> Self {
        DifficultyBucket {
            name: "moderate",
            min_height: 25.0 * image_size as f64 / 128.0,
        }
    }

    pub fn hard(image_size: usize) -> Self {
        DifficultyBucket {
            name: "hard",
            min_height: 15.0 * image_size as f64 / 128.0,
        }
    }

    pub fn all(image_size: usize) -> [Self; 3] {
        [
            Self::easy(image_size),
            Self::moderate(image_size),
            Self::hard(image_size),
        ]
    }

    pub fn contains(&self, gt: &BBox) -> bool {
        gt.height() >= self.min_height
    }
}

/// 40-point interpolated AP at IoU 0.5 for one difficulty bucket, averaged
/// over classes with in-bucket ground truth. Out-of-bucket ground truth is
/// an ignore region: detections overlapping it count neither TP nor FP.
pub fn kitti_ap(images: &[ImageEval], bucket: &DifficultyBucket) -> Option<f64> {
    let iou_thr = 0.5;
    let num_classes = images
        .iter()
        .flat_map(|i| i.gts.iter().map(|g| g.class_id + 1))
        .max()
        .unwrap_or(0);
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..num_classes {
        let mut ranked: Vec<(f64, usize, usize, u8)> = Vec::new(); // score, img, idx, 0=fp 1=tp 2=ignored
        let mut num_gt = 0usize;
        for (img_idx, img) in images.iter().enumerate() {
            let dets: Vec<Detection> = img
                .detections
                .iter()
                .filter(|d| d.class_id == c)
                .cloned()
                .collect();
            let eligible: Vec<BBox> = img
                .gts
                .iter()
                .filter(|g| g.class_id == c && bucket.contains(&g.bbox))
                .map(|g| g.bbox)
                .collect();
            let ignored: Vec<BBox> = img
                .gts
                .iter()
                .filter(|g| g.class_id == c && !bucket.contains(&g.bbox))
                .map(|g| g.bbox)
                .collect();
            num_gt += eligible.len();
            let m = match_detections(&dets, &eligible, iou_thr);
            for (i, d) in dets.iter().enumerate() {
                let flag = if m.tp[i] {
                    1
                } else if ignored.iter().any(|g| iou(&d.bbox, g) >= iou_thr) {
                    2
                } else {
                    0
                };
                ranked.push((d.score, img_idx, i, flag));
            }
        }
        if num_gt == 0 {
            continue;
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let flags: Vec<bool> = ranked
            .iter()
            .filter(|r| r.3 != 2)
            .map(|r| r.3 == 1)
            .collect();
        acc += integrate(&pr_curve(&flags, num_gt), Integration::KittiPoints(40));
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(acc / count as f64)
    }
}

/// Percent of exact scene matches.
pub fn top1_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(
            "top1_accuracy",
            format!("{} predictions vs {} labels", predicted.len(), truth.len()),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::Empty("top1_accuracy"));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

/// One row of the machine-readable metrics report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub scene: String,
    pub class: String,
    pub value: f64,
}

/// Versioned metrics summary written next to the text table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn new() -> Self {
        MetricsReport {
            schema_version: 1,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, scene: &str, class: &str, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            scene: scene.into(),
            class: class.into(),
            value,
        });
    }

    pub fn get(&self, metric: &str, scene: &str, class: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.scene == scene && r.class == class)
            .map(|r| r.value)
    }

    pub fn to_text_table(&self) -> String {
        let mut out = String::from(format!(
            "{:<28} {:<12} {:<10} {:>10}\n",
            "metric", "scene", "class", "value"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:<12} {:<10} {:>10.4}\n",
                r.metric, r.scene, r.class, r.value
            ));
        }
        out
    }
}

impl Default for MetricsReport {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    fn det(class_id: usize, score: f64, bbox: BBox) -> Detection {
        Detection {
            class_id,
            score,
            bbox,
        }
    }

    fn gt(class_id: usize, bbox: BBox) -> GroundTruthBox {
        GroundTruthBox { class_id, bbox }
    }

    #[test]
    fn iou_basics() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 7.0, 7.0)), 0.0);
        // inter 2, union 6
        assert!((iou(&a, &b(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-12);
        // degenerate box
        assert_eq!(iou(&a, &b(1.0, 1.0, 1.0, 3.0)), 0.0);
        // symmetry
        let c = b(0.5, 0.5, 3.5, 1.5);
        assert_eq!(iou(&a, &c), iou(&c, &a));
    }

    #[test]
    fn match_single_tp() {
        let d = vec![det(0, 0.9, b(0.0, 0.0, 10.0, 10.0))];
        let g = vec![b(1.0, 0.0, 10.0, 10.0)]; // IoU 0.9
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m.tp, vec![true]);
        assert_eq!(m.unmatched_gt, 0);
    }

    #[test]
    fn match_two_dets_one_gt() {
        let g = vec![b(0.0, 0.0, 10.0, 10.0)];
        let d = vec![
            det(0, 0.6, b(0.0, 0.0, 10.0, 10.0)),
            det(0, 0.9, b(0.0, 0.0, 10.0, 9.0)),
        ];
        let m = match_detections(&d, &g, 0.5);
        // higher-scored detection (index 1) wins the ground truth
        assert_eq!(m.tp, vec![false, true]);
    }

    #[test]
    fn ap_perfect_and_zero() {
        let imgs = vec![ImageEval {
            detections: vec![det(0, 0.9, b(0.0, 0.0, 10.0, 10.0))],
            gts: vec![gt(0, b(0.0, 0.0, 10.0, 10.0))],
        }];
        for m in [
            Integration::Continuous,
            Integration::CocoPoints(101),
            Integration::KittiPoints(40),
        ] {
            assert_eq!(average_precision(&imgs, 0, 0.5, m), Some(1.0));
        }
        let only_fp = vec![ImageEval {
            detections: vec![det(0, 0.9, b(50.0, 50.0, 60.0, 60.0))],
            gts: vec![gt(0, b(0.0, 0.0, 10.0, 10.0))],
        }];
        assert_eq!(
            average_precision(&only_fp, 0, 0.5, Integration::Continuous),
            Some(0.0)
        );
    }

    #[test]
    fn ap_ranked_tp_fp_tp_continuous() {
        // 2 GT; ranked list (TP, FP, TP) => AP = (1.0 + 2/3)/2 under the
        // exact envelope integral.
        let imgs = vec![ImageEval {
            detections: vec![
                det(0, 0.9, b(0.0, 0.0, 10.0, 10.0)),
                det(0, 0.8, b(40.0, 40.0, 50.0, 50.0)),
                det(0, 0.7, b(20.0, 0.0, 30.0, 10.0)),
            ],
            gts: vec![gt(0, b(0.0, 0.0, 10.0, 10.0)), gt(0, b(20.0, 0.0, 30.0, 10.0))],
        }];
        let ap = average_precision(&imgs, 0, 0.5, Integration::Continuous).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn map_single_threshold_equals_class_mean() {
        let imgs = vec![ImageEval {
            detections: vec![
                det(0, 0.9, b(0.0, 0.0, 10.0, 10.0)),
                det(1, 0.8, b(30.0, 30.0, 44.0, 44.0)),
            ],
            gts: vec![gt(0, b(0.0, 0.0, 10.0, 10.0)), gt(1, b(0.0, 30.0, 10.0, 44.0))],
        }];
        let method = Integration::CocoPoints(101);
        let a0 = average_precision(&imgs, 0, 0.5, method).unwrap();
        let a1 = average_precision(&imgs, 1, 0.5, method).unwrap();
        let m = map_at(&imgs, 2, &[0.5], method).unwrap();
        assert!((m - 0.5 * (a0 + a1)).abs() < 1e-12);
    }

    #[test]
    fn map_no_gt_is_absent() {
        let imgs = vec![ImageEval {
            detections: vec![det(0, 0.9, b(0.0, 0.0, 10.0, 10.0))],
            gts: vec![],
        }];
        assert_eq!(map_at(&imgs, 2, &[0.5], Integration::CocoPoints(101)), None);
    }

    #[test]
    fn kitti_buckets_nest_and_ignore() {
        let buckets = DifficultyBucket::all(128);
        assert!(buckets[0].min_height > buckets[1].min_height);
        assert!(buckets[1].min_height > buckets[2].min_height);

        // one easy GT detected -> easy AP 1.0
        let easy_gt = gt(0, b(0.0, 0.0, 20.0, 50.0));
        let imgs = vec![ImageEval {
            detections: vec![det(0, 0.9, b(0.0, 0.0, 20.0, 50.0))],
            gts: vec![easy_gt.clone()],
        }];
        assert_eq!(kitti_ap(&imgs, &buckets[0]), Some(1.0));

        // a hard-only GT (height 20) contributes nothing to easy AP, and a
        // detection on it is ignored rather than counted FP
        let imgs2 = vec![ImageEval {
            detections: vec![
                det(0, 0.95, b(0.0, 0.0, 20.0, 50.0)),
                det(0, 0.9, b(60.0, 0.0, 80.0, 20.0)),
            ],
            gts: vec![easy_gt, gt(0, b(60.0, 0.0, 80.0, 20.0))],
        }];
        assert_eq!(kitti_ap(&imgs2, &buckets[0]), Some(1.0));
    }

    #[test]
    fn top1_basics() {
        assert_eq!(top1_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 100.0);
        assert_eq!(top1_accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[0, 1, 2, 2], &[0, 1, 2, 0]).unwrap(), 75.0);
        assert!(top1_accuracy(&[], &[]).is_err());
        assert!(top1_accuracy(&[0], &[0, 1]).is_err());
    }
}
