//! Single-modality detector: small strided backbone, 5-level feature
//! pyramid, shared anchor head, focal + smooth-L1 training loss.

pub mod anchors;
pub mod boxes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::eval::iou;
use crate::tensor::{
    add, conv2d, maxpool2, relu, stable_sigmoid, upsample_nearest2, Parameter, Tensor,
};
use anchors::{Anchor, NUM_ASPECTS};
use boxes::{box_decode, box_encode, nms, BBox, Detection, GroundTruthBox};

/// Backbone stage widths; each stage halves the spatial dims.
pub const BACKBONE_WIDTHS: [usize; 4] = [8, 16, 32, 32];

/// Stride-2 NMS/score defaults used by the detect entry points.
pub const NMS_IOU_THRESHOLD: f64 = 0.5;
pub const SCORE_THRESHOLD: f64 = 0.05;

/// A plain convolution layer with owned parameters.
pub struct Conv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weight and bias.
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Conv {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::rand_uniform(vec![cout, cin, k, k], -bound, bound, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::rand_uniform(vec![cout], -bound, bound, rng),
            ),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            &self.weight.tensor,
            Some(&self.bias.tensor),
            self.stride,
            self.padding,
        )
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Four stride-2 conv+relu stages; every stage output is retained so the
/// FPN and the scene classifier can tap intermediate depths.
pub struct Backbone {
    stages: Vec<Conv>,
    pub cin: usize,
}

impl Backbone {
    pub fn new(prefix: &str, cin: usize, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::new();
        let mut c = cin;
        for (i, &width) in BACKBONE_WIDTHS.iter().enumerate() {
            stages.push(Conv::new(&format!("{prefix}.stage{i}"), c, width, 3, 2, 1, rng));
            c = width;
        }
        Backbone { stages, cin }
    }

    /// Stage outputs S1..S4, spatial input/2 .. input/16.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let (_, cin, h, w) = image.dims4("backbone_forward")?;
        if cin != self.cin {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected {} input channels, got {cin}", self.cin),
            ));
        }
        if h % 128 != 0 || w % 128 != 0 {
            return Err(Error::invalid(
                "backbone_forward",
                format!("spatial dims {h}x{w} must be divisible by 128"),
            ));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = relu(&stage.forward(&x)?);
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.stages.iter().flat_map(Conv::params).collect()
    }
}

/// Five uniform-width feature maps P3..P7, spatial input/8 .. input/128.
pub struct Pyramid {
    pub levels: Vec<Tensor>,
}

impl Pyramid {
    pub fn cfeat(&self) -> usize {
        self.levels[0].shape()[1]
    }
}

/// Lateral 1x1 convs on the two deepest stages, a pooled L5, one top-down
/// pass with nearest upsampling, 3x3 smoothing, then pooled P6/P7.
pub struct Fpn {
    lat3: Conv,
    lat4: Conv,
    smooth: Vec<Conv>,
    pub cfeat: usize,
}

impl Fpn {
    pub fn new(prefix: &str, cfeat: usize, rng: &mut impl Rng) -> Self {
        let deep = BACKBONE_WIDTHS[3];
        Fpn {
            lat3: Conv::new(&format!("{prefix}.lat3"), BACKBONE_WIDTHS[2], cfeat, 1, 1, 0, rng),
            lat4: Conv::new(&format!("{prefix}.lat4"), deep, cfeat, 1, 1, 0, rng),
            smooth: (0..3)
                .map(|i| Conv::new(&format!("{prefix}.smooth{i}"), cfeat, cfeat, 3, 1, 1, rng))
                .collect(),
            cfeat,
        }
    }

    pub fn forward(&self, stages: &[Tensor]) -> Result<Pyramid> {
        if stages.len() != 4 {
            return Err(Error::shape(
                "fpn_forward",
                format!("expected 4 backbone stages, got {}", stages.len()),
            ));
        }
        let l3 = self.lat3.forward(&stages[2])?;
        let l4 = self.lat4.forward(&stages[3])?;
        let l5 = maxpool2(&l4)?;
        let t5 = l5;
        let t4 = add(&l4, &upsample_nearest2(&t5)?)?;
        let t3 = add(&l3, &upsample_nearest2(&t4)?)?;
        let p3 = self.smooth[0].forward(&t3)?;
        let p4 = self.smooth[1].forward(&t4)?;
        let p5 = self.smooth[2].forward(&t5)?;
        let p6 = maxpool2(&p5)?;
        let p7 = maxpool2(&p6)?;
        Ok(Pyramid {
            levels: vec![p3, p4, p5, p6, p7],
        })
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.lat3.params();
        p.extend(self.lat4.params());
        for s in &self.smooth {
            p.extend(s.params());
        }
        p
    }
}

/// Shared detection head: two conv+relu layers per branch, then a class
/// output (A*K channels) and a box output (4*A channels). The same weights
/// run on every pyramid level.
pub struct DetectorHead {
    cls_tower: Vec<Conv>,
    reg_tower: Vec<Conv>,
    cls_out: Conv,
    reg_out: Conv,
    pub num_classes: usize,
}

impl DetectorHead {
    pub fn new(prefix: &str, cfeat: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let a = NUM_ASPECTS;
        let cls_out = Conv::new(&format!("{prefix}.cls_out"), cfeat, a * num_classes, 3, 1, 1, rng);
        // bias the class logits toward a 0.01 prior so an untrained head is
        // not swamped by foreground loss
        let prior = -(0.99f64 / 0.01).ln();
        cls_out.bias.tensor.with_data_mut(|b| b.fill(prior));
        DetectorHead {
            cls_tower: (0..2)
                .map(|i| Conv::new(&format!("{prefix}.cls{i}"), cfeat, cfeat, 3, 1, 1, rng))
                .collect(),
            reg_tower: (0..2)
                .map(|i| Conv::new(&format!("{prefix}.reg{i}"), cfeat, cfeat, 3, 1, 1, rng))
                .collect(),
            cls_out,
            reg_out: Conv::new(&format!("{prefix}.reg_out"), cfeat, 4 * a, 3, 1, 1, rng),
            num_classes,
        }
    }

    /// (class logits [B,A*K,H,W], box offsets [B,4A,H,W]) for one level.
    pub fn forward_level(&self, p: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut c = p.clone();
        for conv in &self.cls_tower {
            c = relu(&conv.forward(&c)?);
        }
        let mut r = p.clone();
        for conv in &self.reg_tower {
            r = relu(&conv.forward(&r)?);
        }
        Ok((self.cls_out.forward(&c)?, self.reg_out.forward(&r)?))
    }

    pub fn forward(&self, pyramid: &Pyramid) -> Result<Vec<(Tensor, Tensor)>> {
        pyramid.levels.iter().map(|p| self.forward_level(p)).collect()
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p: Vec<Parameter> = self
            .cls_tower
            .iter()
            .chain(&self.reg_tower)
            .flat_map(Conv::params)
            .collect();
        p.extend(self.cls_out.params());
        p.extend(self.reg_out.params());
        p
    }
}

/// A complete single-modality detector.
pub struct Detector {
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub head: DetectorHead,
}

impl Detector {
    pub fn new(prefix: &str, cin: usize, cfeat: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Detector {
            backbone: Backbone::new(&format!("{prefix}.backbone"), cin, &mut rng),
            fpn: Fpn::new(&format!("{prefix}.fpn"), cfeat, &mut rng),
            head: DetectorHead::new(&format!("{prefix}.head"), cfeat, num_classes, &mut rng),
        }
    }

    pub fn pyramid(&self, image: &Tensor) -> Result<Pyramid> {
        self.fpn.forward(&self.backbone.forward(&standardize_image(image)?)?)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        self.head.forward(&self.pyramid(image)?)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.backbone.params();
        p.extend(self.fpn.params());
        p.extend(self.head.params());
        p
    }

    /// Backbone + FPN parameters (the branch weights kept frozen during
    /// fusion training).
    pub fn branch_params(&self) -> Vec<Parameter> {
        let mut p = self.backbone.params();
        p.extend(self.fpn.params());
        p
    }
}

/// Per-image standardization applied before the detection backbone: each
/// batch item is shifted to zero mean and unit variance over all channels
/// and pixels, so detection is invariant to global gain and bias shifts
/// (a hazy or dim capture). The scene classifier bypasses this on purpose:
/// global photometry is exactly the cue it classifies on.
pub fn standardize_image(image: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = image.dims4("standardize_image")?;
    let data = image.data();
    let stride = c * h * w;
    let mut out = vec![0.0; data.len()];
    for i in 0..b {
        let src = &data[i * stride..(i + 1) * stride];
        let mean = src.iter().sum::<f64>() / stride as f64;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / stride as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for (o, v) in out[i * stride..(i + 1) * stride].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
    }
    Ok(Tensor::new(image.shape().to_vec(), out))
}

pub fn param_count(params: &[Parameter]) -> usize {
    params.iter().map(|p| p.tensor.len()).sum()
}

/// Focal/matching hyperparameters for [`detection_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            positive_iou: 0.5,
            negative_iou: 0.4,
        }
    }
}

/// Focal term for one logit with probability `p` already applied.
pub fn focal_term(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    if target {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// d(focal)/d(logit) at probability `p` (p = sigmoid(logit)).
pub fn focal_grad(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    if target {
        alpha * gamma * p * (1.0 - p).powf(gamma) * p.ln() - alpha * (1.0 - p).powf(gamma + 1.0)
    } else {
        (1.0 - alpha)
            * (-gamma * p.powf(gamma) * (1.0 - p) * (1.0 - p).ln() + p.powf(gamma + 1.0))
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

fn anchor_box(a: &Anchor) -> BBox {
    BBox::new(
        a.cx - 0.5 * a.width,
        a.cy - 0.5 * a.height,
        a.cx + 0.5 * a.width,
        a.cy + 0.5 * a.height,
    )
}

/// Focal classification loss plus smooth-L1 box regression over a batch.
///
/// `outputs[l]` is the head output for pyramid level `l`; `level_anchors[l]`
/// its anchors in (row, col, aspect) order; `gts[b]` the ground truth for
/// batch element `b`. Anchors with best IoU >= positive_iou are positive
/// (one-hot focal target plus box offsets toward their best ground truth),
/// < negative_iou are negative, the band in between is ignored. The sum is
/// normalized by max(1, #positives). Implemented as one fused op with
/// hand-written gradients into the head's output tensors.
pub fn detection_loss(
    outputs: &[(Tensor, Tensor)],
    level_anchors: &[Vec<Anchor>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<Tensor> {
    if outputs.len() != level_anchors.len() {
        return Err(Error::shape(
            "detection_loss",
            format!("{} output levels vs {} anchor levels", outputs.len(), level_anchors.len()),
        ));
    }
    if outputs.is_empty() {
        return Err(Error::Empty("detection_loss"));
    }
    let a = NUM_ASPECTS;
    let batch = outputs[0].0.shape()[0];
    if gts.len() != batch {
        return Err(Error::shape(
            "detection_loss",
            format!("batch {batch} vs {} ground-truth lists", gts.len()),
        ));
    }

    // first pass: label every anchor of every image
    // (level, anchor index, class target or None, box target)
    struct Assignment {
        batch: usize,
        level: usize,
        anchor: usize,
        class_id: usize,
        offsets: [f64; 4],
    }
    let mut positives: Vec<Assignment> = Vec::new();
    // per (batch, level): 0 = negative, 1 = positive, 2 = ignore
    let mut labels: Vec<Vec<Vec<u8>>> = vec![Vec::new(); batch];
    for (bi, gt_list) in gts.iter().enumerate() {
        for (li, anchors) in level_anchors.iter().enumerate() {
            let mut lab = vec![0u8; anchors.len()];
            for (ai, anchor) in anchors.iter().enumerate() {
                let abox = anchor_box(anchor);
                let mut best = 0.0;
                let mut best_gt = None;
                for (gi, gt) in gt_list.iter().enumerate() {
                    let v = iou(&abox, &gt.bbox);
                    if v > best {
                        best = v;
                        best_gt = Some(gi);
                    }
                }
                if best >= cfg.positive_iou {
                    let gt = &gt_list[best_gt.unwrap()];
                    lab[ai] = 1;
                    positives.push(Assignment {
                        batch: bi,
                        level: li,
                        anchor: ai,
                        class_id: gt.class_id,
                        offsets: box_encode(&gt.bbox, anchor)?,
                    });
                } else if best >= cfg.negative_iou {
                    lab[ai] = 2;
                }
            }
            labels[bi].push(lab);
        }
    }
    let norm = positives.len().max(1) as f64;

    // second pass: loss value and raw (unnormalized) gradients per tensor
    let mut loss = 0.0;
    let mut cls_grads: Vec<Vec<f64>> = outputs.iter().map(|(c, _)| vec![0.0; c.len()]).collect();
    let mut reg_grads: Vec<Vec<f64>> = outputs.iter().map(|(_, r)| vec![0.0; r.len()]).collect();

    for (li, (cls, _)) in outputs.iter().enumerate() {
        let (b, cch, h, w) = cls.dims4("detection_loss")?;
        if b != batch || cch != a * num_classes {
            return Err(Error::shape(
                "detection_loss",
                format!("level {li} class map [{b},{cch},{h},{w}] does not fit batch {batch}, {num_classes} classes"),
            ));
        }
        if level_anchors[li].len() != h * w * a {
            return Err(Error::shape(
                "detection_loss",
                format!("level {li}: {} anchors for {h}x{w}x{a} cells", level_anchors[li].len()),
            ));
        }
        cls.with_data(|xv| {
            for bi in 0..batch {
                for row in 0..h {
                    for col in 0..w {
                        for ai_cell in 0..a {
                            let anchor_idx = (row * w + col) * a + ai_cell;
                            let lab = labels[bi][li][anchor_idx];
                            if lab == 2 {
                                continue;
                            }
                            // positives get their one-hot target later; here
                            // every class slot of a non-ignored anchor is a
                            // negative by default
                            for k in 0..num_classes {
                                if lab == 1 {
                                    continue;
                                }
                                let idx = ((bi * cch + ai_cell * num_classes + k) * h + row) * w
                                    + col;
                                let p = stable_sigmoid(xv[idx]);
                                loss += focal_term(p, false, cfg.alpha, cfg.gamma);
                                cls_grads[li][idx] += focal_grad(p, false, cfg.alpha, cfg.gamma);
                            }
                        }
                    }
                }
            }
        });
    }

    for pos in &positives {
        let (cls, reg) = &outputs[pos.level];
        let (_, cch, h, w) = cls.dims4("detection_loss")?;
        let cell = pos.anchor / a;
        let ai_cell = pos.anchor % a;
        let (row, col) = (cell / w, cell % w);
        cls.with_data(|xv| {
            for k in 0..num_classes {
                let idx = ((pos.batch * cch + ai_cell * num_classes + k) * h + row) * w + col;
                let p = stable_sigmoid(xv[idx]);
                let t = k == pos.class_id;
                loss += focal_term(p, t, cfg.alpha, cfg.gamma);
                cls_grads[pos.level][idx] += focal_grad(p, t, cfg.alpha, cfg.gamma);
            }
        });
        let (_, rch, _, _) = reg.dims4("detection_loss")?;
        reg.with_data(|xv| {
            for j in 0..4 {
                let idx = ((pos.batch * rch + ai_cell * 4 + j) * h + row) * w + col;
                let d = xv[idx] - pos.offsets[j];
                loss += smooth_l1(d);
                reg_grads[pos.level][idx] += smooth_l1_grad(d);
            }
        });
    }

    loss /= norm;
    if !loss.is_finite() {
        return Err(Error::NonFinite("detection_loss".into()));
    }

    let mut parents = Vec::with_capacity(outputs.len() * 2);
    for (c, r) in outputs {
        parents.push(c.clone());
        parents.push(r.clone());
    }
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        parents,
        Box::new(move |g, _out, parents| {
            let scale = g[0] / norm;
            for (li, pair) in parents.chunks(2).enumerate() {
                if pair[0].needs_grad() {
                    pair[0].accum_grad_owned(
                        cls_grads[li].iter().map(|v| v * scale).collect(),
                    );
                }
                if pair[1].needs_grad() {
                    pair[1].accum_grad_owned(
                        reg_grads[li].iter().map(|v| v * scale).collect(),
                    );
                }
            }
        }),
    ))
}

/// Decode raw head outputs for a single image into thresholded detections,
/// boxes clipped to the image, before NMS.
pub fn decode_outputs(
    outputs: &[(Tensor, Tensor)],
    image_size: usize,
    num_classes: usize,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let a = NUM_ASPECTS;
    let mut out = Vec::new();
    for (li, (cls, reg)) in outputs.iter().enumerate() {
        let (b, cch, h, w) = cls.dims4("decode_outputs")?;
        if b != 1 {
            return Err(Error::invalid(
                "decode_outputs",
                format!("expected batch 1, got {b}"),
            ));
        }
        if !cls.all_finite() || !reg.all_finite() {
            return Err(Error::NonFinite("decode_outputs".into()));
        }
        let anchors = anchors::anchors_for_level(image_size, li)?;
        let (_, rch, _, _) = reg.dims4("decode_outputs")?;
        cls.with_data(|cv| {
            reg.with_data(|rv| {
                for row in 0..h {
                    for col in 0..w {
                        for ai_cell in 0..a {
                            let anchor = &anchors[(row * w + col) * a + ai_cell];
                            let offsets: [f64; 4] = std::array::from_fn(|j| {
                                rv[((ai_cell * 4 + j) * h + row) * w + col]
                            });
                            let bbox = box_decode(&offsets, anchor);
                            let clipped = BBox::new(
                                bbox.x_min.clamp(0.0, image_size as f64),
                                bbox.y_min.clamp(0.0, image_size as f64),
                                bbox.x_max.clamp(0.0, image_size as f64),
                                bbox.y_max.clamp(0.0, image_size as f64),
                            );
                            if !clipped.is_valid() {
                                continue;
                            }
                            for k in 0..num_classes {
                                let logit =
                                    cv[((ai_cell * num_classes + k) * h + row) * w + col];
                                let score = stable_sigmoid(logit);
                                if score >= score_threshold {
                                    out.push(Detection {
                                        class_id: k,
                                        score,
                                        bbox: clipped,
                                    });
                                }
                            }
                        }
                    }
                }
            })
        });
        let _ = (cch, rch);
    }
    Ok(out)
}

/// Full single-modality inference: backbone, FPN, head, decode, NMS.
pub fn detect_single(detector: &Detector, image: &Tensor) -> Result<Vec<Detection>> {
    let (_, _, h, _) = image.dims4("detect_single")?;
    crate::tensor::no_grad(|| {
        let outputs = detector.forward(image)?;
        let raw = decode_outputs(&outputs, h, detector.head.num_classes, SCORE_THRESHOLD)?;
        Ok(nms(&raw, NMS_IOU_THRESHOLD, SCORE_THRESHOLD))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::rand_uniform(vec![1, 3, 128, 128], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn backbone_stage_geometry() {
        let bb = Backbone::new("b", 3, &mut ChaCha20Rng::seed_from_u64(0));
        let stages = bb.forward(&image(1)).unwrap();
        let dims: Vec<Vec<usize>> = stages.iter().map(|s| s.shape()).collect();
        assert_eq!(
            dims,
            vec![
                vec![1, 8, 64, 64],
                vec![1, 16, 32, 32],
                vec![1, 32, 16, 16],
                vec![1, 32, 8, 8],
            ]
        );
    }

    #[test]
    fn backbone_rejects_indivisible_input() {
        let bb = Backbone::new("b", 3, &mut ChaCha20Rng::seed_from_u64(0));
        let x = Tensor::zeros(vec![1, 3, 100, 100]);
        assert!(bb.forward(&x).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let bb = Backbone::new("b", 3, &mut ChaCha20Rng::seed_from_u64(0));
        for p in bb.params() {
            p.tensor.with_data_mut(|d| d.fill(0.0));
        }
        let stages = bb.forward(&image(2)).unwrap();
        for s in stages {
            assert!(s.with_data(|d| d.iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn same_seed_same_outputs() {
        let d1 = Detector::new("d", 3, 8, 2, 7);
        let d2 = Detector::new("d", 3, 8, 2, 7);
        let img = image(3);
        let o1 = d1.forward(&img).unwrap();
        let o2 = d2.forward(&img).unwrap();
        for ((c1, r1), (c2, r2)) in o1.iter().zip(&o2) {
            assert_eq!(c1.data(), c2.data());
            assert_eq!(r1.data(), r2.data());
        }
    }

    #[test]
    fn pyramid_geometry() {
        let d = Detector::new("d", 3, 8, 2, 0);
        let pyr = d.pyramid(&image(4)).unwrap();
        assert_eq!(pyr.levels.len(), 5);
        let spatial: Vec<usize> = pyr.levels.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(spatial, vec![16, 8, 4, 2, 1]);
        for l in &pyr.levels {
            assert_eq!(l.shape()[1], 8);
        }
        assert_eq!(pyr.cfeat(), 8);
    }

    #[test]
    fn p6_p7_are_pooled_p5() {
        let d = Detector::new("d", 3, 8, 2, 0);
        let pyr = d.pyramid(&image(5)).unwrap();
        let p6 = maxpool2(&pyr.levels[2]).unwrap();
        let p7 = maxpool2(&p6).unwrap();
        assert_eq!(pyr.levels[3].data(), p6.data());
        assert_eq!(pyr.levels[4].data(), p7.data());
    }

    #[test]
    fn head_output_channels() {
        let d = Detector::new("d", 3, 8, 2, 0);
        let outputs = d.forward(&image(6)).unwrap();
        assert_eq!(outputs.len(), 5);
        for (c, r) in &outputs {
            assert_eq!(c.shape()[1], NUM_ASPECTS * 2);
            assert_eq!(r.shape()[1], 4 * NUM_ASPECTS);
        }
    }

    #[test]
    fn focal_closed_forms() {
        // p = 0.5 positive with alpha 0.25, gamma 2
        let v = focal_term(0.5, true, 0.25, 2.0);
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.04332).abs() < 1e-5);
        // gamma = 0, alpha = 1 is plain cross-entropy
        for p in [0.1, 0.5, 0.9] {
            assert!((focal_term(p, true, 1.0, 0.0) + p.ln()).abs() < 1e-12);
        }
        // confident correct positive vanishes
        assert!(focal_term(1.0 - 1e-12, true, 0.25, 2.0) < 1e-10);
    }

    #[test]
    fn focal_grad_matches_finite_difference() {
        for &target in &[true, false] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 2.5] {
                let h = 1e-6;
                let f = |x: f64| focal_term(stable_sigmoid(x), target, 0.25, 2.0);
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                let an = focal_grad(stable_sigmoid(x), target, 0.25, 2.0);
                assert!((fd - an).abs() < 1e-6, "x={x} target={target}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn smooth_l1_shape() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1_grad(0.5), 0.5);
        assert_eq!(smooth_l1_grad(3.0), 1.0);
        assert_eq!(smooth_l1_grad(-3.0), -1.0);
    }

    fn tiny_level() -> (Vec<Anchor>, usize, usize) {
        // one 2x2 level, anchors 8x8 around cell centers
        let mut anchors = Vec::new();
        for row in 0..2 {
            for col in 0..2 {
                for _ in 0..NUM_ASPECTS {
                    anchors.push(Anchor {
                        level: 0,
                        cx: col as f64 * 8.0 + 4.0,
                        cy: row as f64 * 8.0 + 4.0,
                        width: 8.0,
                        height: 8.0,
                    });
                }
            }
        }
        (anchors, 2, 2)
    }

    #[test]
    fn loss_nonnegative_and_zero_gt_is_classification_only() {
        let (anchors, h, w) = tiny_level();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let cls = Tensor::rand_uniform(vec![1, NUM_ASPECTS * 2, h, w], -1.0, 1.0, &mut rng)
            .requires_grad(true);
        let reg = Tensor::rand_uniform(vec![1, 4 * NUM_ASPECTS, h, w], -1.0, 1.0, &mut rng)
            .requires_grad(true);
        let loss = detection_loss(
            &[(cls.clone(), reg.clone())],
            &[anchors],
            &[vec![]],
            2,
            &LossConfig::default(),
        )
        .unwrap();
        assert!(loss.item() > 0.0);
        loss.backward().unwrap();
        assert!(cls.grad().unwrap().iter().any(|v| *v != 0.0));
        // no positives: regression side untouched
        assert!(reg.grad().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_gradients_match_finite_difference() {
        let (anchors, h, w) = tiny_level();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let cls = Parameter::new(
            "cls",
            Tensor::rand_uniform(vec![1, NUM_ASPECTS * 2, h, w], -1.0, 1.0, &mut rng),
        );
        let reg = Parameter::new(
            "reg",
            Tensor::rand_uniform(vec![1, 4 * NUM_ASPECTS, h, w], -1.0, 1.0, &mut rng),
        );
        // gt equal to the first cell's anchor plus a shifted second box
        let gts = vec![vec![
            GroundTruthBox {
                class_id: 1,
                bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
            },
            GroundTruthBox {
                class_id: 0,
                bbox: BBox::new(8.5, 8.0, 16.5, 16.0),
            },
        ]];
        let anchors_cl = anchors.clone();
        let report = crate::tensor::grad_check(
            &[cls.clone(), reg.clone()],
            || {
                detection_loss(
                    &[(cls.tensor.clone(), reg.tensor.clone())],
                    &[anchors_cl.clone()],
                    &gts,
                    2,
                    &LossConfig::default(),
                )
            },
            1e-5,
            3,
            256,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn loss_through_head_gradcheck() {
        // end-to-end: pyramid leaf -> head convs -> detection_loss
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let head = DetectorHead::new("h", 4, 2, &mut rng);
        let p = Tensor::rand_uniform(vec![1, 4, 2, 2], -1.0, 1.0, &mut rng);
        let (anchors, _, _) = tiny_level();
        let gts = vec![vec![GroundTruthBox {
            class_id: 0,
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
        }]];
        let params = head.params();
        let report = crate::tensor::grad_check(
            &params,
            || {
                let out = head.forward_level(&p)?;
                detection_loss(&[out], &[anchors.clone()], &gts, 2, &LossConfig::default())
            },
            1e-4,
            4,
            64,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn detect_single_is_deterministic_and_well_formed() {
        let d = Detector::new("d", 3, 8, 2, 21);
        let img = image(22);
        let a = detect_single(&d, &img).unwrap();
        let b = detect_single(&d, &img).unwrap();
        assert_eq!(a, b);
        for det in &a {
            assert!(det.score >= SCORE_THRESHOLD && det.score <= 1.0);
            assert!(det.bbox.is_valid());
            assert!(det.class_id < 2);
        }
    }

    #[test]
    fn detect_single_rejects_nan_weights() {
        let d = Detector::new("d", 3, 8, 2, 21);
        d.head.cls_out.weight.tensor.with_data_mut(|v| v[0] = f64::NAN);
        assert!(matches!(
            detect_single(&d, &image(23)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn param_count_is_exact_for_one_conv() {
        let c = Conv::new("c", 3, 8, 3, 1, 1, &mut ChaCha20Rng::seed_from_u64(0));
        assert_eq!(param_count(&c.params()), 8 * 3 * 3 * 3 + 8);
    }
}
