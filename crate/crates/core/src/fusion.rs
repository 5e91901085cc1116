//! CBAM-style fusion of two same-scale feature maps, the ECA channel-gate
//! alternate, and attention introspection exports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::FusionKind;
use crate::detector::boxes::{nms, Detection};
use crate::detector::{
    decode_outputs, Conv, Detector, DetectorHead, Pyramid, NMS_IOU_THRESHOLD, SCORE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::tensor::{
    add, channel_pool, concat_channels, conv1d_channels, global_pool, linear, mul, no_grad,
    reshape, sigmoid, ChannelPoolKind, Parameter, PoolKind, Tensor,
};

/// Reduction ratio convention: 16 for wide maps, C/4 at toy widths.
pub fn default_ratio(channels: usize) -> usize {
    if channels >= 16 {
        16
    } else {
        (channels / 4).max(1)
    }
}

/// Per-channel gate from pooled descriptors through a bias-free two-layer
/// MLP: sigma(W1 W0 F_avg + W1 W0 F_max).
pub struct ChannelAttention {
    pub w0: Parameter,
    pub w1: Parameter,
    pub channels: usize,
    pub ratio: usize,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::invalid(
                "ChannelAttention",
                format!("{channels} channels not divisible by ratio {ratio}"),
            ));
        }
        let hidden = channels / ratio;
        let b0 = 1.0 / (channels as f64).sqrt();
        let b1 = 1.0 / (hidden as f64).sqrt();
        Ok(ChannelAttention {
            w0: Parameter::new(
                format!("{name}.w0"),
                Tensor::rand_uniform(vec![hidden, channels], -b0, b0, rng),
            ),
            w1: Parameter::new(
                format!("{name}.w1"),
                Tensor::rand_uniform(vec![channels, hidden], -b1, b1, rng),
            ),
            channels,
            ratio,
        })
    }

    /// Mask [B,C,1,1] with entries strictly in (0,1).
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = f.dims4("channel_attention")?;
        if c != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let mlp = |pooled: &Tensor| -> Result<Tensor> {
            let h = linear(pooled, &self.w0.tensor, None)?;
            linear(&h, &self.w1.tensor, None)
        };
        let avg = mlp(&global_pool(f, PoolKind::Avg)?)?;
        let max = mlp(&global_pool(f, PoolKind::Max)?)?;
        reshape(&sigmoid(&add(&avg, &max)?), vec![b, c, 1, 1])
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.w0.clone(), self.w1.clone()]
    }
}

/// Per-pixel gate: sigma(conv7x7([channel-mean; channel-max])).
pub struct SpatialAttention {
    pub kernel: Parameter,
    pub bias: Parameter,
}

impl SpatialAttention {
    pub fn new(name: &str, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (2.0 * 49.0f64).sqrt();
        SpatialAttention {
            kernel: Parameter::new(
                format!("{name}.kernel"),
                Tensor::rand_uniform(vec![1, 2, 7, 7], -bound, bound, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::rand_uniform(vec![1], -bound, bound, rng),
            ),
        }
    }

    /// Mask [B,1,H,W] with entries strictly in (0,1).
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let mean = channel_pool(f, ChannelPoolKind::Mean)?;
        let max = channel_pool(f, ChannelPoolKind::Max)?;
        let planes = concat_channels(&mean, &max)?;
        let conv = crate::tensor::conv2d(&planes, &self.kernel.tensor, Some(&self.bias.tensor), 1, 3)?;
        Ok(sigmoid(&conv))
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.kernel.clone(), self.bias.clone()]
    }
}

/// ECA channel gate: sigma of a width-k 1-D convolution over the global
/// average-pooled channel descriptor.
pub struct EcaAttention {
    pub kernel: Parameter,
    pub channels: usize,
}

impl EcaAttention {
    pub fn new(name: &str, channels: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::invalid(
                "EcaAttention",
                format!("kernel width {k} must be odd"),
            ));
        }
        if k > channels {
            return Err(Error::invalid(
                "EcaAttention",
                format!("kernel width {k} exceeds {channels} channels"),
            ));
        }
        let bound = 1.0 / (k as f64).sqrt();
        Ok(EcaAttention {
            kernel: Parameter::new(
                format!("{name}.kernel"),
                Tensor::rand_uniform(vec![k], -bound, bound, rng),
            ),
            channels,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = f.dims4("eca_attention")?;
        if c != self.channels {
            return Err(Error::shape(
                "eca_attention",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let avg = global_pool(f, PoolKind::Avg)?;
        let conv = conv1d_channels(&avg, &self.kernel.tensor)?;
        reshape(&sigmoid(&conv), vec![b, c, 1, 1])
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.kernel.clone()]
    }
}

pub enum ChannelGate {
    Cbam(ChannelAttention),
    Eca(EcaAttention),
}

impl ChannelGate {
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        match self {
            ChannelGate::Cbam(ca) => ca.forward(f),
            ChannelGate::Eca(eca) => eca.forward(f),
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        match self {
            ChannelGate::Cbam(ca) => ca.params(),
            ChannelGate::Eca(eca) => eca.params(),
        }
    }
}

/// Default ECA kernel width at toy channel counts.
pub const ECA_KERNEL: usize = 3;

/// One trainable fusion unit for a single pyramid level: channel gate,
/// spatial gate, and a 1x1 reduction back to the per-modality width.
pub struct FusionModule {
    pub gate: ChannelGate,
    pub spatial: SpatialAttention,
    pub reduce: Conv,
    pub level: usize,
    pub cfeat: usize,
}

impl FusionModule {
    pub fn new(
        name: &str,
        cfeat: usize,
        level: usize,
        kind: FusionKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = 2 * cfeat;
        let gate = match kind {
            FusionKind::Cbam => ChannelGate::Cbam(ChannelAttention::new(
                &format!("{name}.channel"),
                c,
                default_ratio(c),
                rng,
            )?),
            FusionKind::Eca => ChannelGate::Eca(EcaAttention::new(
                &format!("{name}.channel"),
                c,
                if c >= ECA_KERNEL { ECA_KERNEL } else { 1 },
                rng,
            )?),
        };
        let spatial = SpatialAttention::new(&format!("{name}.spatial"), rng);
        // reduce starts as the diagonal averaging pattern so an untrained
        // module emits the mean of the two modality features: fresh
        // attention logits sit near zero, so both gates open halfway and
        // the diagonal weight of 2 cancels the 0.5 * 0.5 attenuation
        let reduce = Conv::new(&format!("{name}.reduce"), c, cfeat, 1, 1, 0, rng);
        reduce.weight.tensor.with_data_mut(|w| {
            w.fill(0.0);
            for j in 0..cfeat {
                w[j * c + j] = 2.0;
                w[j * c + j + cfeat] = 2.0;
            }
        });
        reduce.bias.tensor.with_data_mut(|b| b.fill(0.0));
        Ok(FusionModule {
            gate,
            spatial,
            reduce,
            level,
            cfeat,
        })
    }

    /// F = [F_rgb; F_x]; F' = M_c(F) (x) F; F'' = M_s(F') (x) F';
    /// returns reduce(F'') with Cfeat channels.
    pub fn fuse(&self, f_rgb: &Tensor, f_x: &Tensor) -> Result<Tensor> {
        let (_, cr, _, _) = f_rgb.dims4("cbam_fuse")?;
        let (_, cx, _, _) = f_x.dims4("cbam_fuse")?;
        if cr != self.cfeat || cx != self.cfeat {
            return Err(Error::shape(
                "cbam_fuse",
                format!("expected {} channels per modality, got {cr} and {cx}", self.cfeat),
            ));
        }
        let f = concat_channels(f_rgb, f_x)?;
        let f1 = mul(&f, &self.gate.forward(&f)?)?;
        let f2 = mul(&f1, &self.spatial.forward(&f1)?)?;
        self.reduce.forward(&f2)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.gate.params();
        p.extend(self.spatial.params());
        p.extend(self.reduce.params());
        p
    }
}

pub fn cbam_fuse(f_rgb: &Tensor, f_x: &Tensor, m: &FusionModule) -> Result<Tensor> {
    m.fuse(f_rgb, f_x)
}

/// Analytic parameter count of one CBAM fusion module: channel MLP
/// 2*C*(C/r), spatial kernel+bias 2*49+1, reduce C*Cf+Cf, with C = 2*Cf.
pub fn cbam_module_param_count(cfeat: usize, ratio: usize) -> usize {
    let c = 2 * cfeat;
    2 * c * (c / ratio) + (2 * 49 + 1) + (c * cfeat + cfeat)
}

/// Five fusion modules, one per pyramid level, for one scene (or the
/// scene-agnostic bank).
pub struct FusionBank {
    pub scene: String,
    pub modules: Vec<FusionModule>,
}

impl FusionBank {
    pub fn new(scene: &str, cfeat: usize, kind: FusionKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let modules = (0..5)
            .map(|level| {
                FusionModule::new(&format!("fusion.{scene}.level{level}"), cfeat, level, kind, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionBank {
            scene: scene.to_string(),
            modules,
        })
    }

    pub fn fuse_pyramids(&self, rgb: &Pyramid, x: &Pyramid) -> Result<Pyramid> {
        if rgb.levels.len() != 5 || x.levels.len() != 5 {
            return Err(Error::shape(
                "fuse_pyramids",
                format!("expected 5 levels, got {} and {}", rgb.levels.len(), x.levels.len()),
            ));
        }
        let levels = self
            .modules
            .iter()
            .zip(rgb.levels.iter().zip(&x.levels))
            .map(|(m, (fr, fx))| m.fuse(fr, fx))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pyramid { levels })
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.modules.iter().flat_map(FusionModule::params).collect()
    }
}

/// Dual-branch inference: per-level fusion of the two frozen pyramids, the
/// shared head on the fused pyramid, decode, NMS.
pub fn detect_fused(
    rgb_branch: &Detector,
    x_branch: &Detector,
    bank: &FusionBank,
    head: &DetectorHead,
    rgb_image: &Tensor,
    x_image: &Tensor,
) -> Result<Vec<Detection>> {
    let (_, _, h, _) = rgb_image.dims4("detect_fused")?;
    no_grad(|| {
        let fused = bank.fuse_pyramids(&rgb_branch.pyramid(rgb_image)?, &x_branch.pyramid(x_image)?)?;
        let outputs = head.forward(&fused)?;
        let raw = decode_outputs(&outputs, h, head.num_classes, SCORE_THRESHOLD)?;
        Ok(nms(&raw, NMS_IOU_THRESHOLD, SCORE_THRESHOLD))
    })
}

/// Average channel-attention profile of one level over a dataset slice,
/// min-max normalized to [0,1] (a constant profile maps to all zeros).
/// `features[i]` is the (rgb, x) feature pair of sample `i` at this level.
/// Output is plot-ready text: a header line then one value per line; the
/// first Cfeat entries are RGB channels, the rest X channels.
pub fn export_channel_attention(
    bank: &FusionBank,
    level: usize,
    features: &[(Tensor, Tensor)],
    scene: &str,
) -> Result<String> {
    if features.is_empty() {
        return Err(Error::Empty("export_channel_attention"));
    }
    if level >= bank.modules.len() {
        return Err(Error::invalid(
            "export_channel_attention",
            format!("level {level} out of range"),
        ));
    }
    let m = &bank.modules[level];
    let c = 2 * m.cfeat;
    let mut profile = vec![0.0; c];
    no_grad(|| -> Result<()> {
        for (fr, fx) in features {
            let f = concat_channels(fr, fx)?;
            let mask = m.gate.forward(&f)?;
            let (b, _, _, _) = mask.dims4("export_channel_attention")?;
            mask.with_data(|mv| {
                for bi in 0..b {
                    for ci in 0..c {
                        profile[ci] += mv[bi * c + ci];
                    }
                }
            });
        }
        Ok(())
    })?;
    let total: f64 = features.iter().map(|(fr, _)| fr.shape()[0] as f64).sum();
    for v in &mut profile {
        *v /= total;
    }
    let (lo, hi) = profile
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let normalized: Vec<f64> = if hi - lo < 1e-12 {
        vec![0.0; c]
    } else {
        profile.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    let mut out = format!("# level={level} scene={scene} channels={c}\n");
    for v in normalized {
        out.push_str(&format!("{v:.6}\n"));
    }
    Ok(out)
}

/// Eigen-CAM style heatmap: projection of the C x (H*W) activation matrix
/// onto its first right singular vector, computed by power iteration
/// (200 iterations or 1e-10 convergence), sign-fixed so the
/// largest-magnitude entry is positive, then min-max normalized to [0,1].
/// All-zero activations yield an all-zero map.
pub fn cam_heatmap(activations: &Tensor) -> Result<Vec<f64>> {
    let (b, c, h, w) = activations.dims4("cam_heatmap")?;
    if b != 1 {
        return Err(Error::invalid("cam_heatmap", format!("expected batch 1, got {b}")));
    }
    let hw = h * w;
    let data = activations.data();
    if data.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; hw]);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cam_heatmap".into()));
    }
    // power iteration on (M^T M) with M the C x HW activation matrix
    let mut v = vec![1.0 / (hw as f64).sqrt(); hw];
    let mut prev = v.clone();
    for _ in 0..200 {
        // u = M v (length C), then v' = M^T u
        let mut u = vec![0.0; c];
        for ci in 0..c {
            let row = &data[ci * hw..(ci + 1) * hw];
            u[ci] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut next = vec![0.0; hw];
        for ci in 0..c {
            let row = &data[ci * hw..(ci + 1) * hw];
            for (n, a) in next.iter_mut().zip(row) {
                *n += u[ci] * a;
            }
        }
        let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; hw]);
        }
        for n in &mut next {
            *n /= norm;
        }
        let delta: f64 = next
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev.clone_from(&next);
        v = next;
        if delta < 1e-10 {
            break;
        }
    }
    // sign fix: largest-magnitude entry positive
    let dominant = v
        .iter()
        .cloned()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if dominant < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if hi - lo < 1e-12 {
        return Ok(vec![0.0; hw]);
    }
    Ok(v.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// Plot-data serialization of a CAM heatmap, same header convention as the
/// channel-attention export.
pub fn cam_heatmap_text(heatmap: &[f64], level: usize, scene: &str) -> String {
    let mut out = format!("# level={level} scene={scene} channels={}\n", heatmap.len());
    for v in heatmap {
        out.push_str(&format!("{v:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::param_count;
    use crate::tensor::{conv2d, grad_check, sum_all};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn channel_attention_zero_weights_half_mask() {
        let ca = ChannelAttention::new("ca", 8, 2, &mut rng(0)).unwrap();
        ca.w0.tensor.with_data_mut(|d| d.fill(0.0));
        let f = Tensor::rand_uniform(vec![2, 8, 4, 4], -1.0, 1.0, &mut rng(1));
        let mask = ca.forward(&f).unwrap();
        assert_eq!(mask.shape(), vec![2, 8, 1, 1]);
        assert!(mask.with_data(|d| d.iter().all(|v| (*v - 0.5).abs() < 1e-15)));
    }

    #[test]
    fn channel_attention_identity_closed_form() {
        let ca = ChannelAttention::new("ca", 2, 1, &mut rng(0)).unwrap();
        for p in ca.params() {
            p.tensor.with_data_mut(|d| {
                d.fill(0.0);
                d[0] = 1.0;
                d[3] = 1.0;
            });
        }
        // constant channels with means 1 and -1: avg = max -> sigma(2), sigma(-2)
        let mut data = vec![1.0; 9];
        data.extend(vec![-1.0; 9]);
        let f = Tensor::new(vec![1, 2, 3, 3], data);
        let mask = ca.forward(&f).unwrap();
        let m = mask.data();
        assert!((m[0] - 0.88079708).abs() < 1e-8);
        assert!((m[1] - 0.11920292).abs() < 1e-8);
    }

    #[test]
    fn channel_attention_constant_input_avg_max_symmetry() {
        let ca = ChannelAttention::new("ca", 4, 2, &mut rng(3)).unwrap();
        let means = [0.3, -0.7, 1.1, 0.0];
        let mut data = Vec::new();
        for m in means {
            data.extend(vec![m; 4]);
        }
        let f = Tensor::new(vec![1, 4, 2, 2], data);
        let mask = ca.forward(&f).unwrap().data();
        // expected sigma(2 * W1 W0 means)
        let w0 = ca.w0.tensor.data();
        let w1 = ca.w1.tensor.data();
        let hidden: Vec<f64> = (0..2)
            .map(|i| (0..4).map(|j| w0[i * 4 + j] * means[j]).sum())
            .collect();
        for ci in 0..4 {
            let z: f64 = (0..2).map(|i| w1[ci * 2 + i] * hidden[i]).sum();
            let expect = crate::tensor::stable_sigmoid(2.0 * z);
            assert!((mask[ci] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_attention_zero_weights_half_mask() {
        let sa = SpatialAttention::new("sa", &mut rng(0));
        for p in sa.params() {
            p.tensor.with_data_mut(|d| d.fill(0.0));
        }
        let f = Tensor::rand_uniform(vec![1, 4, 5, 5], -1.0, 1.0, &mut rng(1));
        let mask = sa.forward(&f).unwrap();
        assert_eq!(mask.shape(), vec![1, 1, 5, 5]);
        assert!(mask.with_data(|d| d.iter().all(|v| (*v - 0.5).abs() < 1e-15)));
    }

    #[test]
    fn spatial_attention_matches_composed_oracle() {
        let sa = SpatialAttention::new("sa", &mut rng(7));
        let f = Tensor::rand_uniform(vec![2, 6, 8, 8], -2.0, 2.0, &mut rng(8));
        let got = sa.forward(&f).unwrap();
        let mean = channel_pool(&f, ChannelPoolKind::Mean).unwrap();
        let max = channel_pool(&f, ChannelPoolKind::Max).unwrap();
        let cat = concat_channels(&mean, &max).unwrap();
        let conv = conv2d(&cat, &sa.kernel.tensor, Some(&sa.bias.tensor), 1, 3).unwrap();
        let want = sigmoid(&conv);
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn masks_strictly_in_unit_interval_and_attenuate() {
        let m = FusionModule::new("m", 8, 0, FusionKind::Cbam, &mut rng(9)).unwrap();
        let fr = Tensor::rand_uniform(vec![1, 8, 4, 4], -3.0, 3.0, &mut rng(10));
        let fx = Tensor::rand_uniform(vec![1, 8, 4, 4], -3.0, 3.0, &mut rng(11));
        let f = concat_channels(&fr, &fx).unwrap();
        let cmask = m.gate.forward(&f).unwrap();
        assert!(cmask.with_data(|d| d.iter().all(|v| *v > 0.0 && *v < 1.0)));
        let f1 = mul(&f, &cmask).unwrap();
        // elementwise |F'| <= |F|
        f.with_data(|fv| {
            f1.with_data(|gv| {
                for (a, b) in fv.iter().zip(gv) {
                    assert!(b.abs() <= a.abs() + 1e-15);
                }
            })
        });
        let smask = m.spatial.forward(&f1).unwrap();
        assert!(smask.with_data(|d| d.iter().all(|v| *v > 0.0 && *v < 1.0)));
    }

    #[test]
    fn fuse_output_shape() {
        let m = FusionModule::new("m", 4, 2, FusionKind::Cbam, &mut rng(12)).unwrap();
        let fr = Tensor::rand_uniform(vec![3, 4, 6, 6], -1.0, 1.0, &mut rng(13));
        let fx = Tensor::rand_uniform(vec![3, 4, 6, 6], -1.0, 1.0, &mut rng(14));
        assert_eq!(m.fuse(&fr, &fx).unwrap().shape(), vec![3, 4, 6, 6]);
        assert!(m.fuse(&fr, &Tensor::zeros(vec![3, 2, 6, 6])).is_err());
    }

    #[test]
    fn zero_attention_with_averaging_reduce() {
        // zero gate/spatial weights -> both masks 0.5; full averaging reduce
        // kernel (every entry 1/C) with zero bias -> per pixel,
        // output = 0.25 * mean over the 8 concatenated channels
        let m = FusionModule::new("m", 4, 0, FusionKind::Cbam, &mut rng(15)).unwrap();
        for p in m.gate.params().iter().chain(m.spatial.params().iter()) {
            p.tensor.with_data_mut(|d| d.fill(0.0));
        }
        m.reduce.weight.tensor.with_data_mut(|d| d.fill(1.0 / 8.0));
        m.reduce.bias.tensor.with_data_mut(|d| d.fill(0.0));
        let fr = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng(16));
        let fx = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng(17));
        let out = m.fuse(&fr, &fx).unwrap();
        let frv = fr.data();
        let fxv = fx.data();
        out.with_data(|ov| {
            for p in 0..9 {
                let mut mean = 0.0;
                for c in 0..4 {
                    mean += frv[c * 9 + p] + fxv[c * 9 + p];
                }
                mean /= 8.0;
                for c in 0..4 {
                    assert!((ov[c * 9 + p] - 0.25 * mean).abs() < 1e-12);
                }
            }
        });
    }

    #[test]
    fn all_zero_weights_leave_only_reduce_bias() {
        let m = FusionModule::new("m", 4, 0, FusionKind::Cbam, &mut rng(18)).unwrap();
        for p in m.params() {
            p.tensor.with_data_mut(|d| d.fill(0.0));
        }
        m.reduce.bias.tensor.with_data_mut(|d| {
            for (i, v) in d.iter_mut().enumerate() {
                *v = i as f64 + 1.0;
            }
        });
        let fr = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng(19));
        let fx = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng(20));
        let out = m.fuse(&fr, &fx).unwrap();
        out.with_data(|ov| {
            for c in 0..4 {
                for p in 0..9 {
                    assert_eq!(ov[c * 9 + p], c as f64 + 1.0);
                }
            }
        });
    }

    #[test]
    fn fresh_module_approximates_mean() {
        let m = FusionModule::new("m", 4, 0, FusionKind::Cbam, &mut rng(21)).unwrap();
        let w = m.reduce.weight.tensor.data();
        for j in 0..4 {
            for i in 0..8 {
                let expect = if i == j || i == j + 4 { 2.0 } else { 0.0 };
                assert_eq!(w[j * 8 + i], expect);
            }
        }
        assert!(m.reduce.bias.tensor.with_data(|d| d.iter().all(|v| *v == 0.0)));

        // with both gates forced to exactly 0.5, fuse() is exactly the
        // per-channel mean of the two inputs
        for p in m.gate.params().iter().chain(m.spatial.params().iter()) {
            p.tensor.with_data_mut(|d| d.fill(0.0));
        }
        let fr = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng(25));
        let fx = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng(26));
        let out = m.fuse(&fr, &fx).unwrap();
        let (ov, frv, fxv) = (out.data(), fr.data(), fx.data());
        for i in 0..36 {
            assert!((ov[i] - 0.5 * (frv[i] + fxv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn eca_zero_kernel_half_mask_and_k1_pointwise() {
        let eca = EcaAttention::new("e", 6, 3, &mut rng(22)).unwrap();
        eca.kernel.tensor.with_data_mut(|d| d.fill(0.0));
        let f = Tensor::rand_uniform(vec![1, 6, 4, 4], -1.0, 1.0, &mut rng(23));
        let mask = eca.forward(&f).unwrap();
        assert!(mask.with_data(|d| d.iter().all(|v| (*v - 0.5).abs() < 1e-15)));

        let e1 = EcaAttention::new("e1", 6, 1, &mut rng(24)).unwrap();
        let wv = 0.7;
        e1.kernel.tensor.with_data_mut(|d| d[0] = wv);
        let mask = e1.forward(&f).unwrap().data();
        let avg = global_pool(&f, PoolKind::Avg).unwrap().data();
        for ci in 0..6 {
            assert!((mask[ci] - crate::tensor::stable_sigmoid(wv * avg[ci])).abs() < 1e-12);
        }
    }

    #[test]
    fn eca_rejects_even_kernel() {
        assert!(EcaAttention::new("e", 6, 2, &mut rng(0)).is_err());
        assert!(EcaAttention::new("e", 2, 5, &mut rng(0)).is_err());
    }

    #[test]
    fn fusion_module_gradcheck() {
        for kind in [FusionKind::Cbam, FusionKind::Eca] {
            let m = FusionModule::new("m", 4, 0, kind, &mut rng(25)).unwrap();
            let fr = Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng(26));
            let fx = Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng(27));
            let params = m.params();
            let report = grad_check(
                &params,
                || Ok(sum_all(&m.fuse(&fr, &fx)?)),
                1e-5,
                1,
                128,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn bank_has_five_levels_and_analytic_count() {
        let bank = FusionBank::new("day", 8, FusionKind::Cbam, 0).unwrap();
        assert_eq!(bank.modules.len(), 5);
        let per_module = cbam_module_param_count(8, default_ratio(16));
        assert_eq!(param_count(&bank.modules[0].params()), per_module);
        assert_eq!(param_count(&bank.params()), 5 * per_module);
        // spec'd worked example: Cf=4, r=2 -> 64 + 99 + 36 = 199
        assert_eq!(cbam_module_param_count(4, 2), 199);
    }

    #[test]
    fn export_profile_shapes_and_degenerate_cases() {
        let bank = FusionBank::new("day", 4, FusionKind::Cbam, 3).unwrap();
        let fr = Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng(28));
        let fx = Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng(29));
        let text = export_channel_attention(&bank, 1, &[(fr.clone(), fx.clone())], "day").unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# level=1 scene=day channels=8");
        let vals: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
        assert_eq!(vals.len(), 8);
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
        // min-max normalization touches both ends
        assert!(vals.iter().any(|v| *v == 0.0) && vals.iter().any(|v| *v == 1.0));

        assert!(matches!(
            export_channel_attention(&bank, 1, &[], "day"),
            Err(Error::Empty(_))
        ));

        // constant masks (zero gate weights) -> all-zero profile
        let zbank = FusionBank::new("z", 4, FusionKind::Cbam, 4).unwrap();
        for m in &zbank.modules {
            for p in m.gate.params() {
                p.tensor.with_data_mut(|d| d.fill(0.0));
            }
        }
        let text = export_channel_attention(&zbank, 0, &[(fr, fx)], "z").unwrap();
        let vals: Vec<f64> = text.lines().skip(1).map(|l| l.parse().unwrap()).collect();
        assert!(vals.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn export_two_sample_average_matches_hand_mean() {
        let bank = FusionBank::new("day", 4, FusionKind::Cbam, 5).unwrap();
        let m = &bank.modules[2];
        let mk = |seed| {
            (
                Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng(seed)),
                Tensor::rand_uniform(vec![1, 4, 4, 4], -1.0, 1.0, &mut rng(seed + 50)),
            )
        };
        let (a, b) = (mk(30), mk(31));
        let mask = |pair: &(Tensor, Tensor)| {
            m.gate
                .forward(&concat_channels(&pair.0, &pair.1).unwrap())
                .unwrap()
                .data()
        };
        let (ma, mb) = (mask(&a), mask(&b));
        let mean: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| 0.5 * (x + y)).collect();
        let (lo, hi) = mean
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let want: Vec<f64> = mean.iter().map(|v| (v - lo) / (hi - lo)).collect();
        let text = export_channel_attention(&bank, 2, &[a, b], "day").unwrap();
        let got: Vec<f64> = text.lines().skip(1).map(|l| l.parse().unwrap()).collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn cam_rank_one_recovers_pattern() {
        // activations c_i * v^T with nonnegative v: heatmap is min-max of v
        let v = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let coeffs = [1.0, -0.5, 2.0];
        let mut data = Vec::new();
        for c in coeffs {
            data.extend(v.iter().map(|x| c * x));
        }
        let act = Tensor::new(vec![1, 3, 2, 3], data);
        let heat = cam_heatmap(&act).unwrap();
        for (h, x) in heat.iter().zip(&v) {
            assert!((h - x).abs() < 1e-8, "{h} vs {x}");
        }
    }

    #[test]
    fn cam_negation_invariance_and_degenerate_cases() {
        let act = Tensor::rand_uniform(vec![1, 4, 3, 3], -1.0, 1.0, &mut rng(33));
        let neg = Tensor::new(act.shape(), act.data().iter().map(|v| -v).collect());
        assert_eq!(cam_heatmap(&act).unwrap(), cam_heatmap(&neg).unwrap());
        assert!(cam_heatmap(&Tensor::zeros(vec![1, 4, 3, 3]))
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert!(cam_heatmap(&Tensor::full(vec![1, 4, 3, 3], 2.5))
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn detect_fused_deterministic_and_frozen_gradient_routing() {
        let rgb = Detector::new("rgb", 3, 8, 2, 40);
        let x = Detector::new("x", 1, 8, 2, 41);
        let bank = FusionBank::new("day", 8, FusionKind::Cbam, 42).unwrap();
        let img_rgb = Tensor::rand_uniform(vec![1, 3, 128, 128], 0.0, 1.0, &mut rng(43));
        let img_x = Tensor::rand_uniform(vec![1, 1, 128, 128], 0.0, 1.0, &mut rng(44));
        let a = detect_fused(&rgb, &x, &bank, &x.head, &img_rgb, &img_x).unwrap();
        let b = detect_fused(&rgb, &x, &bank, &x.head, &img_rgb, &img_x).unwrap();
        assert_eq!(a, b);
        for det in &a {
            assert!(det.bbox.is_valid() && det.score <= 1.0);
        }

        // frozen-branch training step: pyramids computed under no_grad, so a
        // backward pass reaches only fusion parameters
        let (pr, px) = no_grad(|| {
            (
                rgb.pyramid(&img_rgb).unwrap(),
                x.pyramid(&img_x).unwrap(),
            )
        });
        for p in rgb.params().iter().chain(x.params().iter()).chain(bank.params().iter()) {
            p.tensor.zero_grad();
        }
        let fused = bank.fuse_pyramids(&pr, &px).unwrap();
        let loss = sum_all(&fused.levels[0]);
        loss.backward().unwrap();
        assert!(bank.modules[0]
            .params()
            .iter()
            .all(|p| p.tensor.grad().is_some()));
        assert!(rgb.params().iter().all(|p| p.tensor.grad().is_none()));
        assert!(x.params().iter().all(|p| p.tensor.grad().is_none()));
    }
}
