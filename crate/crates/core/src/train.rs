//! Optimization loops: detector pretraining, classifier training, fusion
//! bank training, and the full pipeline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{FreezeMode, RunConfig};
use crate::data::{Dataset, SceneSample, Split, NUM_CLASSES};
use crate::detector::anchors::{anchors_for_level, Anchor};
use crate::detector::boxes::GroundTruthBox;
use crate::detector::{detection_loss, Detector, DetectorHead, LossConfig, Pyramid};
use crate::error::{Error, Result};
use crate::fusion::FusionBank;
use crate::scene::{SceneClassifier, TrainedSystem};
use crate::tensor::{no_grad, softmax_cross_entropy, Parameter, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const FUSION_WEIGHT_DECAY: f64 = 1e-3;
/// Per-epoch lr decay at the reference epoch count; runs with a different
/// epoch count spread the same total decay evenly so equal step budgets
/// see equal schedules.
pub const FUSION_LR_DECAY: f64 = 0.97;
pub const FUSION_REFERENCE_EPOCHS: usize = 50;

/// Adam with optional decoupled L2. Frozen parameters are never touched.
pub struct Adam {
    params: Vec<Parameter>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(params: Vec<Parameter>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            lr,
            weight_decay,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Parameters without a gradient are skipped.
    pub fn step(&mut self) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (lr, wd) = (self.lr, self.weight_decay);
            p.tensor.with_data_and_grad(|data, grad| {
                for j in 0..data.len() {
                    m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad[j];
                    v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * data[j]);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }
}

/// Per-epoch training log, rendered as `epoch,loss,lr` rows.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, loss: f64, lr: f64) {
        self.rows.push((epoch, loss, lr));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("epoch,loss,lr\n");
        for (e, loss, lr) in &self.rows {
            out.push_str(&format!("{e},{loss},{lr}\n"));
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.1)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    X,
}

impl Modality {
    pub fn input(self, sample: &SceneSample) -> Tensor {
        match self {
            Modality::Rgb => sample.rgb_input(),
            Modality::X => sample.x_input(),
        }
    }
}

/// Concatenates batch-1 tensors along the batch axis. The result is plain
/// data; gradients never flow into network inputs.
pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Empty("stack_batch".into()));
    }
    let first = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        let s = p.shape();
        if s != first {
            return Err(Error::shape(
                "stack_batch",
                format!("mixed shapes {first:?} and {s:?}"),
            ));
        }
        data.extend(p.data());
    }
    let mut shape = first;
    shape[0] = parts.len();
    Ok(Tensor::new(shape, data))
}

fn per_level_anchors(image_size: usize) -> Result<Vec<Vec<Anchor>>> {
    (0..5).map(|l| anchors_for_level(image_size, l)).collect()
}

fn check_finite(loss: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "{what} loss at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(())
}

/// End-to-end pretraining of one single-modality branch.
pub fn train_detector(
    detector: &Detector,
    modality: Modality,
    samples: &[&SceneSample],
    image_size: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::Empty("train_detector split".into()));
    }
    let anchors = per_level_anchors(image_size)?;
    let loss_cfg = LossConfig::default();
    let inputs: Vec<Tensor> = samples.iter().map(|s| modality.input(s)).collect();
    let mut opt = Adam::new(detector.params(), lr, 0.0);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(batch_size.max(1)).enumerate() {
            let batch = stack_batch(&chunk.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
            let gts: Vec<Vec<GroundTruthBox>> =
                chunk.iter().map(|&i| samples[i].gts.clone()).collect();
            let outputs = detector.forward(&batch)?;
            let loss = detection_loss(&outputs, &anchors, &gts, NUM_CLASSES, &loss_cfg)?;
            let value = loss.item();
            check_finite(value, "detector", epoch, bi)?;
            opt.zero_grad();
            loss.backward()?;
            opt.step();
            epoch_loss += value;
            batches += 1;
        }
        log.push(epoch, epoch_loss / batches as f64, opt.lr);
    }
    Ok(log)
}

/// Trains only the classifier's linear layer on pooled deep RGB features,
/// which are computed once and cached. Full-batch cross entropy.
pub fn train_classifier(
    system: &TrainedSystem,
    samples: &[&SceneSample],
    epochs: usize,
    lr: f64,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::Empty("train_classifier split".into()));
    }
    let taxonomy = system.scene_taxonomy();
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let idx = taxonomy
            .iter()
            .position(|t| *t == s.scene)
            .ok_or_else(|| Error::UnknownScene(s.scene.clone()))?;
        labels.push(idx);
    }
    let descriptors = no_grad(|| -> Result<Tensor> {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let stages = system.rgb.backbone.forward(&s.rgb_input())?;
            rows.push(SceneClassifier::descriptor(&stages[3])?);
        }
        stack_batch(&rows)
    })?;
    let mut opt = Adam::new(system.classifier.params(), lr, 0.0);
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        let logits = system.classifier.logits(&descriptors)?;
        let loss = softmax_cross_entropy(&logits, &labels)?;
        let value = loss.item();
        check_finite(value, "classifier", epoch, 0)?;
        opt.zero_grad();
        loss.backward()?;
        opt.step();
        log.push(epoch, value, opt.lr);
    }
    Ok(log)
}

/// Trains one fusion bank on cached, detached branch pyramids. Only bank
/// parameters receive updates, plus the head when `train_head` is set.
#[allow(clippy::too_many_arguments)]
pub fn train_fusion(
    rgb: &Detector,
    x: &Detector,
    bank: &FusionBank,
    head: &DetectorHead,
    train_head: bool,
    samples: &[&SceneSample],
    image_size: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::Empty("train_fusion split".into()));
    }
    let anchors = per_level_anchors(image_size)?;
    let loss_cfg = LossConfig::default();
    let pyramids: Vec<(Pyramid, Pyramid)> = samples
        .iter()
        .map(|s| {
            no_grad(|| {
                let pr = rgb.pyramid(&s.rgb_input())?;
                let px = x.pyramid(&s.x_input())?;
                Ok((
                    Pyramid {
                        levels: pr.levels.iter().map(Tensor::detach).collect(),
                    },
                    Pyramid {
                        levels: px.levels.iter().map(Tensor::detach).collect(),
                    },
                ))
            })
        })
        .collect::<Result<_>>()?;
    let mut params = bank.params();
    if train_head {
        params.extend(head.params());
    }
    let mut opt = Adam::new(params, lr, FUSION_WEIGHT_DECAY);
    let decay = FUSION_LR_DECAY.powf(FUSION_REFERENCE_EPOCHS as f64 / epochs.max(1) as f64);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(batch_size.max(1)).enumerate() {
            let mut rgb_levels = Vec::with_capacity(5);
            let mut x_levels = Vec::with_capacity(5);
            for level in 0..5 {
                rgb_levels.push(stack_batch(
                    &chunk.iter().map(|&i| pyramids[i].0.levels[level].clone()).collect::<Vec<_>>(),
                )?);
                x_levels.push(stack_batch(
                    &chunk.iter().map(|&i| pyramids[i].1.levels[level].clone()).collect::<Vec<_>>(),
                )?);
            }
            let fused = bank.fuse_pyramids(
                &Pyramid { levels: rgb_levels },
                &Pyramid { levels: x_levels },
            )?;
            let outputs = head.forward(&fused)?;
            let gts: Vec<Vec<GroundTruthBox>> =
                chunk.iter().map(|&i| samples[i].gts.clone()).collect();
            let loss = detection_loss(&outputs, &anchors, &gts, NUM_CLASSES, &loss_cfg)?;
            let value = loss.item();
            check_finite(value, "fusion", epoch, bi)?;
            opt.zero_grad();
            loss.backward()?;
            opt.step();
            epoch_loss += value;
            batches += 1;
        }
        log.push(epoch, epoch_loss / batches as f64, opt.lr);
        opt.lr *= decay;
    }
    Ok(log)
}

/// Train-split samples honoring the configured exclusion, optionally
/// narrowed to one scene and subsampled to the configured fraction.
pub fn training_samples<'a>(
    dataset: &'a Dataset,
    config: &RunConfig,
    scene: Option<&str>,
) -> Result<Vec<&'a SceneSample>> {
    let mut out = Vec::new();
    for sc in &config.taxonomy {
        if Some(sc) == config.excluded_scene.as_ref() {
            continue;
        }
        if let Some(want) = scene {
            if sc != want {
                continue;
            }
        }
        let scene_samples = dataset.split_samples(Some(sc), Split::Train)?;
        let keep = crate::data::fraction_subset(scene_samples.len(), config.fraction, config.seed)?;
        out.extend(keep.into_iter().map(|i| scene_samples[i]));
    }
    if out.is_empty() {
        return Err(Error::Empty("training split after exclusion"));
    }
    Ok(out)
}

/// Bit-exact copy of parameter values by name. Names present in `dst`
/// must all exist in `src` with matching shapes.
pub fn copy_params(src: &[Parameter], dst: &[Parameter]) -> Result<()> {
    for d in dst {
        let s = src
            .iter()
            .find(|p| p.name == d.name)
            .ok_or_else(|| Error::invalid("copy_params", format!("missing source `{}`", d.name)))?;
        if s.tensor.shape() != d.tensor.shape() {
            return Err(Error::shape(
                "copy_params",
                format!("{}: {:?} vs {:?}", d.name, s.tensor.shape(), d.tensor.shape()),
            ));
        }
        let data = s.tensor.data();
        d.tensor.with_data_mut(|out| out.copy_from_slice(&data));
    }
    Ok(())
}

/// Retrains only the fusion banks of `config` on top of an already trained
/// base system, sharing its branch and classifier weights bit-exactly.
/// Used by the fraction ablation, which varies fusion data only.
pub fn retrain_banks(
    base: &TrainedSystem,
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<TrainedSystem> {
    let system = TrainedSystem::init(config.clone())?;
    let mut src = base.rgb.params();
    src.extend(base.x.params());
    let mut dst = system.rgb.params();
    dst.extend(system.x.params());
    copy_params(&src, &dst)?;
    if base.scene_taxonomy() == system.scene_taxonomy() {
        copy_params(&base.classifier.params(), &system.classifier.params())?;
    }
    let train_head = config.freeze_mode == FreezeMode::Trained;
    let full_cfg = RunConfig {
        fraction: 100.0,
        ..config.clone()
    };
    let reference = training_samples(dataset, &full_cfg, None)?.len();
    let bank_epochs = |n: usize| equalized_epochs(config.epochs, reference, n, config.batch_size);
    for (i, scene) in system.scene_taxonomy().to_vec().iter().enumerate() {
        let scene_train = training_samples(dataset, config, Some(scene))?;
        train_fusion(
            &system.rgb,
            &system.x,
            &system.banks[scene],
            system.fused_head(),
            train_head,
            &scene_train,
            config.image_size,
            bank_epochs(scene_train.len()),
            config.lr,
            config.batch_size,
            config.seed + 200 + i as u64,
        )?;
    }
    let fusion_all = training_samples(dataset, config, None)?;
    train_fusion(
        &system.rgb,
        &system.x,
        &system.agnostic,
        system.fused_head(),
        train_head,
        &fusion_all,
        config.image_size,
        bank_epochs(fusion_all.len()),
        config.lr,
        config.batch_size,
        config.seed + 199,
    )?;
    Ok(system)
}

/// Epoch count giving a split of `n` samples the same optimizer-step
/// budget as `epochs` epochs over a reference split of `reference`
/// samples. Keeps scene banks, fraction runs and exclusion runs on an
/// equal optimization footing with their full-split counterparts.
pub fn equalized_epochs(epochs: usize, reference: usize, n: usize, batch_size: usize) -> usize {
    let steps_per_epoch = |m: usize| m.div_ceil(batch_size.max(1)).max(1);
    let target = epochs * steps_per_epoch(reference);
    target.div_ceil(steps_per_epoch(n)).max(1)
}

#[derive(Debug, Default)]
pub struct PipelineLogs {
    pub rgb: TrainLog,
    pub x: TrainLog,
    pub classifier: TrainLog,
    pub banks: BTreeMap<String, TrainLog>,
    pub agnostic: TrainLog,
}

/// Detector pretraining defaults. Branches train end-to-end, so they use
/// fewer epochs and a hotter learning rate than the small fusion banks.
pub const DETECTOR_EPOCHS: usize = 12;
pub const DETECTOR_LR: f64 = 3e-3;

/// The classifier trains full batch, so its 50 Adam steps use a hotter
/// learning rate than the mini-batch loops.
pub const CLASSIFIER_LR: f64 = 5e-2;

/// Full-batch epochs for the linear scene classifier; it converges slowly
/// but each step costs almost nothing against cached descriptors.
pub const CLASSIFIER_EPOCHS: usize = 500;

/// Full pipeline: pretrain both branches, train the classifier, then every
/// scene bank and the agnostic bank. Fraction and exclusion come from the
/// config.
pub fn train_full_system(
    config: &RunConfig,
    dataset: &Dataset,
    detector_epochs: usize,
    detector_lr: f64,
) -> Result<(TrainedSystem, PipelineLogs)> {
    let system = TrainedSystem::init(config.clone())?;
    let mut logs = PipelineLogs::default();
    // the fraction ablation subsamples fusion training only; branches and
    // the classifier always see the whole (exclusion-filtered) split
    let full_cfg = RunConfig {
        fraction: 100.0,
        ..config.clone()
    };
    let all_train = training_samples(dataset, &full_cfg, None)?;
    let fusion_all = training_samples(dataset, config, None)?;
    // budgets are counted in optimizer steps: an exclusion-shrunk split
    // trains more epochs so the branches converge equally far
    let unexcluded = dataset.split_samples(None, Split::Train)?.len();
    let det_epochs = equalized_epochs(
        detector_epochs,
        unexcluded,
        all_train.len(),
        config.batch_size,
    );
    logs.rgb = train_detector(
        &system.rgb,
        Modality::Rgb,
        &all_train,
        config.image_size,
        det_epochs,
        detector_lr,
        config.batch_size,
        config.seed + 100,
    )?;
    logs.x = train_detector(
        &system.x,
        Modality::X,
        &all_train,
        config.image_size,
        det_epochs,
        detector_lr,
        config.batch_size,
        config.seed + 101,
    )?;
    logs.classifier = train_classifier(&system, &all_train, CLASSIFIER_EPOCHS, CLASSIFIER_LR)?;
    let train_head = config.freeze_mode == FreezeMode::Trained;
    // every bank gets the full-split step budget regardless of how many
    // samples its scene or fraction leaves it
    let bank_epochs =
        |n: usize| equalized_epochs(config.epochs, all_train.len(), n, config.batch_size);
    for (i, scene) in system.scene_taxonomy().to_vec().iter().enumerate() {
        let scene_train = training_samples(dataset, config, Some(scene))?;
        let bank = &system.banks[scene];
        let log = train_fusion(
            &system.rgb,
            &system.x,
            bank,
            system.fused_head(),
            train_head,
            &scene_train,
            config.image_size,
            bank_epochs(scene_train.len()),
            config.lr,
            config.batch_size,
            config.seed + 200 + i as u64,
        )?;
        logs.banks.insert(scene.clone(), log);
    }
    logs.agnostic = train_fusion(
        &system.rgb,
        &system.x,
        &system.agnostic,
        system.fused_head(),
        train_head,
        &fusion_all,
        config.image_size,
        bank_epochs(fusion_all.len()),
        config.lr,
        config.batch_size,
        config.seed + 199,
    )?;
    Ok((system, logs))
}

/// Table-10 style run: drop one scene from training entirely while keeping
/// it available for evaluation.
pub fn train_excluding(
    config: &RunConfig,
    dataset: &Dataset,
    excluded: &str,
    detector_epochs: usize,
    detector_lr: f64,
) -> Result<(TrainedSystem, PipelineLogs)> {
    if !config.taxonomy.iter().any(|s| s == excluded) {
        return Err(Error::UnknownScene(excluded.into()));
    }
    if config.taxonomy.len() < 2 {
        return Err(Error::Config("cannot exclude the only scene".into()));
    }
    let cfg = RunConfig {
        excluded_scene: Some(excluded.to_string()),
        ..config.clone()
    };
    train_full_system(&cfg, dataset, detector_epochs, detector_lr)
}
