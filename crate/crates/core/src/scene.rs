//! Scene classifier and the scene-routed detection system.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{FreezeMode, RunConfig};
use crate::detector::boxes::Detection;
use crate::detector::{Detector, DetectorHead, BACKBONE_WIDTHS};
use crate::error::{Error, Result};
use crate::fusion::{detect_fused, FusionBank};
use crate::tensor::{global_pool, linear, no_grad, softmax_rows, Parameter, PoolKind, Tensor};

/// Width of the deepest backbone stage, the classifier's input descriptor.
pub const CDEEP: usize = BACKBONE_WIDTHS[3];

/// Global-average-pool of the deepest RGB stage followed by a linear layer
/// and softmax.
pub struct SceneClassifier {
    pub weight: Parameter,
    pub bias: Parameter,
    pub taxonomy: Vec<String>,
}

impl SceneClassifier {
    pub fn new(taxonomy: &[String], rng: &mut impl Rng) -> Result<Self> {
        if taxonomy.is_empty() {
            return Err(Error::Config("classifier taxonomy must not be empty".into()));
        }
        let s = taxonomy.len();
        let bound = 1.0 / (CDEEP as f64).sqrt();
        Ok(SceneClassifier {
            weight: Parameter::new(
                "classifier.weight",
                Tensor::rand_uniform(vec![s, CDEEP], -bound, bound, rng),
            ),
            bias: Parameter::new(
                "classifier.bias",
                Tensor::rand_uniform(vec![s], -bound, bound, rng),
            ),
            taxonomy: taxonomy.to_vec(),
        })
    }

    /// Pooled descriptor [B,Cdeep] of a deepest-stage feature map.
    pub fn descriptor(deep_stage: &Tensor) -> Result<Tensor> {
        global_pool(deep_stage, PoolKind::Avg)
    }

    /// Logits [B,S] from a pooled descriptor.
    pub fn logits(&self, descriptor: &Tensor) -> Result<Tensor> {
        let shape = descriptor.shape();
        if shape.len() != 2 || shape[1] != CDEEP {
            return Err(Error::shape(
                "classify_scene",
                format!("expected [B,{CDEEP}] descriptor, got {shape:?}"),
            ));
        }
        linear(descriptor, &self.weight.tensor, Some(&self.bias.tensor))
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Argmax with ties broken by the lowest index.
pub fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fully assembled system: two frozen single-modality branches, the scene
/// classifier, one fusion bank per scene plus the scene-agnostic bank.
pub struct TrainedSystem {
    pub config: RunConfig,
    pub rgb: Detector,
    pub x: Detector,
    pub classifier: SceneClassifier,
    pub banks: BTreeMap<String, FusionBank>,
    pub agnostic: FusionBank,
}

impl TrainedSystem {
    /// Freshly initialized (untrained) system for the given config. All
    /// weights derive from `config.seed`.
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let taxonomy: Vec<String> = config
            .taxonomy
            .iter()
            .filter(|s| Some(*s) != config.excluded_scene.as_ref())
            .cloned()
            .collect();
        if taxonomy.is_empty() {
            return Err(Error::Config("no scenes left after exclusion".into()));
        }
        let rgb = Detector::new("rgb", 3, config.cfeat, crate::data::NUM_CLASSES, config.seed);
        let x = Detector::new("x", 1, config.cfeat, crate::data::NUM_CLASSES, config.seed + 1);
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed + 2);
        let classifier = SceneClassifier::new(&taxonomy, &mut rng)?;
        let mut banks = BTreeMap::new();
        for (i, scene) in taxonomy.iter().enumerate() {
            banks.insert(
                scene.clone(),
                FusionBank::new(scene, config.cfeat, config.fusion_kind, config.seed + 10 + i as u64)?,
            );
        }
        let agnostic = FusionBank::new("agnostic", config.cfeat, config.fusion_kind, config.seed + 9)?;
        Ok(TrainedSystem {
            config,
            rgb,
            x,
            classifier,
            banks,
            agnostic,
        })
    }

    /// The head driving fused detections, chosen by freeze mode: the X
    /// branch head by default (frozen or trained in place), the RGB branch
    /// head under frozen-RGB.
    pub fn fused_head(&self) -> &DetectorHead {
        match self.config.freeze_mode {
            FreezeMode::FrozenRgb => &self.rgb.head,
            FreezeMode::FrozenX | FreezeMode::Trained => &self.x.head,
        }
    }

    /// Scene taxonomy the classifier and banks were built over (exclusion
    /// already applied).
    pub fn scene_taxonomy(&self) -> &[String] {
        &self.classifier.taxonomy
    }

    /// Softmax scene probabilities for one RGB image.
    pub fn classify_scene(&self, rgb_image: &Tensor) -> Result<Vec<f64>> {
        no_grad(|| {
            let stages = self.rgb.backbone.forward(rgb_image)?;
            let desc = SceneClassifier::descriptor(&stages[3])?;
            let logits = self.classifier.logits(&desc)?;
            let rows = softmax_rows(&logits)?;
            Ok(rows.into_iter().next().unwrap())
        })
    }

    /// Bank selected by argmax probability, ties to the lowest scene index.
    pub fn route(&self, probabilities: &[f64]) -> Result<&FusionBank> {
        if probabilities.len() != self.classifier.taxonomy.len() {
            return Err(Error::shape(
                "route",
                format!(
                    "{} probabilities for {} scenes",
                    probabilities.len(),
                    self.classifier.taxonomy.len()
                ),
            ));
        }
        let idx = argmax_tie_low(probabilities);
        let scene = &self.classifier.taxonomy[idx];
        self.banks
            .get(scene)
            .ok_or_else(|| Error::MissingBank(scene.clone()))
    }

    /// classify -> route -> detect_fused; returns the scene label used.
    pub fn detect_scene_adaptive(
        &self,
        rgb_image: &Tensor,
        x_image: &Tensor,
    ) -> Result<(Vec<Detection>, String)> {
        let probs = self.classify_scene(rgb_image)?;
        let bank = self.route(&probs)?;
        let dets = detect_fused(&self.rgb, &self.x, bank, self.fused_head(), rgb_image, x_image)?;
        Ok((dets, bank.scene.clone()))
    }

    /// Fused detection through the scene-agnostic bank.
    pub fn detect_agnostic(&self, rgb_image: &Tensor, x_image: &Tensor) -> Result<Vec<Detection>> {
        detect_fused(
            &self.rgb,
            &self.x,
            &self.agnostic,
            self.fused_head(),
            rgb_image,
            x_image,
        )
    }

    /// All parameters of every component, names unique by construction.
    pub fn all_params(&self) -> Vec<Parameter> {
        let mut p = self.rgb.params();
        p.extend(self.x.params());
        p.extend(self.classifier.params());
        for bank in self.banks.values() {
            p.extend(bank.params());
        }
        p.extend(self.agnostic.params());
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let metadata = serde_json::json!({
            "kind": "trained-system",
            "config": self.config,
            "scene_taxonomy": self.classifier.taxonomy,
        });
        let mut ck = Checkpoint::new(metadata);
        ck.insert_params("", &self.all_params());
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: RunConfig = serde_json::from_value(ck.metadata["config"].clone())
            .map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("bad config metadata: {e}"),
            })?;
        let system = TrainedSystem::init(config)?;
        ck.load_params("", &system.all_params(), path)?;
        Ok(system)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::rand_uniform(vec![1, 3, 128, 128], 0.0, 1.0, &mut rng)
    }

    fn x_image(seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::rand_uniform(vec![1, 1, 128, 128], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let sys = TrainedSystem::init(RunConfig::default()).unwrap();
        for p in sys.classifier.params() {
            p.tensor.with_data_mut(|d| d.fill(0.0));
        }
        let probs = sys.classify_scene(&image(1)).unwrap();
        assert_eq!(probs.len(), 3);
        for p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_positive() {
        let sys = TrainedSystem::init(RunConfig::default()).unwrap();
        for seed in 0..5 {
            let probs = sys.classify_scene(&image(seed)).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn argmax_shift_invariant() {
        let sys = TrainedSystem::init(RunConfig::default()).unwrap();
        let img = image(2);
        let probs = sys.classify_scene(&img).unwrap();
        let base = argmax_tie_low(&probs);
        sys.classifier.bias.tensor.with_data_mut(|d| {
            for v in d.iter_mut() {
                *v += 7.5;
            }
        });
        let shifted = sys.classify_scene(&img).unwrap();
        assert_eq!(argmax_tie_low(&shifted), base);
    }

    #[test]
    fn route_argmax_and_tie_break() {
        let sys = TrainedSystem::init(RunConfig::default()).unwrap();
        assert_eq!(sys.route(&[0.1, 0.7, 0.2]).unwrap().scene, "night");
        assert_eq!(sys.route(&[0.4, 0.4, 0.2]).unwrap().scene, "day");
        // strictly monotone transform preserves selection
        let p = [0.25, 0.7, 0.05];
        let t: Vec<f64> = p.iter().map(|v| f64::powi(*v, 3) + 1.0).collect();
        assert_eq!(sys.route(&p).unwrap().scene, sys.route(&t).unwrap().scene);
        assert!(sys.route(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn route_missing_bank_is_an_error() {
        let mut sys = TrainedSystem::init(RunConfig::default()).unwrap();
        sys.banks.remove("night");
        assert!(matches!(
            sys.route(&[0.1, 0.8, 0.1]),
            Err(Error::MissingBank(_))
        ));
    }

    #[test]
    fn exclusion_drops_one_bank_and_one_class() {
        let cfg = RunConfig {
            excluded_scene: Some("fog".into()),
            ..RunConfig::default()
        };
        let sys = TrainedSystem::init(cfg).unwrap();
        assert_eq!(sys.scene_taxonomy(), &["day".to_string(), "night".to_string()]);
        assert_eq!(sys.banks.len(), 2);
        assert!(!sys.banks.contains_key("fog"));
        assert_eq!(sys.classifier.weight.tensor.shape()[0], 2);
        // a fog image still routes somewhere and detects without error
        let (dets, scene) = sys
            .detect_scene_adaptive(&image(3), &x_image(4))
            .unwrap();
        assert!(scene == "day" || scene == "night");
        let _ = dets;
    }

    #[test]
    fn single_scene_taxonomy_degenerates_to_fixed_bank() {
        let cfg = RunConfig {
            taxonomy: vec!["day".into()],
            ..RunConfig::default()
        };
        let sys = TrainedSystem::init(cfg).unwrap();
        let (rgb, x) = (image(5), x_image(6));
        let (adaptive, scene) = sys.detect_scene_adaptive(&rgb, &x).unwrap();
        assert_eq!(scene, "day");
        let direct = detect_fused(
            &sys.rgb,
            &sys.x,
            &sys.banks["day"],
            sys.fused_head(),
            &rgb,
            &x,
        )
        .unwrap();
        assert_eq!(adaptive, direct);
    }

    #[test]
    fn save_load_reproduces_detections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("system.rxf");
        let sys = TrainedSystem::init(RunConfig::default()).unwrap();
        sys.save(&path).unwrap();
        let loaded = TrainedSystem::load(&path).unwrap();
        let (rgb, x) = (image(7), x_image(8));
        assert_eq!(
            sys.detect_scene_adaptive(&rgb, &x).unwrap(),
            loaded.detect_scene_adaptive(&rgb, &x).unwrap()
        );
        assert_eq!(
            sys.detect_agnostic(&rgb, &x).unwrap(),
            loaded.detect_agnostic(&rgb, &x).unwrap()
        );
        // bit-exact weights
        for (a, b) in sys.all_params().iter().zip(loaded.all_params()) {
            assert_eq!(a.name, b.name);
            let (da, db) = (a.tensor.data(), b.tensor.data());
            assert!(da.iter().zip(&db).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn classifier_gradcheck() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let taxonomy = vec!["day".to_string(), "night".to_string(), "fog".to_string()];
        let clf = SceneClassifier::new(&taxonomy, &mut rng).unwrap();
        let desc = Tensor::rand_uniform(vec![4, CDEEP], -1.0, 1.0, &mut rng);
        let labels = vec![0usize, 1, 2, 1];
        let params = clf.params();
        let report = crate::tensor::grad_check(
            &params,
            || {
                let logits = clf.logits(&desc)?;
                crate::tensor::softmax_cross_entropy(&logits, &labels)
            },
            1e-5,
            5,
            128,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
