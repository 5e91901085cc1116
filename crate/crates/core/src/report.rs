//! Evaluation driver: runs a trained system over a dataset split in each
//! inference mode and assembles the metrics report.

use crate::data::{Dataset, SceneSample, Split, NUM_CLASSES};
use crate::detector::boxes::Detection;
use crate::detector::detect_single;
use crate::error::{Error, Result};
use crate::eval::{kitti_ap, map50, map5095, top1_accuracy, DifficultyBucket, ImageEval, MetricsReport};
use crate::scene::{argmax_tie_low, TrainedSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    RgbOnly,
    XOnly,
    Agnostic,
    Adaptive,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [
        EvalMode::RgbOnly,
        EvalMode::XOnly,
        EvalMode::Agnostic,
        EvalMode::Adaptive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EvalMode::RgbOnly => "rgb-only",
            EvalMode::XOnly => "x-only",
            EvalMode::Agnostic => "scene-agnostic",
            EvalMode::Adaptive => "scene-adaptive",
        }
    }
}

pub fn detect_with_mode(
    system: &TrainedSystem,
    mode: EvalMode,
    sample: &SceneSample,
) -> Result<Vec<Detection>> {
    match mode {
        EvalMode::RgbOnly => detect_single(&system.rgb, &sample.rgb_input()),
        EvalMode::XOnly => detect_single(&system.x, &sample.x_input()),
        EvalMode::Agnostic => system.detect_agnostic(&sample.rgb_input(), &sample.x_input()),
        EvalMode::Adaptive => system
            .detect_scene_adaptive(&sample.rgb_input(), &sample.x_input())
            .map(|(d, _)| d),
    }
}

pub fn collect_images(
    system: &TrainedSystem,
    samples: &[&SceneSample],
    mode: EvalMode,
) -> Result<Vec<ImageEval>> {
    samples
        .iter()
        .map(|s| {
            Ok(ImageEval {
                detections: detect_with_mode(system, mode, s)?,
                gts: s.gts.clone(),
            })
        })
        .collect()
}

/// Predicted and true scene indices over the system's taxonomy. Samples
/// from scenes outside the taxonomy (an excluded scene) are skipped.
pub fn classifier_predictions(
    system: &TrainedSystem,
    samples: &[&SceneSample],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let taxonomy = system.scene_taxonomy();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for s in samples {
        let Some(label) = taxonomy.iter().position(|t| *t == s.scene) else {
            continue;
        };
        let probs = system.classify_scene(&s.rgb_input())?;
        predicted.push(argmax_tie_low(&probs));
        truth.push(label);
    }
    Ok((predicted, truth))
}

/// Test-split metrics for every inference mode, per scene and pooled, plus
/// scene classification accuracy and the bucketed KITTI numbers for the
/// adaptive mode.
pub fn evaluate_system(system: &TrainedSystem, dataset: &Dataset) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    let scenes = dataset.taxonomy.clone();
    let all_samples = dataset.split_samples(None, Split::Test)?;
    if all_samples.is_empty() {
        return Err(Error::Empty("evaluation test split"));
    }
    for mode in EvalMode::ALL {
        for scene in &scenes {
            let samples = dataset.split_samples(Some(scene), Split::Test)?;
            let images = collect_images(system, &samples, mode)?;
            if let Some(v) = map50(&images, NUM_CLASSES) {
                report.push(&format!("map50/{}", mode.label()), scene, "all", v);
            }
        }
        let images = collect_images(system, &all_samples, mode)?;
        if let Some(v) = map50(&images, NUM_CLASSES) {
            report.push(&format!("map50/{}", mode.label()), "all", "all", v);
        }
        if mode == EvalMode::Adaptive {
            if let Some(v) = map5095(&images, NUM_CLASSES) {
                report.push("map50_95/scene-adaptive", "all", "all", v);
            }
            for bucket in DifficultyBucket::all(dataset.image_size) {
                if let Some(v) = kitti_ap(&images, &bucket) {
                    report.push(
                        &format!("kitti_ap_{}/scene-adaptive", bucket.name),
                        "all",
                        "all",
                        v,
                    );
                }
            }
        }
    }
    let (predicted, truth) = classifier_predictions(system, &all_samples)?;
    if !predicted.is_empty() {
        report.push("scene_top1", "all", "all", top1_accuracy(&predicted, &truth)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_dataset, SplitSpec};

    fn tiny_dataset() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SplitSpec {
            image_size: 128,
            taxonomy: vec!["day".into(), "night".into(), "fog".into()],
            train_per_scene: 2,
            val_per_scene: 1,
            test_per_scene: 2,
            seed: 5,
        };
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn report_covers_every_mode_and_scene() {
        let (_dir, ds) = tiny_dataset();
        let system = TrainedSystem::init(RunConfig::default()).unwrap();
        let report = evaluate_system(&system, &ds).unwrap();
        for mode in EvalMode::ALL {
            for scene in ["day", "night", "fog", "all"] {
                let v = report
                    .get(&format!("map50/{}", mode.label()), scene, "all")
                    .unwrap();
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(report.get("scene_top1", "all", "all").is_some());
        assert!(report.get("map50_95/scene-adaptive", "all", "all").is_some());
    }

    #[test]
    fn report_is_deterministic() {
        let (_dir, ds) = tiny_dataset();
        let system = TrainedSystem::init(RunConfig::default()).unwrap();
        let a = serde_json::to_string(&evaluate_system(&system, &ds).unwrap()).unwrap();
        let b = serde_json::to_string(&evaluate_system(&system, &ds).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_oracle_detections_score_one() {
        let (_dir, ds) = tiny_dataset();
        let samples = ds.split_samples(None, Split::Test).unwrap();
        let images: Vec<ImageEval> = samples
            .iter()
            .map(|s| ImageEval {
                detections: s
                    .gts
                    .iter()
                    .map(|g| Detection {
                        bbox: g.bbox,
                        class_id: g.class_id,
                        score: 0.9,
                    })
                    .collect(),
                gts: s.gts.clone(),
            })
            .collect();
        assert!((map50(&images, NUM_CLASSES).unwrap() - 1.0).abs() < 1e-12);
    }
}
