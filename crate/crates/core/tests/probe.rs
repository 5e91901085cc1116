use rxf_core::config::RunConfig;
use rxf_core::data::{generate_dataset, Split, SplitSpec, NUM_CLASSES};
use rxf_core::eval::map50;
use rxf_core::report::{collect_images, EvalMode};
use rxf_core::scene::TrainedSystem;
use rxf_core::train::{equalized_epochs, train_detector, Modality, DETECTOR_EPOCHS, DETECTOR_LR};

#[test]
#[ignore]
fn branch_robustness_probe() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_dataset(&SplitSpec::default(), dir.path()).unwrap();
    let config = RunConfig::default();
    let full: Vec<_> = dataset.split_samples(None, Split::Train).unwrap();
    let excl: Vec<_> = full.iter().copied().filter(|s| s.scene != "fog").collect();
    for (tag, train) in [("full", &full), ("excl-fog", &excl)] {
        let epochs = equalized_epochs(DETECTOR_EPOCHS, full.len(), train.len(), config.batch_size);
        for (modality, mode, seed) in [
            (Modality::Rgb, EvalMode::RgbOnly, config.seed + 100),
            (Modality::X, EvalMode::XOnly, config.seed + 101),
        ] {
            let system = TrainedSystem::init(config.clone()).unwrap();
            let branch = match modality {
                Modality::Rgb => &system.rgb,
                Modality::X => &system.x,
            };
            let t0 = std::time::Instant::now();
            train_detector(
                branch,
                modality,
                train,
                dataset.image_size,
                epochs,
                DETECTOR_LR,
                config.batch_size,
                seed,
            )
            .unwrap();
            let secs = t0.elapsed().as_secs();
            let mut line = format!("{tag} {:?} ({epochs} ep, {secs}s):", modality);
            for scene in &dataset.taxonomy {
                let samples = dataset.split_samples(Some(scene), Split::Test).unwrap();
                let images = collect_images(&system, &samples, mode).unwrap();
                let v = map50(&images, NUM_CLASSES).unwrap();
                line.push_str(&format!(" {scene} {v:.4}"));
            }
            println!("{line}");
        }
    }
}
