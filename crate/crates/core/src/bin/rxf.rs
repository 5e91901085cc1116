use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use rxf_core::checkpoint::Checkpoint;
use rxf_core::config::{FreezeMode, FusionKind, RunConfig};
use rxf_core::data::{generate_dataset, load_dataset, Dataset, Split, SplitSpec, NUM_CLASSES};
use rxf_core::detector::{param_count, Detector};
use rxf_core::error::{Error, Result};
use rxf_core::fusion::{
    cam_heatmap, cam_heatmap_text, cbam_module_param_count, export_channel_attention, FusionBank,
};
use rxf_core::report::evaluate_system;
use rxf_core::scene::TrainedSystem;
use rxf_core::tensor::no_grad;
use rxf_core::train::{
    train_classifier, train_detector, train_fusion, training_samples, Modality, CLASSIFIER_EPOCHS,
    CLASSIFIER_LR, DETECTOR_EPOCHS, DETECTOR_LR,
};

#[derive(Parser)]
#[command(name = "rxf", version, about = "scene-adaptive multimodal fusion detection")]
struct Cli {
    /// Master seed overriding the configuration default.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress the timestamp prefix on log lines.
    #[arg(long, global = true)]
    no_timestamps: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multimodal benchmark.
    GenData(GenDataArgs),
    /// Pretrain one single-modality detector branch.
    TrainDetector(TrainDetectorArgs),
    /// Train one fusion bank on top of frozen branches.
    TrainFusion(TrainFusionArgs),
    /// Train the scene classifier on frozen RGB backbone features.
    TrainClassifier(TrainClassifierArgs),
    /// Evaluate every inference mode on the test split.
    Eval(EvalArgs),
    /// Run scene-adaptive inference on one sample pair.
    Infer(InferArgs),
    /// Export channel-attention profiles and CAM heatmaps.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Per-scene train,val,test counts.
    #[arg(long, default_value = "200,50,50")]
    per_scene_counts: String,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long, default_value = "day,night,fog")]
    taxonomy: String,
}

#[derive(Args)]
struct TrainDetectorArgs {
    #[arg(long)]
    modality: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DETECTOR_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = DETECTOR_LR)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct TrainFusionArgs {
    #[arg(long)]
    rgb_ckpt: PathBuf,
    #[arg(long)]
    x_ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Scene name, or `agnostic` for the scene-agnostic bank.
    #[arg(long)]
    scene: String,
    /// Percent of the training split to use.
    #[arg(long, default_value_t = 100.0)]
    fraction: f64,
    /// Head mode: tr (trained), rh (frozen RGB), th (frozen X).
    #[arg(long, default_value = "th")]
    head: String,
    #[arg(long, default_value = "cbam")]
    module: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Scene excluded from agnostic training.
    #[arg(long)]
    exclude_scene: Option<String>,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    rgb_ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = CLASSIFIER_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = CLASSIFIER_LR)]
    lr: f64,
    /// Scene excluded from classifier training.
    #[arg(long)]
    exclude_scene: Option<String>,
}

#[derive(Args)]
struct SystemArgs {
    #[arg(long)]
    rgb_ckpt: PathBuf,
    #[arg(long)]
    x_ckpt: PathBuf,
    #[arg(long)]
    classifier_ckpt: PathBuf,
    /// Scene bank checkpoints; the scene name is read from each file.
    #[arg(long = "bank")]
    banks: Vec<PathBuf>,
    #[arg(long)]
    agnostic_ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long)]
    data: PathBuf,
    /// Metrics JSON output path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long)]
    data: PathBuf,
    /// Sample id, e.g. `night-test-0003`.
    #[arg(long)]
    sample: String,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long)]
    data: PathBuf,
    /// Scene bank to visualize, or `agnostic`.
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    /// Number of test samples averaged into the attention profiles.
    #[arg(long, default_value_t = 8)]
    samples: usize,
}

struct Logger {
    timestamps: bool,
}

impl Logger {
    fn line(&self, msg: &str) {
        if self.timestamps {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            println!("[{secs}] {msg}");
        } else {
            println!("{msg}");
        }
    }

    fn block(&self, text: &str) {
        for l in text.lines() {
            self.line(l);
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = check_thread_cap() {
        eprintln!("E{:03} {e}", e.code());
        return ExitCode::FAILURE;
    }
    let log = Logger {
        timestamps: !cli.no_timestamps,
    };
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args, cli.seed, &log),
        Cmd::TrainDetector(args) => cmd_train_detector(args, cli.seed, &log),
        Cmd::TrainFusion(args) => cmd_train_fusion(args, cli.seed, &log),
        Cmd::TrainClassifier(args) => cmd_train_classifier(args, cli.seed, &log),
        Cmd::Eval(args) => cmd_eval(args, &log),
        Cmd::Infer(args) => cmd_infer(args, &log),
        Cmd::Viz(args) => cmd_viz(args, &log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("E{:03} {e}", e.code());
            ExitCode::FAILURE
        }
    }
}

/// Evaluation currently runs on one thread; any positive cap is honored.
fn check_thread_cap() -> Result<()> {
    if let Ok(v) = std::env::var("RXF_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("RXF_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::Config("RXF_THREADS must be >= 1".into()));
        }
    }
    Ok(())
}

fn parse_counts(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "per-scene counts must be train,val,test, got `{s}`"
        )));
    }
    let mut nums = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        nums[i] = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad count `{p}`")))?;
    }
    Ok((nums[0], nums[1], nums[2]))
}

fn cmd_gen_data(args: GenDataArgs, seed: Option<u64>, log: &Logger) -> Result<()> {
    let (train, val, test) = parse_counts(&args.per_scene_counts)?;
    let taxonomy: Vec<String> = args.taxonomy.split(',').map(|s| s.trim().to_string()).collect();
    let spec = SplitSpec {
        image_size: args.image_size,
        taxonomy,
        train_per_scene: train,
        val_per_scene: val,
        test_per_scene: test,
        seed: seed.unwrap_or(42),
    };
    let ds = generate_dataset(&spec, &args.out)?;
    log.line(&format!(
        "wrote {} samples across {} scenes to {}",
        ds.samples.len(),
        ds.taxonomy.len(),
        args.out.display()
    ));
    Ok(())
}

fn base_config(dataset: &Dataset, seed: Option<u64>) -> RunConfig {
    RunConfig {
        image_size: dataset.image_size,
        taxonomy: dataset.taxonomy.clone(),
        seed: seed.unwrap_or(dataset.seed),
        ..RunConfig::default()
    }
}

fn save_detector(det: &Detector, config: &RunConfig, modality: &str, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "detector",
        "modality": modality,
        "config": config,
    }));
    ck.insert_params("", &det.params());
    ck.save(path)
}

fn checkpoint_config(ck: &Checkpoint, path: &Path) -> Result<RunConfig> {
    serde_json::from_value(ck.metadata["config"].clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: format!("bad config metadata: {e}"),
    })
}

fn metadata_str(ck: &Checkpoint, key: &str, path: &Path) -> Result<String> {
    ck.metadata[key]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("missing `{key}` metadata"),
        })
}

fn load_detector(path: &Path, expect_modality: &str) -> Result<(Detector, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let kind = metadata_str(&ck, "kind", path)?;
    let modality = metadata_str(&ck, "modality", path)?;
    if kind != "detector" || modality != expect_modality {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("expected a {expect_modality} detector checkpoint, found {kind}/{modality}"),
        });
    }
    let config = checkpoint_config(&ck, path)?;
    let cin = if expect_modality == "rgb" { 3 } else { 1 };
    let det = Detector::new(expect_modality, cin, config.cfeat, NUM_CLASSES, config.seed);
    ck.load_params("", &det.params(), path)?;
    Ok((det, config))
}

fn cmd_train_detector(args: TrainDetectorArgs, seed: Option<u64>, log: &Logger) -> Result<()> {
    let modality = match args.modality.as_str() {
        "rgb" => Modality::Rgb,
        "x" => Modality::X,
        other => {
            return Err(Error::Config(format!(
                "unknown modality `{other}` (expected rgb or x)"
            )))
        }
    };
    let dataset = load_dataset(&args.data)?;
    let config = base_config(&dataset, seed);
    let samples = dataset.split_samples(None, Split::Train)?;
    let (name, cin, seed_offset) = match modality {
        Modality::Rgb => ("rgb", 3, 100),
        Modality::X => ("x", 1, 101),
    };
    let det = Detector::new(
        name,
        cin,
        config.cfeat,
        NUM_CLASSES,
        config.seed + u64::from(modality == Modality::X),
    );
    let train_log = train_detector(
        &det,
        modality,
        &samples,
        config.image_size,
        args.epochs,
        args.lr,
        args.batch_size,
        config.seed + seed_offset,
    )?;
    log.block(&train_log.to_text());
    save_detector(&det, &config, name, &args.out)?;
    log.line(&format!("wrote detector checkpoint {}", args.out.display()));
    Ok(())
}

fn cmd_train_fusion(args: TrainFusionArgs, seed: Option<u64>, log: &Logger) -> Result<()> {
    let freeze_mode = FreezeMode::parse(&args.head)?;
    let fusion_kind = FusionKind::parse(&args.module)?;
    let dataset = load_dataset(&args.data)?;
    let (rgb, rgb_cfg) = load_detector(&args.rgb_ckpt, "rgb")?;
    let (x, _) = load_detector(&args.x_ckpt, "x")?;
    let config = RunConfig {
        freeze_mode,
        fusion_kind,
        fraction: args.fraction,
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        excluded_scene: args.exclude_scene.clone(),
        seed: seed.unwrap_or(rgb_cfg.seed),
        ..base_config(&dataset, seed)
    };
    config.validate()?;
    let (scene_filter, bank_seed) = if args.scene == "agnostic" {
        (None, config.seed + 9)
    } else {
        let idx = config.scene_index(&args.scene)?;
        (Some(args.scene.as_str()), config.seed + 10 + idx as u64)
    };
    let samples = training_samples(&dataset, &config, scene_filter)?;
    log.line(&format!("training on {} samples", samples.len()));
    let bank = FusionBank::new(
        if args.scene == "agnostic" { "agnostic" } else { &args.scene },
        config.cfeat,
        fusion_kind,
        bank_seed,
    )?;
    let head = match freeze_mode {
        FreezeMode::FrozenRgb => &rgb.head,
        FreezeMode::FrozenX | FreezeMode::Trained => &x.head,
    };
    let train_head = freeze_mode == FreezeMode::Trained;
    let trainable = param_count(&bank.params())
        + if train_head { param_count(&head.params()) } else { 0 };
    let total = param_count(&rgb.params()) + param_count(&x.params()) + param_count(&bank.params());
    log.line(&format!(
        "trainable parameters: {trainable} of {total} ({:.2}%)",
        100.0 * trainable as f64 / total as f64
    ));
    if fusion_kind == FusionKind::Cbam {
        let analytic = 5 * cbam_module_param_count(config.cfeat, rxf_core::fusion::default_ratio(2 * config.cfeat));
        log.line(&format!("analytic bank parameter count: {analytic}"));
    }
    let train_log = train_fusion(
        &rgb,
        &x,
        &bank,
        head,
        train_head,
        &samples,
        config.image_size,
        args.epochs,
        args.lr,
        args.batch_size,
        config.seed + 200,
    )?;
    log.block(&train_log.to_text());
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "fusion-bank",
        "scene": bank.scene,
        "config": config,
    }));
    ck.insert_params("", &bank.params());
    if train_head {
        ck.insert_params("", &head.params());
    }
    ck.save(&args.out)?;
    log.line(&format!("wrote fusion bank checkpoint {}", args.out.display()));
    Ok(())
}

fn cmd_train_classifier(args: TrainClassifierArgs, seed: Option<u64>, log: &Logger) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let (rgb, rgb_cfg) = load_detector(&args.rgb_ckpt, "rgb")?;
    let config = RunConfig {
        excluded_scene: args.exclude_scene.clone(),
        seed: seed.unwrap_or(rgb_cfg.seed),
        ..base_config(&dataset, seed)
    };
    config.validate()?;
    let mut system = TrainedSystem::init(config.clone())?;
    system.rgb = rgb;
    let samples = training_samples(&dataset, &config, None)?;
    let train_log = train_classifier(&system, &samples, args.epochs, args.lr)?;
    log.block(&train_log.to_text());
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "classifier",
        "taxonomy": system.scene_taxonomy(),
        "config": config,
    }));
    ck.insert_params("", &system.classifier.params());
    ck.save(&args.out)?;
    log.line(&format!("wrote classifier checkpoint {}", args.out.display()));
    Ok(())
}

fn load_system(args: &SystemArgs) -> Result<TrainedSystem> {
    let (rgb, _) = load_detector(&args.rgb_ckpt, "rgb")?;
    let (x, _) = load_detector(&args.x_ckpt, "x")?;
    let clf_ck = Checkpoint::load(&args.classifier_ckpt)?;
    if metadata_str(&clf_ck, "kind", &args.classifier_ckpt)? != "classifier" {
        return Err(Error::Checkpoint {
            path: args.classifier_ckpt.clone(),
            detail: "expected a classifier checkpoint".into(),
        });
    }
    let config = checkpoint_config(&clf_ck, &args.classifier_ckpt)?;
    let mut system = TrainedSystem::init(config.clone())?;
    system.rgb = rgb;
    system.x = x;
    ck_load_into(&clf_ck, &args.classifier_ckpt, &system.classifier.params())?;
    let mut banks: BTreeMap<String, FusionBank> = BTreeMap::new();
    for path in &args.banks {
        let ck = Checkpoint::load(path)?;
        if metadata_str(&ck, "kind", path)? != "fusion-bank" {
            return Err(Error::Checkpoint {
                path: path.clone(),
                detail: "expected a fusion bank checkpoint".into(),
            });
        }
        let scene = metadata_str(&ck, "scene", path)?;
        let bank_cfg = checkpoint_config(&ck, path)?;
        let bank = FusionBank::new(&scene, bank_cfg.cfeat, bank_cfg.fusion_kind, 0)?;
        ck_load_into(&ck, path, &bank.params())?;
        if bank_cfg.freeze_mode == FreezeMode::Trained {
            let head = match bank_cfg.freeze_mode {
                FreezeMode::FrozenRgb => &system.rgb.head,
                _ => &system.x.head,
            };
            ck_load_into(&ck, path, &head.params())?;
        }
        banks.insert(scene, bank);
    }
    // every scene the classifier can predict needs a bank
    for scene in system.scene_taxonomy() {
        if !banks.contains_key(scene) {
            return Err(Error::MissingBank(scene.clone()));
        }
    }
    system.banks = banks;
    if let Some(path) = &args.agnostic_ckpt {
        let ck = Checkpoint::load(path)?;
        let bank_cfg = checkpoint_config(&ck, path)?;
        let bank = FusionBank::new("agnostic", bank_cfg.cfeat, bank_cfg.fusion_kind, 0)?;
        ck_load_into(&ck, path, &bank.params())?;
        system.agnostic = bank;
    }
    Ok(system)
}

fn ck_load_into(ck: &Checkpoint, path: &Path, params: &[rxf_core::tensor::Parameter]) -> Result<()> {
    ck.load_params("", params, path)
}

fn cmd_eval(args: EvalArgs, log: &Logger) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let system = load_system(&args.system)?;
    let report = evaluate_system(&system, &dataset)?;
    log.block(&report.to_text_table());
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Schema(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
        log.line(&format!("wrote metrics JSON {}", path.display()));
    }
    Ok(())
}

fn cmd_infer(args: InferArgs, log: &Logger) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let system = load_system(&args.system)?;
    let sample = dataset.sample(&args.sample)?;
    let (detections, scene) =
        system.detect_scene_adaptive(&sample.rgb_input(), &sample.x_input())?;
    log.line(&format!("sample {} routed to scene bank `{scene}`", sample.id));
    log.line(&format!("{} detections", detections.len()));
    for d in &detections {
        log.line(&format!(
            "class={} score={:.4} bbox=({:.2},{:.2},{:.2},{:.2})",
            d.class_id, d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max
        ));
    }
    Ok(())
}

fn cmd_viz(args: VizArgs, log: &Logger) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let system = load_system(&args.system)?;
    let bank = if args.scene == "agnostic" {
        &system.agnostic
    } else {
        system
            .banks
            .get(&args.scene)
            .ok_or_else(|| Error::MissingBank(args.scene.clone()))?
    };
    let scene_filter = if args.scene == "agnostic" { None } else { Some(args.scene.as_str()) };
    let samples = dataset.split_samples(scene_filter, Split::Test)?;
    let take = samples.len().min(args.samples.max(1));
    if take == 0 {
        return Err(Error::Empty("viz test split"));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let pyramids: Vec<_> = samples[..take]
        .iter()
        .map(|s| {
            no_grad(|| {
                Ok((
                    system.rgb.pyramid(&s.rgb_input())?,
                    system.x.pyramid(&s.x_input())?,
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for level in 0..5 {
        let features: Vec<_> = pyramids
            .iter()
            .map(|(pr, px)| (pr.levels[level].clone(), px.levels[level].clone()))
            .collect();
        let profile = export_channel_attention(bank, level, &features, &bank.scene)?;
        let path = args.out.join(format!("attention_level{level}.txt"));
        std::fs::write(&path, profile).map_err(|e| Error::io(&path, e))?;

        let fused = no_grad(|| {
            bank.modules[level].fuse(&pyramids[0].0.levels[level], &pyramids[0].1.levels[level])
        })?;
        let heat = cam_heatmap(&fused)?;
        let path = args.out.join(format!("cam_level{level}.txt"));
        std::fs::write(&path, cam_heatmap_text(&heat, level, &bank.scene))
            .map_err(|e| Error::io(&path, e))?;
    }
    log.line(&format!("wrote visualization files to {}", args.out.display()));
    Ok(())
}
