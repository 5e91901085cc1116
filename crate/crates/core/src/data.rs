//! Deterministic synthetic multimodal benchmark: scene-conditioned RGB/X
//! image pairs with box annotations, persisted as binary tensor containers
//! plus a COCO-style annotation document and split manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorEntry};
use crate::detector::boxes::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["rectangle", "ellipse"];
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One coregistered sample: RGB [3,H,W] and X [1,H,W] images in [0,1]
/// (quantized to f32 so in-memory and reloaded data are bit-identical),
/// plus ground-truth boxes.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: String,
    pub rgb: Tensor,
    pub x: Tensor,
    pub scene: String,
    pub gts: Vec<GroundTruthBox>,
    pub seed: u64,
}

impl SceneSample {
    /// RGB image as a batch-1 network input.
    pub fn rgb_input(&self) -> Tensor {
        let s = self.rgb.shape();
        Tensor::new(vec![1, s[0], s[1], s[2]], self.rgb.data())
    }

    /// X image as a batch-1 network input.
    pub fn x_input(&self) -> Tensor {
        let s = self.x.shape();
        Tensor::new(vec![1, s[0], s[1], s[2]], self.x.data())
    }
}

/// Per-scene split sizes plus the master seed everything derives from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub image_size: usize,
    pub taxonomy: Vec<String>,
    pub train_per_scene: usize,
    pub val_per_scene: usize,
    pub test_per_scene: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            image_size: 128,
            taxonomy: vec!["day".into(), "night".into(), "fog".into()],
            train_per_scene: 200,
            val_per_scene: 50,
            test_per_scene: 50,
            seed: 42,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable per-sample seed derived from the master seed and sample identity.
pub fn sample_seed(master: u64, scene_idx: usize, split: Split, index: usize) -> u64 {
    let tag = (scene_idx as u64) << 32 | (split as u64) << 24 | index as u64;
    splitmix64(master ^ splitmix64(tag))
}

struct Object {
    class_id: usize,
    bbox: BBox,
}

fn place_objects(rng: &mut ChaCha20Rng, size: usize) -> Vec<Object> {
    let count = rng.gen_range(1..=5);
    let mut objects: Vec<Object> = Vec::new();
    let s = size as f64;
    'outer: for _ in 0..count {
        for _ in 0..20 {
            let w = rng.gen_range(14.0..56.0) * s / 128.0;
            let h = rng.gen_range(14.0..56.0) * s / 128.0;
            let x0 = rng.gen_range(2.0..(s - 2.0 - w));
            let y0 = rng.gen_range(2.0..(s - 2.0 - h));
            // f32-representable corners survive the [x,y,w,h] annotation
            // round-trip bit-exactly
            let q = |v: f64| (v as f32) as f64;
            let bbox = BBox::new(q(x0), q(y0), q(x0 + w), q(y0 + h));
            if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.15) {
                objects.push(Object {
                    class_id: rng.gen_range(0..NUM_CLASSES),
                    bbox,
                });
                continue 'outer;
            }
        }
    }
    objects
}

/// Paint one object into the channel planes. Rectangles fill their box,
/// ellipses the inscribed ellipse.
fn paint(planes: &mut [Vec<f64>], colors: &[f64], obj: &Object, size: usize) {
    let (cx, cy) = obj.bbox.center();
    let rx = 0.5 * obj.bbox.width();
    let ry = 0.5 * obj.bbox.height();
    let x0 = obj.bbox.x_min.floor().max(0.0) as usize;
    let y0 = obj.bbox.y_min.floor().max(0.0) as usize;
    let x1 = (obj.bbox.x_max.ceil() as usize).min(size);
    let y1 = (obj.bbox.y_max.ceil() as usize).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match obj.class_id {
                0 => {
                    fx >= obj.bbox.x_min && fx < obj.bbox.x_max && fy >= obj.bbox.y_min
                        && fy < obj.bbox.y_max
                }
                _ => {
                    let dx = (fx - cx) / rx;
                    let dy = (fy - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                }
            };
            if inside {
                for (plane, &color) in planes.iter_mut().zip(colors) {
                    plane[y * size + x] = color;
                }
            }
        }
    }
}

/// Spatially correlated noise field: a coarse Gaussian grid bilinearly
/// upsampled. Unlike white noise it is not averaged away by the spatial
/// pooling inside a detector, so it genuinely hides low-contrast objects.
fn low_freq_noise(rng: &mut ChaCha20Rng, size: usize, cell: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).unwrap();
    let nodes = size / cell + 2;
    let grid: Vec<f64> = (0..nodes * nodes).map(|_| normal.sample(rng)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y as f64 / cell as f64;
        let (y0, fy) = (gy as usize, gy.fract());
        for x in 0..size {
            let gx = x as f64 / cell as f64;
            let (x0, fx) = (gx as usize, gx.fract());
            let at = |yy: usize, xx: usize| grid[yy * nodes + xx];
            out[y * size + x] = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
        }
    }
    out
}

fn box_blur3(plane: &[f64], size: usize) -> Vec<f64> {
    let s = size as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < s && xx >= 0 && xx < s {
                        acc += plane[(yy * s + xx) as usize];
                        n += 1.0;
                    }
                }
            }
            out[(y * s + x) as usize] = acc / n;
        }
    }
    out
}

/// RGB object colors and X intensities per class, against a mid-tone
/// background, chosen so each scene leaves at least one modality with a
/// strong signature.
const RGB_COLORS: [[f64; 3]; 2] = [[0.95, 0.2, 0.15], [0.1, 0.25, 0.95]];
const X_LEVELS: [f64; 2] = [0.92, 0.68];
const X_BACKGROUND: f64 = 0.22;

/// Deterministically generate one sample. The same (scene, size, seed)
/// triple always produces bit-identical data.
pub fn generate_sample(scene: &str, image_size: usize, seed: u64) -> Result<SceneSample> {
    if image_size == 0 || image_size % 128 != 0 {
        return Err(Error::invalid(
            "generate_sample",
            format!("image size {image_size} must be a positive multiple of 128"),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let size = image_size;
    let n = size * size;

    // textured background: per-channel low-frequency sinusoid mix
    let mut rgb: Vec<Vec<f64>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let fx = rng.gen_range(1.0..3.0);
        let fy = rng.gen_range(1.0..3.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut plane = vec![0.0; n];
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 / size as f64;
                let v = y as f64 / size as f64;
                plane[y * size + x] = 0.45
                    + 0.33 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            }
        }
        rgb.push(plane);
    }
    let mut x_plane = vec![X_BACKGROUND; n];
    {
        let fx = rng.gen_range(1.0..2.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for xi in 0..size {
                let u = xi as f64 / size as f64;
                x_plane[y * size + xi] +=
                    0.04 * (std::f64::consts::TAU * fx * u + phase).sin();
            }
        }
    }

    let objects = place_objects(&mut rng, size);
    for obj in &objects {
        paint(&mut rgb, &RGB_COLORS[obj.class_id], obj, size);
        paint(
            std::slice::from_mut(&mut x_plane),
            &[X_LEVELS[obj.class_id]],
            obj,
            size,
        );
    }

    // scene-conditioned degradation
    let tiny = Normal::new(0.0, 0.02).unwrap();
    match scene {
        "day" => {
            let heavy = Normal::new(0.0, 0.15).unwrap();
            for plane in &mut rgb {
                for v in plane.iter_mut() {
                    *v += tiny.sample(&mut rng);
                }
            }
            // fade the X signature toward background and bury it in
            // correlated clutter: clearly worse than RGB, still learnable
            let cell = (size / 8).max(1);
            let clutter = low_freq_noise(&mut rng, size, cell, 0.15);
            for (v, c) in x_plane.iter_mut().zip(&clutter) {
                *v = X_BACKGROUND + (*v - X_BACKGROUND) * 0.55 + c + heavy.sample(&mut rng);
            }
        }
        "night" => {
            // sigma 0.1 split between a correlated field and white noise so
            // spatial averaging cannot recover the crushed contrast
            let white = Normal::new(0.0, 0.05).unwrap();
            let cell = (size / 8).max(1);
            for plane in &mut rgb {
                let field = low_freq_noise(&mut rng, size, cell, 0.1);
                for (v, c) in plane.iter_mut().zip(&field) {
                    *v = *v * 0.15 + c + white.sample(&mut rng);
                }
            }
            for v in x_plane.iter_mut() {
                *v += tiny.sample(&mut rng);
            }
        }
        "fog" => {
            let mild = Normal::new(0.0, 0.04).unwrap();
            for plane in &mut rgb {
                for y in 0..size {
                    // haze everywhere, thickening with depth, so fog is
                    // globally distinguishable from day
                    let depth = (y as f64 + 1.0) / size as f64;
                    let alpha = 0.7 * (0.4 + 0.6 * depth);
                    for xi in 0..size {
                        let v = &mut plane[y * size + xi];
                        *v = (1.0 - alpha) * *v + alpha * 0.65 + tiny.sample(&mut rng);
                    }
                }
            }
            x_plane = box_blur3(&x_plane, size);
            for v in x_plane.iter_mut() {
                *v += mild.sample(&mut rng);
            }
        }
        other => return Err(Error::UnknownScene(other.to_string())),
    }

    // clamp and quantize through f32 so disk round-trips are bit-exact
    let q = |v: f64| (v.clamp(0.0, 1.0) as f32) as f64;
    let rgb_data: Vec<f64> = rgb.into_iter().flatten().map(q).collect();
    let x_data: Vec<f64> = x_plane.into_iter().map(q).collect();

    Ok(SceneSample {
        id: String::new(),
        rgb: Tensor::new(vec![3, size, size], rgb_data),
        x: Tensor::new(vec![1, size, size], x_data),
        scene: scene.to_string(),
        gts: objects
            .into_iter()
            .map(|o| GroundTruthBox {
                class_id: o.class_id,
                bbox: o.bbox,
            })
            .collect(),
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file: String,
    width: u32,
    height: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoInfo {
    image_size: usize,
    taxonomy: Vec<String>,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoDoc {
    info: CocoInfo,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Split manifests per scene: string sample ids, newline-delimited on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SceneSplits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// A fully loaded dataset.
#[derive(Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub taxonomy: Vec<String>,
    pub seed: u64,
    pub samples: Vec<SceneSample>,
    pub splits: BTreeMap<String, SceneSplits>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn sample(&self, id: &str) -> Result<&SceneSample> {
        self.index
            .get(id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::Schema(format!("unknown sample id `{id}`")))
    }

    /// Samples of one split, optionally restricted to a scene, in manifest
    /// order.
    pub fn split_samples(&self, scene: Option<&str>, split: Split) -> Result<Vec<&SceneSample>> {
        let mut out = Vec::new();
        for (sc, splits) in &self.splits {
            if let Some(want) = scene {
                if sc != want {
                    continue;
                }
            }
            for id in splits.get(split) {
                out.push(self.sample(id)?);
            }
        }
        if let Some(want) = scene {
            if !self.splits.contains_key(want) {
                return Err(Error::UnknownScene(want.to_string()));
            }
        }
        Ok(out)
    }
}

/// First ceil(fraction/100 * n) positions of a seeded shuffle of 0..n,
/// returned in ascending order.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=100.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::invalid(
            "fraction_subset",
            format!("fraction {fraction} must be in (0, 100]"),
        ));
    }
    let k = ((fraction / 100.0) * n as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(k.min(n)).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

fn image_rel_path(id: &str) -> String {
    format!("images/{id}.rxf")
}

/// Generate and persist a dataset. Re-running with the same spec overwrites
/// with byte-identical files.
pub fn generate_dataset(spec: &SplitSpec, dir: &Path) -> Result<Dataset> {
    if spec.taxonomy.is_empty() {
        return Err(Error::Config("taxonomy must not be empty".into()));
    }
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir.join("images"), e))?;

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut samples = Vec::new();
    let mut splits: BTreeMap<String, SceneSplits> = BTreeMap::new();
    let mut index = BTreeMap::new();
    let mut next_id = 0u64;

    for (scene_idx, scene) in spec.taxonomy.iter().enumerate() {
        let mut scene_splits = SceneSplits::default();
        let counts = [
            (Split::Train, spec.train_per_scene),
            (Split::Val, spec.val_per_scene),
            (Split::Test, spec.test_per_scene),
        ];
        for (split, count) in counts {
            for i in 0..count {
                let seed = sample_seed(spec.seed, scene_idx, split, i);
                let mut sample = generate_sample(scene, spec.image_size, seed)?;
                let id = format!("{scene}-{}-{i:04}", split.name());
                sample.id = id.clone();

                let file = image_rel_path(&id);
                let mut ck = Checkpoint::new(serde_json::json!({
                    "id": id,
                    "scene": scene,
                    "seed": seed,
                }));
                ck.insert("rgb", TensorEntry::f32(sample.rgb.shape(), sample.rgb.data()));
                ck.insert("x", TensorEntry::f32(sample.x.shape(), sample.x.data()));
                ck.save(&dir.join(&file))?;

                images.push(CocoImage {
                    id: next_id,
                    file,
                    width: spec.image_size as u32,
                    height: spec.image_size as u32,
                    scene: Some(scene.clone()),
                    seed,
                });
                for gt in &sample.gts {
                    annotations.push(CocoAnnotation {
                        image_id: next_id,
                        category_id: gt.class_id as u32 + 1,
                        bbox: [
                            gt.bbox.x_min,
                            gt.bbox.y_min,
                            gt.bbox.width(),
                            gt.bbox.height(),
                        ],
                    });
                }
                match split {
                    Split::Train => scene_splits.train.push(id.clone()),
                    Split::Val => scene_splits.val.push(id.clone()),
                    Split::Test => scene_splits.test.push(id.clone()),
                }
                index.insert(id, samples.len());
                samples.push(sample);
                next_id += 1;
            }
        }
        let scene_dir = dir.join(scene);
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        for split in Split::ALL {
            let path = scene_dir.join(format!("{}.ids", split.name()));
            let body = scene_splits
                .get(split)
                .iter()
                .map(|s| format!("{s}\n"))
                .collect::<String>();
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        splits.insert(scene.clone(), scene_splits);
    }

    let doc = CocoDoc {
        info: CocoInfo {
            image_size: spec.image_size,
            taxonomy: spec.taxonomy.clone(),
            seed: spec.seed,
        },
        images,
        annotations,
        categories: CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as u32 + 1,
                name: (*name).to_string(),
            })
            .collect(),
    };
    let ann_path = dir.join("annotations.json");
    let body = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Schema(format!("serialize annotations: {e}")))?;
    fs::write(&ann_path, body).map_err(|e| Error::io(&ann_path, e))?;

    Ok(Dataset {
        image_size: spec.image_size,
        taxonomy: spec.taxonomy.clone(),
        seed: spec.seed,
        samples,
        splits,
        index,
    })
}

/// Load a persisted dataset, validating the annotation schema with
/// field-level diagnostics.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join("annotations.json");
    let body = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let doc: CocoDoc =
        serde_json::from_str(&body).map_err(|e| Error::Schema(format!("annotations.json: {e}")))?;

    if doc.info.image_size == 0 {
        return Err(Error::Schema("info.image_size must be positive".into()));
    }
    let mut categories = BTreeMap::new();
    for cat in &doc.categories {
        if cat.id == 0 {
            return Err(Error::Schema(format!("category `{}`: id 0 is reserved", cat.name)));
        }
        categories.insert(cat.id, cat.name.clone());
    }

    let mut by_image: BTreeMap<u64, Vec<GroundTruthBox>> = BTreeMap::new();
    for (i, ann) in doc.annotations.iter().enumerate() {
        if !categories.contains_key(&ann.category_id) {
            return Err(Error::Schema(format!(
                "annotation {i}: unknown category_id {}",
                ann.category_id
            )));
        }
        let [x, y, w, h] = ann.bbox;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Schema(format!(
                "annotation {i} (image_id {}): non-positive bbox {w}x{h}",
                ann.image_id
            )));
        }
        by_image.entry(ann.image_id).or_default().push(GroundTruthBox {
            class_id: ann.category_id as usize - 1,
            bbox: BBox::new(x, y, x + w, y + h),
        });
    }

    let mut samples = Vec::with_capacity(doc.images.len());
    let mut index = BTreeMap::new();
    for img in &doc.images {
        let scene = img.scene.clone().ok_or_else(|| {
            Error::Schema(format!("image {} ({}): missing scene", img.id, img.file))
        })?;
        if !doc.info.taxonomy.contains(&scene) {
            return Err(Error::Schema(format!(
                "image {} ({}): scene `{scene}` not in taxonomy",
                img.id, img.file
            )));
        }
        let size = doc.info.image_size as f64;
        let gts = by_image.remove(&img.id).unwrap_or_default();
        for gt in &gts {
            if gt.bbox.x_min < 0.0
                || gt.bbox.y_min < 0.0
                || gt.bbox.x_max > size
                || gt.bbox.y_max > size
            {
                return Err(Error::Schema(format!(
                    "image {} ({}): bbox out of bounds",
                    img.id, img.file
                )));
            }
        }

        let path = dir.join(&img.file);
        let ck = Checkpoint::load(&path)?;
        let rgb = ck.get("rgb", &path)?.to_tensor();
        let x = ck.get("x", &path)?.to_tensor();
        let want_rgb = vec![3, doc.info.image_size, doc.info.image_size];
        let want_x = vec![1, doc.info.image_size, doc.info.image_size];
        if rgb.shape() != want_rgb || x.shape() != want_x {
            return Err(Error::Schema(format!(
                "image {} ({}): tensor shapes {:?}/{:?} do not match image_size {}",
                img.id,
                img.file,
                rgb.shape(),
                x.shape(),
                doc.info.image_size
            )));
        }
        let id = Path::new(&img.file)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Schema(format!("image {}: bad file path {}", img.id, img.file)))?
            .to_string();
        index.insert(id.clone(), samples.len());
        samples.push(SceneSample {
            id,
            rgb,
            x,
            scene,
            gts,
            seed: img.seed,
        });
    }
    if !by_image.is_empty() {
        let orphan = by_image.keys().next().unwrap();
        return Err(Error::Schema(format!(
            "annotations reference unknown image_id {orphan}"
        )));
    }

    let mut splits = BTreeMap::new();
    for scene in &doc.info.taxonomy {
        let mut scene_splits = SceneSplits::default();
        for split in Split::ALL {
            let path = dir.join(scene).join(format!("{}.ids", split.name()));
            let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let ids: Vec<String> = body.lines().map(|l| l.to_string()).collect();
            for id in &ids {
                if !index.contains_key(id) {
                    return Err(Error::Schema(format!(
                        "{scene}/{}.ids: unknown sample id `{id}`",
                        split.name()
                    )));
                }
            }
            match split {
                Split::Train => scene_splits.train = ids,
                Split::Val => scene_splits.val = ids,
                Split::Test => scene_splits.test = ids,
            }
        }
        splits.insert(scene.clone(), scene_splits);
    }

    Ok(Dataset {
        image_size: doc.info.image_size,
        taxonomy: doc.info.taxonomy,
        seed: doc.info.seed,
        samples,
        splits,
        index,
    })
}

/// Recursively collect (relative path, bytes) for byte-compare tests and
/// deterministic re-generation checks.
pub fn dir_snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
