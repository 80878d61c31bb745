//! Synthetic interaction benchmark.
//!
//! Each scene holds a few humans and objects. Actions come in two families:
//! geometry actions are announced purely by where the object sits relative to
//! the human, and blob actions are announced only by a small "context blob"
//! rendered into the feature map between the two box centres. Object class
//! signatures never encode the action, so per-object features and box
//! geometry alone cannot recover a blob action.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{features_path, write_detections, Dataset, DetectionSet, Sample};
use crate::decoder::FeatureMap;
use crate::error::{Error, Result};
use crate::eval::{write_gt, ClassSplit, GtPair};
use crate::fsutil::write_atomic;
use crate::numcore::{SeededRng, Tensor};
use crate::objective::ActionTable;
use crate::pairing::HUMAN_CLASS;
use crate::posembed::BoxN;

/// How an action is made observable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// The object centre sits at `human centre + (0, dy)`.
    Geometry { dy: f64 },
    /// A context blob with the action's signature lies between the two centres.
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_obj_classes: usize,
    /// Valid action ids per object class; class 0 is the human class.
    pub actions: Vec<Vec<usize>>,
    pub kinds: Vec<ActionKind>,
    /// Relative frequency of each blob action when one is sampled.
    pub blob_weights: Vec<f64>,
    pub image_width: u32,
    pub image_height: u32,
    pub map_height: usize,
    pub map_width: usize,
    pub channels: usize,
    pub humans: (usize, usize),
    pub objects: (usize, usize),
    pub min_centre_dist: f64,
    pub geometry_prob: f64,
    pub blob_prob: f64,
    pub max_distractors: usize,
    pub box_noise: f64,
    pub score_noise: f64,
    pub feature_noise: f64,
    pub object_amplitude: f64,
    pub blob_amplitude: f64,
    /// Blob standard deviation in cells.
    pub blob_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Interaction classes with fewer training instances are rare.
    pub rare_threshold: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let (g0, g1) = (ActionKind::Geometry { dy: 0.3 }, ActionKind::Geometry { dy: -0.3 });
        Self {
            n_obj_classes: 4,
            actions: vec![vec![2], vec![0, 2, 3], vec![1, 3, 4], vec![0, 1, 2, 4]],
            kinds: vec![g0, g1, ActionKind::Blob, ActionKind::Blob, ActionKind::Blob],
            blob_weights: vec![0.0, 0.0, 1.0, 1.0, 0.35],
            image_width: 512,
            image_height: 512,
            map_height: 16,
            map_width: 16,
            channels: 64,
            humans: (1, 3),
            objects: (1, 4),
            min_centre_dist: 0.3,
            geometry_prob: 0.35,
            blob_prob: 0.4,
            max_distractors: 2,
            box_noise: 0.03,
            score_noise: 0.05,
            feature_noise: 0.1,
            object_amplitude: 1.0,
            blob_amplitude: 1.5,
            blob_sigma: 0.3,
            n_train: 2000,
            n_test: 500,
            rare_threshold: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_actions(&self) -> usize {
        self.kinds.len()
    }

    pub fn table(&self) -> Result<ActionTable> {
        ActionTable::from_lists(self.n_actions(), &self.actions)
    }

    pub fn stride(&self) -> u32 {
        self.image_width / self.map_width as u32
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.actions.len() != self.n_obj_classes || self.n_obj_classes < 2 {
            return bad(format!("{} action lists for {} classes", self.actions.len(), self.n_obj_classes));
        }
        if self.blob_weights.len() != self.n_actions() {
            return bad("blob_weights must have one entry per action".into());
        }
        self.table()?;
        if self.map_width == 0 || self.map_height == 0 || self.channels == 0 {
            return bad("empty feature map".into());
        }
        if self.image_width % self.map_width as u32 != 0
            || self.image_height % self.map_height as u32 != 0
            || self.image_width / self.map_width as u32 != self.image_height / self.map_height as u32
        {
            return bad("image size must be a common multiple of the map size".into());
        }
        if self.humans.0 == 0 || self.humans.0 > self.humans.1 || self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return bad("human/object count ranges must be non-empty and start at 1".into());
        }
        for p in [self.geometry_prob, self.blob_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        for c in 1..self.n_obj_classes {
            if self.actions[c].iter().any(|&a| self.kinds[a] == ActionKind::Blob && self.blob_weights[a] <= 0.0) {
                return bad(format!("class {c} lists a blob action with zero weight"));
            }
        }
        Ok(())
    }
}

/// A context blob at a cell centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextBlob {
    pub x: f64,
    pub y: f64,
    pub action: usize,
    /// The `(human, object)` pair it belongs to, `None` for a distractor.
    pub pair: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub bbox: BoxN,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: f64,
    pub height: f64,
    /// Ground-truth objects, humans first.
    pub objects: Vec<SceneObject>,
    /// One noisy detection per object, aligned with `objects`.
    pub detections: Vec<(BoxN, f64)>,
    /// `(human, object, action)` over `objects` indices.
    pub gt: Vec<(usize, usize, usize)>,
    pub blobs: Vec<ContextBlob>,
}

/// Per-class and per-action channel signatures, scaled to unit RMS per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Signatures {
    pub class: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
}

impl Signatures {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = SeededRng::with_stream(cfg.seed, u64::MAX);
        let c = cfg.channels;
        let mut draw = |_| {
            let v: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            let norm = (v.iter().map(|x| x * x).sum::<f64>() / c as f64).sqrt();
            v.into_iter().map(|x| x / norm).collect()
        };
        let class = (0..cfg.n_obj_classes).map(&mut draw).collect();
        let action = (0..cfg.n_actions()).map(&mut draw).collect();
        Self { class, action }
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Distance from `p` to the part of segment `a -> b` with parameter in `[t0, t1]`.
fn segment_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64), t0: f64, t1: f64) -> f64 {
    let d = (b.0 - a.0, b.1 - a.1);
    let len2 = d.0 * d.0 + d.1 * d.1;
    let t = if len2 > 0.0 { (((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / len2).clamp(t0, t1) } else { t0 };
    dist(p, (a.0 + t * d.0, a.1 + t * d.1))
}

fn snap(v: f64, cells: usize) -> f64 {
    let c = ((v * cells as f64).floor() as isize).clamp(0, cells as isize - 1);
    (c as f64 + 0.5) / cells as f64
}

fn cell_of(p: (f64, f64), cfg: &SynthConfig) -> (usize, usize) {
    let r = ((p.1 * cfg.map_height as f64).floor() as isize).clamp(0, cfg.map_height as isize - 1) as usize;
    let c = ((p.0 * cfg.map_width as f64).floor() as isize).clamp(0, cfg.map_width as isize - 1) as usize;
    (r, c)
}

/// Samples one scene.
pub fn make_scene(rng: &mut SeededRng, cfg: &SynthConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let n_h = rng.int_in(cfg.humans.0, cfg.humans.1);
    let n_o = rng.int_in(cfg.objects.0, cfg.objects.1);
    let geometry: Vec<usize> = (0..cfg.n_actions()).filter(|&a| matches!(cfg.kinds[a], ActionKind::Geometry { .. })).collect();
    let offsets: Vec<f64> = geometry
        .iter()
        .map(|&a| match cfg.kinds[a] {
            ActionKind::Geometry { dy } => dy,
            ActionKind::Blob => unreachable!(),
        })
        .collect();

    let mut objects: Vec<SceneObject> = Vec::new();
    let mut gt = Vec::new();
    let free = |objects: &[SceneObject], p: (f64, f64)| objects.iter().all(|o| dist((o.bbox.cx, o.bbox.cy), p) >= cfg.min_centre_dist);

    for _ in 0..n_h {
        for _ in 0..200 {
            let p = (rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9));
            if free(&objects, p) {
                let bbox = BoxN::new(p.0, p.1, rng.uniform_in(0.08, 0.2), rng.uniform_in(0.15, 0.35));
                objects.push(SceneObject { bbox, class_id: HUMAN_CLASS });
                break;
            }
        }
    }
    if objects.is_empty() {
        return Err(Error::Invalid("could not place any human; min_centre_dist too large".into()));
    }
    let humans = objects.len();
    let zone_clear = |objects: &[SceneObject], p: (f64, f64)| {
        objects[..humans]
            .iter()
            .all(|h| offsets.iter().all(|&dy| dist((h.bbox.cx, h.bbox.cy + dy), p) > 0.1))
    };

    for _ in 0..n_o {
        let class_id = rng.int_in(1, cfg.n_obj_classes - 1);
        let size = (rng.uniform_in(0.06, 0.2), rng.uniform_in(0.06, 0.2));
        let valid_geo: Vec<usize> = (0..geometry.len()).filter(|&k| cfg.actions[class_id].contains(&geometry[k])).collect();
        let mut placed = None;
        if !valid_geo.is_empty() && rng.bernoulli(cfg.geometry_prob) {
            let h = rng.below(humans);
            let k = valid_geo[rng.below(valid_geo.len())];
            let hb = objects[h].bbox;
            let p = (hb.cx + rng.uniform_in(-0.02, 0.02), hb.cy + offsets[k] + rng.uniform_in(-0.02, 0.02));
            let inside = (0.05..=0.95).contains(&p.0) && (0.05..=0.95).contains(&p.1);
            let others_clear = objects.iter().enumerate().all(|(i, o)| i == h || dist((o.bbox.cx, o.bbox.cy), p) >= cfg.min_centre_dist);
            if inside && others_clear {
                placed = Some((p, Some((h, geometry[k]))));
            }
        }
        if placed.is_none() {
            for _ in 0..200 {
                let p = (rng.uniform_in(0.08, 0.92), rng.uniform_in(0.08, 0.92));
                if free(&objects, p) && zone_clear(&objects, p) {
                    placed = Some((p, None));
                    break;
                }
            }
        }
        let Some((p, geo)) = placed else { continue };
        let idx = objects.len();
        objects.push(SceneObject { bbox: BoxN::new(p.0, p.1, size.0, size.1), class_id });
        if let Some((h, a)) = geo {
            gt.push((h, idx, a));
        }
    }

    let centre = |i: usize| (objects[i].bbox.cx, objects[i].bbox.cy);
    let pairs: Vec<(usize, usize)> = (0..humans).flat_map(|h| (humans..objects.len()).map(move |o| (h, o))).collect();
    let centre_cells: Vec<(usize, usize)> = (0..objects.len()).map(|i| cell_of(centre(i), cfg)).collect();
    let mut blobs: Vec<ContextBlob> = Vec::new();

    for &(h, o) in &pairs {
        let class = objects[o].class_id;
        let weights: Vec<f64> = (0..cfg.n_actions())
            .map(|a| if cfg.kinds[a] == ActionKind::Blob && cfg.actions[class].contains(&a) { cfg.blob_weights[a] } else { 0.0 })
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 || !rng.bernoulli(cfg.blob_prob) {
            continue;
        }
        let action = rng.weighted(&weights);
        let (a, b) = (centre(h), centre(o));
        let normal = {
            let d = (b.0 - a.0, b.1 - a.1);
            let len = (d.0 * d.0 + d.1 * d.1).sqrt().max(1e-9);
            (-d.1 / len, d.0 / len)
        };
        // among a few candidate spots on the segment, keep the one farthest from other pairs
        let mut best: Option<((f64, f64), f64)> = None;
        for _ in 0..8 {
            let t = rng.uniform_in(0.3, 0.7);
            let j = rng.uniform_in(-0.03, 0.03);
            let raw = (a.0 + t * (b.0 - a.0) + j * normal.0, a.1 + t * (b.1 - a.1) + j * normal.1);
            let p = (snap(raw.0, cfg.map_width), snap(raw.1, cfg.map_height));
            if centre_cells.contains(&cell_of(p, cfg)) {
                continue;
            }
            let clearance = pairs
                .iter()
                .filter(|&&q| q != (h, o))
                .map(|&(h2, o2)| segment_dist(p, centre(h2), centre(o2), 0.15, 0.85))
                .fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, c)| clearance > c) {
                best = Some((p, clearance));
            }
        }
        if let Some((p, _)) = best {
            blobs.push(ContextBlob { x: p.0, y: p.1, action, pair: Some((h, o)) });
            gt.push((h, o, action));
        }
    }

    let blob_actions: Vec<usize> = (0..cfg.n_actions()).filter(|&a| cfg.kinds[a] == ActionKind::Blob).collect();
    if !blob_actions.is_empty() {
        for _ in 0..rng.int_in(0, cfg.max_distractors) {
            let action = blob_actions[rng.below(blob_actions.len())];
            let mut best: Option<((f64, f64), f64)> = None;
            for _ in 0..30 {
                let p = (snap(rng.uniform(), cfg.map_width), snap(rng.uniform(), cfg.map_height));
                if centre_cells.contains(&cell_of(p, cfg)) {
                    continue;
                }
                let clearance = pairs
                    .iter()
                    .map(|&(h, o)| segment_dist(p, centre(h), centre(o), 0.0, 1.0))
                    .fold(f64::INFINITY, f64::min);
                if best.map_or(true, |(_, c)| clearance > c) {
                    best = Some((p, clearance));
                }
            }
            if let Some((p, _)) = best {
                blobs.push(ContextBlob { x: p.0, y: p.1, action, pair: None });
            }
        }
    }

    let detections = objects
        .iter()
        .map(|o| {
            let b = o.bbox;
            let s = cfg.box_noise;
            let w = (b.w * (s * rng.normal()).exp()).clamp(0.01, 1.0);
            let h = (b.h * (s * rng.normal()).exp()).clamp(0.01, 1.0);
            let cx = (b.cx + s * b.w * rng.normal()).clamp(0.0, 1.0);
            let cy = (b.cy + s * b.h * rng.normal()).clamp(0.0, 1.0);
            let score = (1.0 - (cfg.score_noise * rng.normal()).abs()).clamp(0.0, 1.0);
            (BoxN::new(cx, cy, w, h), score)
        })
        .collect();
    gt.sort_unstable();
    Ok(SceneSpec { width: cfg.image_width as f64, height: cfg.image_height as f64, objects, detections, gt, blobs })
}

/// Renders the scene into a `C x H x W` map: a Gaussian class-signature blob
/// per object, a tight action-signature blob per context blob and white noise.
pub fn render_features(scene: &SceneSpec, sigs: &Signatures, rng: &mut SeededRng, cfg: &SynthConfig) -> Result<FeatureMap> {
    let (c, h, w) = (cfg.channels, cfg.map_height, cfg.map_width);
    let n = h * w;
    let mut data = vec![0.0; c * n];
    let mut splat = |sig: &[f64], amp: f64, cx: f64, cy: f64, sx: f64, sy: f64| {
        for r in 0..h {
            for col in 0..w {
                let (x, y) = ((col as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                let g = amp * (-0.5 * (((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2))).exp();
                if g < 1e-12 {
                    continue;
                }
                for (ch, s) in sig.iter().enumerate() {
                    data[ch * n + r * w + col] += g * s;
                }
            }
        }
    };
    for o in &scene.objects {
        let sigma = 0.35 * (o.bbox.w * o.bbox.h).sqrt();
        let floor = 0.5 / w.max(h) as f64;
        splat(&sigs.class[o.class_id], cfg.object_amplitude, o.bbox.cx, o.bbox.cy, sigma.max(floor), sigma.max(floor));
    }
    for b in &scene.blobs {
        let (sx, sy) = (cfg.blob_sigma / w as f64, cfg.blob_sigma / h as f64);
        splat(&sigs.action[b.action], cfg.blob_amplitude, b.x, b.y, sx, sy);
    }
    for v in &mut data {
        *v += cfg.feature_noise * rng.normal();
    }
    let mut fm = FeatureMap::new(Tensor::new(vec![c, h, w], data)?, cfg.stride())?;
    fm.round_to_f32();
    Ok(fm)
}

fn pixel_box(b: &BoxN, width: f64, height: f64) -> [f64; 4] {
    let x = |v: f64| v.clamp(0.0, 1.0) * width;
    let y = |v: f64| v.clamp(0.0, 1.0) * height;
    [x(b.x1()), y(b.y1()), x(b.x2()), y(b.y2())]
}

/// Converts a scene and its rendered map into a sample.
pub fn scene_sample(image_id: &str, scene: &SceneSpec, features: FeatureMap) -> Sample {
    let (w, h) = (scene.width, scene.height);
    let detections = DetectionSet {
        image_id: image_id.to_string(),
        width: w,
        height: h,
        boxes: scene.detections.iter().map(|(b, _)| pixel_box(b, w, h)).collect(),
        scores: scene.detections.iter().map(|(_, s)| *s).collect(),
        classes: scene.objects.iter().map(|o| o.class_id).collect(),
    };
    let gt = scene
        .gt
        .iter()
        .map(|&(hi, oi, a)| GtPair {
            image_id: image_id.to_string(),
            h_box: pixel_box(&scene.objects[hi].bbox, w, h),
            o_box: Some(pixel_box(&scene.objects[oi].bbox, w, h)),
            object_class: scene.objects[oi].class_id,
            action: a,
        })
        .collect();
    Sample { detections, gt, features }
}

const TEST_STREAM_BASE: u64 = 1 << 32;

/// Scene `index` of a split, generated from its own random stream.
pub fn make_sample(cfg: &SynthConfig, sigs: &Signatures, split: &str, index: usize) -> Result<(SceneSpec, Sample)> {
    let stream = if split == "test" { TEST_STREAM_BASE + index as u64 } else { index as u64 };
    let mut rng = SeededRng::with_stream(cfg.seed, stream);
    let scene = make_scene(&mut rng, cfg)?;
    let fm = render_features(&scene, sigs, &mut rng, cfg)?;
    let id = format!("{split}_{index:06}");
    let sample = scene_sample(&id, &scene, fm);
    Ok((scene, sample))
}

/// Interaction classes with fewer than `threshold` instances in `samples`.
pub fn rare_split(table: &ActionTable, samples: &[Sample], threshold: usize) -> ClassSplit {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in samples.iter().flat_map(|s| &s.gt) {
        if let Some(id) = table.interaction_id(g.object_class, g.action) {
            *counts.entry(id).or_default() += 1;
        }
    }
    let rare = (0..table.interactions().len()).filter(|id| counts.get(id).copied().unwrap_or(0) < threshold).collect();
    ClassSplit { rare }
}

/// Generates the whole dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sigs = Signatures::new(cfg);
    let table = cfg.table()?;
    let train = (0..cfg.n_train).map(|i| make_sample(cfg, &sigs, "train", i).map(|s| s.1)).collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.n_test).map(|i| make_sample(cfg, &sigs, "test", i).map(|s| s.1)).collect::<Result<Vec<_>>>()?;
    let split = rare_split(&table, &train, cfg.rare_threshold);
    Ok(Dataset { table, split, train, test })
}

/// Writes the dataset, its action table, rare split and a copy of the
/// configuration under `out_dir`. Returns the written paths.
pub fn emit_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = generate(cfg)?;
    write_dataset(&ds, cfg, out_dir)
}

pub fn write_dataset(ds: &Dataset, cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for s in samples.iter() {
            put(features_path(out_dir, split, s.image_id()), &s.features.to_bytes())?;
        }
        let mut dets = Vec::new();
        write_detections(&mut dets, &samples.iter().map(|s| s.detections.clone()).collect::<Vec<_>>())?;
        put(out_dir.join(split).join("detections.jsonl"), &dets)?;
        let mut gt = Vec::new();
        write_gt(&mut gt, &samples.iter().flat_map(|s| s.gt.clone()).collect::<Vec<_>>())?;
        put(out_dir.join(split).join("gt.jsonl"), &gt)?;
    }
    put(out_dir.join("action_table.txt"), ds.table.to_text().as_bytes())?;
    put(out_dir.join("rare_split.txt"), ds.split.to_text().as_bytes())?;
    let mut cfg_json = serde_json::to_vec_pretty(cfg)?;
    cfg_json.push(b'\n');
    put(out_dir.join("synth_config.json"), &cfg_json)?;
    Ok(written)
}
