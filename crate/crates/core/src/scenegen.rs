//! Deterministic synthetic benchmark: planted human-object interactions,
//! image-level labels, noisy detector candidates and a feature grid standing
//! in for backbone features.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::rng;

/// Noun id reserved for people.
pub const HUMAN: usize = 0;

/// Extra grid channels carrying `(cx, cy, w, h)` of the instance centred in a cell.
pub const GEOMETRY_CHANNELS: usize = 4;

/// Channels carrying the human and object boxes of an interacting pair at the
/// pair's midpoint cell.
pub const PAIR_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub num_verbs: usize,
    /// Includes [`HUMAN`].
    pub num_nouns: usize,
    pub rare_threshold: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            num_verbs: 4,
            num_nouns: 6,
            rare_threshold: 10,
        }
    }
}

impl VocabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_verbs < 1 {
            return Err(Error::Config("num_verbs must be >= 1".into()));
        }
        if self.num_nouns < 2 {
            return Err(Error::Config("num_nouns must be >= 2 (HUMAN plus one object noun)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub vocab: VocabConfig,
    /// Inclusive ranges.
    pub humans: [usize; 2],
    pub objects: [usize; 2],
    pub interactions: [usize; 2],
    pub jitter_sigma: f64,
    pub fp_rate: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Width of the category/verb embedding block; the grid depth is this
    /// plus [`GEOMETRY_CHANNELS`] and [`PAIR_CHANNELS`].
    pub embed_dim: usize,
    /// Zipf exponent of the verb and object-noun frequency.
    pub class_skew: f64,
    /// Side-length ranges, half-open.
    pub human_w: [f64; 2],
    pub human_h: [f64; 2],
    pub object_size: [f64; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vocab: VocabConfig::default(),
            humans: [1, 2],
            objects: [1, 3],
            interactions: [1, 2],
            jitter_sigma: 0.01,
            fp_rate: 0.1,
            grid_h: 6,
            grid_w: 6,
            embed_dim: 12,
            class_skew: 1.0,
            human_w: [0.2, 0.35],
            human_h: [0.35, 0.6],
            object_size: [0.2, 0.4],
        }
    }
}

impl GenConfig {
    pub fn input_dim(&self) -> usize {
        self.embed_dim + GEOMETRY_CHANNELS + PAIR_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let range = |name: &str, r: [usize; 2], lo: usize, hi: usize| {
            if r[0] > r[1] || r[0] < lo || r[1] > hi {
                Err(Error::Config(format!("{name} range {r:?} must lie within {lo}..={hi}")))
            } else {
                Ok(())
            }
        };
        range("humans", self.humans, 1, 4)?;
        range("objects", self.objects, 1, 5)?;
        range("interactions", self.interactions, 0, 3)?;
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config("jitter_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.fp_rate) {
            return Err(Error::Config("fp_rate must lie in [0, 1)".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.embed_dim == 0 {
            return Err(Error::Config("grid dims and embed_dim must be positive".into()));
        }
        if !(self.class_skew >= 0.0 && self.class_skew.is_finite()) {
            return Err(Error::Config("class_skew must be >= 0".into()));
        }
        for (name, [lo, hi]) in [("human_w", self.human_w), ("human_h", self.human_h), ("object_size", self.object_size)] {
            if !(0.0 < lo && lo < hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} must satisfy 0 < lo < hi <= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub human: usize,
    pub object: usize,
    pub verb: usize,
    pub noun: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let r = ((y * self.h as f64).floor() as isize).clamp(0, self.h as isize - 1) as usize;
        let c = ((x * self.w as f64).floor() as isize).clamp(0, self.w as isize - 1) as usize;
        (r, c)
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let k = (r * self.w + c) * self.d;
        &mut self.data[k..k + self.d]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scene_id: u64,
    pub instances: Vec<Instance>,
    pub interactions: Vec<Interaction>,
    /// Deduplicated `(verb, noun)` pairs, sorted.
    pub labels: Vec<(usize, usize)>,
    pub detections: Vec<Detection>,
    pub grid: Grid,
}

impl Scene {
    /// Checks the structural invariants tying interactions, labels and
    /// detections together.
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (k, it) in self.interactions.iter().enumerate() {
            let h = self.instances.get(it.human).ok_or(format!("interaction {k}: bad human index"))?;
            let o = self.instances.get(it.object).ok_or(format!("interaction {k}: bad object index"))?;
            if h.category != HUMAN {
                return Err(format!("interaction {k}: subject is not HUMAN"));
            }
            if o.category == HUMAN || o.category != it.noun {
                return Err(format!("interaction {k}: object category does not match noun"));
            }
        }
        if self.labels != labels_of(&self.interactions) {
            return Err("labels differ from planted interactions".into());
        }
        if !self.interactions.is_empty() && !self.detections.iter().any(|d| d.category == HUMAN) {
            return Err("no HUMAN detection in a scene with interactions".into());
        }
        if self.grid.data.len() != self.grid.h * self.grid.w * self.grid.d {
            return Err("grid data length mismatch".into());
        }
        Ok(())
    }
}

pub fn labels_of(interactions: &[Interaction]) -> Vec<(usize, usize)> {
    interactions
        .iter()
        .map(|i| (i.verb, i.noun))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Fixed per-category and per-verb unit vectors.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub nouns: Vec<Vec<f32>>,
    pub verbs: Vec<Vec<f32>>,
}

impl Embeddings {
    pub fn new(cfg: &GenConfig) -> Self {
        let mut rng = rng::stream(cfg.seed, &[rng::TAG_VOCAB]);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| (x / n) as f32).collect::<Vec<f32>>()
        };
        let nouns = (0..cfg.vocab.num_nouns).map(|_| unit(&mut rng)).collect();
        let verbs = (0..cfg.vocab.num_verbs).map(|_| unit(&mut rng)).collect();
        Self { nouns, verbs }
    }
}

fn zipf(rng: &mut ChaCha8Rng, n: usize, skew: f64) -> usize {
    let weights: Vec<f64> = (0..n).map(|k| 1.0 / ((k + 1) as f64).powf(skew)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    n - 1
}

fn random_box(rng: &mut ChaCha8Rng, w: [f64; 2], h: [f64; 2]) -> BBox {
    let bw = rng.random_range(w[0]..w[1]);
    let bh = rng.random_range(h[0]..h[1]);
    let cx = rng.random_range(bw / 2.0..=1.0 - bw / 2.0);
    let cy = rng.random_range(bh / 2.0..=1.0 - bh / 2.0);
    BBox::new(cx, cy, bw, bh)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Generates one scene. Deterministic in `(cfg, scene_id)`.
pub fn generate_scene(cfg: &GenConfig, emb: &Embeddings, scene_id: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, &[rng::TAG_SCENE, scene_id]);
    let nh = rng.random_range(cfg.humans[0]..=cfg.humans[1]);
    let no = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let ni = rng.random_range(cfg.interactions[0]..=cfg.interactions[1]);

    let mut instances = Vec::with_capacity(nh + no);
    for _ in 0..nh {
        instances.push(Instance {
            category: HUMAN,
            bbox: random_box(&mut rng, cfg.human_w, cfg.human_h),
        });
    }
    for _ in 0..no {
        let category = 1 + zipf(&mut rng, cfg.vocab.num_nouns - 1, cfg.class_skew);
        instances.push(Instance {
            category,
            bbox: random_box(&mut rng, cfg.object_size, cfg.object_size),
        });
    }

    let mut interactions: Vec<Interaction> = Vec::with_capacity(ni);
    for _ in 0..ni {
        // Bounded retries keep the draw count finite when the pair space is small.
        for _ in 0..8 {
            let human = rng.random_range(0..nh);
            let object = nh + rng.random_range(0..no);
            let verb = zipf(&mut rng, cfg.vocab.num_verbs, cfg.class_skew);
            let it = Interaction {
                human,
                object,
                verb,
                noun: instances[object].category,
            };
            if !interactions.iter().any(|x| x.human == human && x.object == object && x.verb == verb) {
                interactions.push(it);
                break;
            }
        }
    }

    // Interacting objects sit next to their (first) human partner.
    let mut placed = BTreeSet::new();
    for it in &interactions {
        if !placed.insert(it.object) {
            continue;
        }
        let hb = instances[it.human].bbox;
        let ob = instances[it.object].bbox;
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let dx = side * (hb.w / 2.0 + ob.w / 2.0) * rng.random_range(0.4..1.0);
        let dy = rng.random_range(-0.15..0.15);
        let cx = (hb.cx + dx).clamp(ob.w / 2.0, 1.0 - ob.w / 2.0);
        let cy = (hb.cy + dy).clamp(ob.h / 2.0, 1.0 - ob.h / 2.0);
        instances[it.object].bbox = BBox::new(cx, cy, ob.w, ob.h);
    }

    let mut detections = Vec::with_capacity(instances.len());
    for inst in &instances {
        let bbox = if cfg.jitter_sigma > 0.0 {
            let b = inst.bbox;
            let mut j = || cfg.jitter_sigma * truncated_normal(&mut rng);
            BBox::new(b.cx + j(), b.cy + j(), b.w + j(), b.h + j()).clipped()
        } else {
            inst.bbox
        };
        let score = rng.random_range(0.6..1.0);
        detections.push(Detection {
            category: inst.category,
            bbox,
            score,
        });
    }
    for _ in 0..instances.len() {
        if rng.random::<f64>() < cfg.fp_rate {
            let category = rng.random_range(0..cfg.vocab.num_nouns);
            let bbox = random_box(&mut rng, cfg.object_size, cfg.human_h);
            let score = rng.random_range(0.05..0.6);
            detections.push(Detection { category, bbox, score });
        }
    }

    let mut grid = Grid::zeros(cfg.grid_h, cfg.grid_w, cfg.input_dim());
    let e = cfg.embed_dim;
    for inst in &instances {
        let b = inst.bbox;
        let (r, c) = grid.cell_of(b.cx, b.cy);
        let cell = grid.cell_mut(r, c);
        for (x, y) in cell[..e].iter_mut().zip(&emb.nouns[inst.category]) {
            *x += y;
        }
        for (x, y) in cell[e..e + GEOMETRY_CHANNELS].iter_mut().zip(b.to_array()) {
            *x += y as f32;
        }
    }
    let mut pairs = BTreeSet::new();
    for it in &interactions {
        let (hb, ob) = (instances[it.human].bbox, instances[it.object].bbox);
        let (r, c) = grid.cell_of((hb.cx + ob.cx) / 2.0, (hb.cy + ob.cy) / 2.0);
        let cell = grid.cell_mut(r, c);
        for (x, y) in cell[..e].iter_mut().zip(&emb.verbs[it.verb]) {
            *x += y;
        }
        if pairs.insert((it.human, it.object)) {
            let geo = hb.to_array().into_iter().chain(ob.to_array());
            for (x, y) in cell[e + GEOMETRY_CHANNELS..].iter_mut().zip(geo) {
                *x += y as f32;
            }
        }
    }

    Ok(Scene {
        scene_id,
        labels: labels_of(&interactions),
        instances,
        interactions,
        detections,
        grid,
    })
}

/// Scenes with ids `first..first + count`.
pub fn generate_corpus(cfg: &GenConfig, first: u64, count: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let emb = Embeddings::new(cfg);
    (first..first + count as u64)
        .map(|id| generate_scene(cfg, &emb, id))
        .collect()
}

/// Header line marking dataset metadata; skipped by [`read_dataset`].
#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: serde_json::Value,
}

pub fn write_dataset(scenes: &[Scene], path: &Path) -> Result<()> {
    write_dataset_with_meta(scenes, path, None)
}

/// One JSON scene per line, optionally preceded by a `{"meta": ...}` line.
pub fn write_dataset_with_meta(scenes: &[Scene], path: &Path, meta: Option<serde_json::Value>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(meta) = meta {
        let line = serde_json::to_string(&MetaLine { meta }).expect("meta serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    for s in scenes {
        let line = serde_json::to_string(s).expect("scene serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scenes = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && line.starts_with("{\"meta\"") {
            serde_json::from_str::<MetaLine>(&line).map_err(|e| Error::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        scene.validate().map_err(|message| Error::Malformed { line: lineno, message })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Reads only the metadata header line, if present.
pub fn read_dataset_meta(path: &Path) -> Result<Option<serde_json::Value>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    if first.starts_with("{\"meta\"") {
        let m: MetaLine = serde_json::from_str(first.trim_end()).map_err(|e| Error::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
        Ok(Some(m.meta))
    } else {
        Ok(None)
    }
}

pub type ClassSet = BTreeSet<(usize, usize)>;

/// Planted-interaction count per `(verb, noun)` class.
pub fn class_counts(dataset: &[Scene]) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for s in dataset {
        for it in &s.interactions {
            *counts.entry((it.verb, it.noun)).or_insert(0) += 1;
        }
    }
    counts
}

/// Partitions the classes seen in `dataset` into `(rare, nonrare)`: a class is
/// rare when its count is at most the vocabulary's rare threshold.
pub fn split_rare(dataset: &[Scene], vocab: &VocabConfig) -> (ClassSet, ClassSet) {
    let mut rare = ClassSet::new();
    let mut nonrare = ClassSet::new();
    for (class, n) in class_counts(dataset) {
        if n <= vocab.rare_threshold {
            rare.insert(class);
        } else {
            nonrare.insert(class);
        }
    }
    (rare, nonrare)
}
