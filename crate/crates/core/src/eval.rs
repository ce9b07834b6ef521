//! HOI detection mAP: a detection is correct when both its human and object
//! boxes overlap an unclaimed ground-truth pair and its (verb, noun) class
//! matches.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndtensor::ParameterStore;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::model::{predict, ModelConfig, PredictionSet};
use crate::scenegen::{split_rare, ClassSet, Scene, VocabConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_floor: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_floor: 1e-4,
            top_k: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub scene_id: u64,
    pub human: BBox,
    pub object: BBox,
    pub verb: usize,
    pub noun: usize,
    pub score: f64,
    /// Position in the emitting scene's candidate list; breaks score ties.
    pub emission: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub human: BBox,
    pub object: BBox,
    pub verb: usize,
    pub noun: usize,
}

pub fn ground_truths(scene: &Scene) -> Vec<GroundTruth> {
    scene
        .interactions
        .iter()
        .map(|it| GroundTruth {
            scene_id: scene.scene_id,
            human: scene.instances[it.human].bbox,
            object: scene.instances[it.object].bbox,
            verb: it.verb,
            noun: it.noun,
        })
        .collect()
}

/// Overlap of a detection with a ground-truth pair: the smaller of the two
/// box IoUs.
pub fn pair_iou(det: &ScoredDetection, gt: &GroundTruth) -> f64 {
    det.human.iou(&gt.human).min(det.object.iou(&gt.object))
}

pub fn match_pair(det: &ScoredDetection, gt: &GroundTruth, thresh: f64) -> bool {
    det.scene_id == gt.scene_id && det.verb == gt.verb && det.noun == gt.noun && pair_iou(det, gt) >= thresh
}

/// Rank order: score descending, then scene id, then emission index.
pub fn rank_order(a: &ScoredDetection, b: &ScoredDetection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.scene_id.cmp(&b.scene_id))
        .then(a.emission.cmp(&b.emission))
}

/// True-positive flag per detection under greedy matching in rank order.
pub fn greedy_match(dets: &[ScoredDetection], gts: &[GroundTruth], thresh: f64) -> Result<Vec<bool>> {
    if let Some(k) = dets.windows(2).position(|w| rank_order(&w[0], &w[1]) == Ordering::Greater) {
        return Err(Error::Unsorted(k + 1));
    }
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if used[j] || !match_pair(d, gt, thresh) {
                continue;
            }
            let o = pair_iou(d, gt);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        tp.push(best.is_some());
    }
    Ok(tp)
}

/// All-points interpolated AP for one class. `dets` must be in rank order.
/// Returns 0 when there are no ground truths.
pub fn average_precision(dets: &[ScoredDetection], gts: &[GroundTruth], thresh: f64) -> Result<f64> {
    let tp = greedy_match(dets, gts, thresh)?;
    if gts.is_empty() {
        return Ok(0.0);
    }
    let n = gts.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    Ok(ap)
}

/// Candidate detections from one scene's predictions: every row emits every
/// (verb, noun) with score `v'[verb] * n'[noun]` at or above the floor; the
/// best `top_k` are kept, in rank order.
pub fn detections_from_predictions(scene_id: u64, pred: &PredictionSet<f64>, cfg: &EvalConfig) -> Vec<ScoredDetection> {
    let (v, n) = (pred.verb.last_dim(), pred.noun.last_dim());
    let mut out = Vec::new();
    for i in 0..pred.human.outer() {
        let h = pred.human.row(i);
        let o = pred.object.row(i);
        for verb in 0..v {
            for noun in 0..n {
                let score = pred.verb.at(i, verb) * pred.noun.at(i, noun);
                if score >= cfg.score_floor {
                    out.push(ScoredDetection {
                        scene_id,
                        human: BBox::new(h[0], h[1], h[2], h[3]),
                        object: BBox::new(o[0], o[1], o[2], o[3]),
                        verb,
                        noun,
                        score,
                        emission: (i * v + verb) * n + noun,
                    });
                }
            }
        }
    }
    out.sort_by(rank_order);
    out.truncate(cfg.top_k);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassResult {
    pub ap: f64,
    pub ground_truths: usize,
    pub detections: usize,
    pub rare: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Keyed `"verb:noun"`.
    pub per_class: BTreeMap<String, ClassResult>,
    pub map_full: f64,
    /// `None` when the split holds no evaluated class.
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
    pub scenes: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "map_full,map_rare,map_nonrare,classes,scenes";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.map_full,
            opt(self.map_rare),
            opt(self.map_nonrare),
            self.per_class.len(),
            self.scenes
        )
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Scores pooled detections against ground truths. Classes without ground
/// truth are ignored; a class is rare when it is in `rare`.
pub fn evaluate_detections(
    mut dets: Vec<ScoredDetection>,
    gts: &[GroundTruth],
    rare: &ClassSet,
    scenes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut by_class: BTreeMap<(usize, usize), (Vec<ScoredDetection>, Vec<GroundTruth>)> = BTreeMap::new();
    for gt in gts {
        by_class.entry((gt.verb, gt.noun)).or_default().1.push(gt.clone());
    }
    if by_class.is_empty() {
        return Err(Error::Eval("no ground-truth classes".into()));
    }
    dets.sort_by(rank_order);
    for d in dets {
        if let Some(e) = by_class.get_mut(&(d.verb, d.noun)) {
            e.0.push(d);
        }
    }
    let mut per_class = BTreeMap::new();
    let (mut all, mut r, mut nr) = (Vec::new(), Vec::new(), Vec::new());
    for ((verb, noun), (d, g)) in &by_class {
        let ap = average_precision(d, g, cfg.iou_threshold)?;
        let is_rare = rare.contains(&(*verb, *noun));
        all.push(ap);
        if is_rare { r.push(ap) } else { nr.push(ap) }
        per_class.insert(
            format!("{verb}:{noun}"),
            ClassResult { ap, ground_truths: g.len(), detections: d.len(), rare: is_rare },
        );
    }
    Ok(EvalReport {
        per_class,
        map_full: mean(&all).unwrap_or(0.0),
        map_rare: mean(&r),
        map_nonrare: mean(&nr),
        scenes,
    })
}

/// Runs noise-free inference over `dataset` and scores it. Rare classes are
/// those rare in `reference` (normally the training split).
pub fn evaluate(
    model: &ModelConfig,
    params: &ParameterStore<f32>,
    dataset: &[Scene],
    reference: &[Scene],
    vocab: &VocabConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if model.num_verbs != vocab.num_verbs || model.num_nouns != vocab.num_nouns {
        return Err(Error::VocabMismatch(format!(
            "model has {} verbs/{} nouns, dataset {}/{}",
            model.num_verbs, model.num_nouns, vocab.num_verbs, vocab.num_nouns
        )));
    }
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in dataset {
        let p = predict(model, params, &s.grid)?;
        dets.extend(detections_from_predictions(s.scene_id, &p, cfg));
        gts.extend(ground_truths(s));
    }
    let (rare, _) = split_rare(reference, vocab);
    evaluate_detections(dets, &gts, &rare, dataset.len(), cfg)
}
