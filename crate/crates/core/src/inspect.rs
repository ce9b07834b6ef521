//! Per-scene dump of the quantities behind qualitative figures: decoder
//! cross-attention, the alignment matrices, targets, and top detections.

use ndtensor::{Graph, ParameterStore, Tensor};
use serde::Serialize;

use crate::align::{self, AlignConfig};
use crate::config::Config;
use crate::error::Result;
use crate::eval::{detections_from_predictions, ScoredDetection};
use crate::model::{grid_tensor, Net, PredictionSet};
use crate::scenegen::Scene;
use crate::targets::{build_targets, TargetSet};

#[derive(Clone, Debug, Serialize)]
pub struct Inspection {
    pub scene_id: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Last decoder layer, `[head][query][cell]`.
    pub attention: Vec<Vec<Vec<f32>>>,
    pub predictions: PredictionRows,
    pub targets: TargetSet,
    /// P×T, absent when the scene yields no targets.
    pub scores: Option<Vec<Vec<f32>>>,
    pub soft: Option<Vec<Vec<f32>>>,
    pub alignment: Option<Vec<Vec<f32>>>,
    pub detections: Vec<ScoredDetection>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictionRows {
    pub human: Vec<Vec<f32>>,
    pub object: Vec<Vec<f32>>,
    pub verb: Vec<Vec<f32>>,
    pub noun: Vec<Vec<f32>>,
}

/// Noise-free forward pass over one scene.
pub fn inspect(cfg: &Config, params: &ParameterStore<f32>, scene: &Scene) -> Result<Inspection> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false);
    let mut net = Net::new(&cfg.model, &bound, None);
    let out = net.forward(&mut g, &grid_tensor(&scene.grid))?;
    let attention = out
        .decode
        .cross_attention
        .last()
        .map(|heads| heads.iter().map(|&h| g.value(h).rows()).collect())
        .unwrap_or_default();

    let targets = build_targets(&scene.detections, &scene.labels, &cfg.data.vocab, &cfg.targets);
    let (mut scores, mut soft, mut alignment) = (None, None, None);
    if !targets.is_empty() {
        let quiet = AlignConfig { noise: false, ..cfg.align.clone() };
        let mut unused = crate::rng::stream(cfg.seed, &[]);
        let a = align::align(&mut g, &out.pred, &targets, &quiet, &mut unused)?;
        scores = Some(g.value(a.scores).rows());
        soft = Some(g.value(a.soft).rows());
        alignment = Some(g.value(a.hard).rows());
    }

    let p = out.pred.values(&g);
    let cast = |t: &Tensor<f32>| t.cast::<f64>();
    let set = PredictionSet {
        human: cast(&p.human),
        object: cast(&p.object),
        verb: cast(&p.verb),
        noun: cast(&p.noun),
    };
    Ok(Inspection {
        scene_id: scene.scene_id,
        grid_h: cfg.model.grid_h,
        grid_w: cfg.model.grid_w,
        attention,
        predictions: PredictionRows {
            human: p.human.rows(),
            object: p.object.rows(),
            verb: p.verb.rows(),
            noun: p.noun.rows(),
        },
        targets,
        scores,
        soft,
        alignment,
        detections: detections_from_predictions(scene.scene_id, &set, &cfg.eval),
    })
}
