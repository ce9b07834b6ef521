//! Mini-batch training for weak (alignment layer) and strong (matched ground
//! truth) supervision.

use std::io::Write;
use std::path::Path;

use ndtensor::{Graph, OptimizerConfig, OptimizerState, ParameterStore, TensorError};
use rayon::prelude::*;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::loss::{strong_loss, weak_loss, LossBreakdown};
use crate::model::{grid_tensor, init_params, Dropout, Net};
use crate::rng::{stream, TAG_DROPOUT, TAG_NOISE, TAG_SHUFFLE};
use crate::scenegen::Scene;
use crate::targets::{build_targets, build_targets_strong, TargetSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Weak,
    Strong,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Self::Weak),
            "strong" => Ok(Self::Strong),
            other => Err(Error::Config(format!("unknown mode `{other}` (weak|strong)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Epoch from which the learning rate decays linearly to zero at the end
    /// of training. `None` keeps it constant.
    pub lr_decay_from: Option<usize>,
    /// Joint gradient-norm cap applied before each optimizer step.
    pub clip_grad_norm: Option<f64>,
    pub lambda_sparse: f64,
    /// Evaluate every this many epochs (and after the last); 0 = last only.
    pub eval_every: usize,
    pub freeze_queries: bool,
    pub dropout: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Weak,
            epochs: 100,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            lr_decay_from: None,
            clip_grad_norm: None,
            lambda_sparse: 1.0,
            eval_every: 10,
            freeze_queries: false,
            dropout: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config("train.epochs, batch_size and threads must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer lr and weight_decay must be >= 0".into()));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("train.clip_grad_norm must be positive".into()));
        }
        if !(self.lambda_sparse >= 0.0 && self.lambda_sparse.is_finite()) {
            return Err(Error::Config("train.lambda_sparse must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_from {
            Some(start) if epoch >= start && self.epochs > start => {
                self.optimizer.lr * (self.epochs - epoch) as f64 / (self.epochs - start) as f64
            }
            _ => self.optimizer.lr,
        }
    }
}

/// One metrics-log row; epoch averages over scenes with at least one target.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub l_box: f64,
    pub l_human: f64,
    pub l_object: f64,
    pub l_verb: f64,
    pub l_noun: f64,
    pub l_sparse: f64,
    pub total: f64,
    pub aligned_mean: f64,
    pub map_full: Option<f64>,
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,step,l_box,l_human,l_object,l_verb,l_noun,l_sparse,total,aligned_mean,map_full,map_rare,map_nonrare";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.l_box,
            self.l_human,
            self.l_object,
            self.l_verb,
            self.l_noun,
            self.l_sparse,
            self.total,
            self.aligned_mean,
            o(self.map_full),
            o(self.map_rare),
            o(self.map_nonrare)
        )
    }
}

/// Writes the metrics log: a `# {meta}` line, the header, then one row per
/// epoch.
pub fn write_metrics(path: &Path, rows: &[MetricsRow], meta: &serde_json::Value) -> Result<()> {
    let mut out = format!("# {meta}\n{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub params: ParameterStore<f32>,
    pub metrics: Vec<MetricsRow>,
    /// Parameters and epoch of the best evaluation, when an eval set was given.
    pub best: Option<(usize, f64, ParameterStore<f32>)>,
    pub final_report: Option<EvalReport>,
    /// Target-construction warnings across the training set.
    pub warnings: usize,
}

struct SceneResult {
    grads: Option<Vec<Vec<f32>>>,
    loss: LossBreakdown,
}

fn non_finite(epoch: usize, scene_id: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite(_)) => Error::NonFiniteLoss { epoch, scene_id },
        other => other,
    }
}

fn scene_step(
    cfg: &Config,
    params: &ParameterStore<f32>,
    scene: &Scene,
    targets: &TargetSet,
    epoch: usize,
) -> Result<SceneResult> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, true);
    let mut dropout = (cfg.train.dropout && cfg.model.dropout > 0.0).then(|| Dropout {
        rate: cfg.model.dropout,
        rng: stream(cfg.seed, &[TAG_DROPOUT, epoch as u64, scene.scene_id]),
    });
    let mut net = Net::new(&cfg.model, &bound, dropout.as_mut());
    let out = net.forward(&mut g, &grid_tensor(&scene.grid))?;
    let loss = match cfg.train.mode {
        Mode::Weak => {
            let mut rng = stream(cfg.seed, &[TAG_NOISE, epoch as u64, scene.scene_id]);
            weak_loss(&mut g, &out.pred, targets, &cfg.align, cfg.train.lambda_sparse, &mut rng)?.0
        }
        Mode::Strong => strong_loss(&mut g, &out.pred, targets, &cfg.align)?.0,
    };
    let Some(total) = loss.total else {
        return Ok(SceneResult { grads: None, loss: loss.breakdown });
    };
    if !loss.breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, scene_id: scene.scene_id });
    }
    g.backward(total)?;
    Ok(SceneResult {
        grads: Some(params.collect_grads(&g, &bound)),
        loss: loss.breakdown,
    })
}

/// Targets per scene for the configured mode.
pub fn scene_targets(cfg: &Config, dataset: &[Scene]) -> Vec<TargetSet> {
    dataset
        .iter()
        .map(|s| match cfg.train.mode {
            Mode::Weak => build_targets(&s.detections, &s.labels, &cfg.data.vocab, &cfg.targets),
            Mode::Strong => build_targets_strong(s, &cfg.data.vocab),
        })
        .collect()
}

/// Trains from a fresh initialization. `eval_set` (if any) is scored every
/// `eval_every` epochs with rare classes taken from `dataset`; `progress` sees
/// every metrics row as it is produced.
pub fn train(
    cfg: &Config,
    dataset: &[Scene],
    eval_set: Option<&[Scene]>,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let params = init_params(&cfg.model, cfg.seed)?;
    train_from(cfg, params, dataset, eval_set, progress)
}

pub fn train_from(
    cfg: &Config,
    mut params: ParameterStore<f32>,
    dataset: &[Scene],
    eval_set: Option<&[Scene]>,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    if cfg.train.freeze_queries {
        params.set_trainable("queries", false)?;
    }
    let targets = scene_targets(cfg, dataset);
    let warnings = targets.iter().map(|t| t.warnings.len()).sum();
    let mut opt = OptimizerState::new(cfg.train.optimizer.clone(), &params);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut metrics = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(usize, f64, ParameterStore<f32>)> = None;
    let mut final_report = None;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.train.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let lr = cfg.train.lr_at(epoch);
        let mut sum = LossBreakdown::default();
        let mut counted = 0usize;

        for chunk in order.chunks(cfg.train.batch_size) {
            // reduce in ascending scene id regardless of shuffle position
            let mut batch = chunk.to_vec();
            batch.sort_unstable_by_key(|&k| dataset[k].scene_id);
            let step = |k: &usize| {
                scene_step(cfg, &params, &dataset[*k], &targets[*k], epoch)
                    .map_err(non_finite(epoch, dataset[*k].scene_id))
            };
            let results: Vec<Result<SceneResult>> = if cfg.train.threads > 1 {
                pool.install(|| batch.par_iter().map(step).collect())
            } else {
                batch.iter().map(step).collect()
            };
            params.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for r in results {
                let r = r?;
                if let Some(gr) = &r.grads {
                    params.accumulate_all(gr, scale);
                    add_into(&mut sum, &r.loss);
                    counted += 1;
                }
            }
            if let Some(c) = cfg.train.clip_grad_norm {
                params.clip_grad_norm(c);
            }
            opt.step(&mut params, lr)?;
        }

        let n = counted.max(1) as f64;
        let mut row = MetricsRow {
            epoch: epoch + 1,
            step: opt.step_count(),
            l_box: sum.l_box / n,
            l_human: sum.l_human / n,
            l_object: sum.l_object / n,
            l_verb: sum.l_verb / n,
            l_noun: sum.l_noun / n,
            l_sparse: sum.l_sparse / n,
            total: sum.total / n,
            aligned_mean: sum.aligned as f64 / n,
            map_full: None,
            map_rare: None,
            map_nonrare: None,
        };
        let last = epoch + 1 == cfg.train.epochs;
        let due = cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0;
        if let Some(es) = eval_set.filter(|_| last || due) {
            let report = evaluate(&cfg.model, &params, es, dataset, &cfg.data.vocab, &cfg.eval)?;
            row.map_full = Some(report.map_full);
            row.map_rare = report.map_rare;
            row.map_nonrare = report.map_nonrare;
            if best.as_ref().is_none_or(|(_, m, _)| report.map_full > *m) {
                best = Some((epoch + 1, report.map_full, params.clone()));
            }
            if last {
                final_report = Some(report);
            }
        }
        progress(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome { params, metrics, best, final_report, warnings })
}

fn add_into(acc: &mut LossBreakdown, x: &LossBreakdown) {
    acc.l_box += x.l_box;
    acc.l_human += x.l_human;
    acc.l_object += x.l_object;
    acc.l_class += x.l_class;
    acc.l_verb += x.l_verb;
    acc.l_noun += x.l_noun;
    acc.l_sparse += x.l_sparse;
    acc.total += x.total;
    acc.aligned += x.aligned;
}
