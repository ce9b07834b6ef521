//! Pairwise-masked detection losses for weak (sampled alignment) and strong
//! (Hungarian matched) supervision.

use ndtensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use crate::align::{self, transposed, AlignConfig, Alignment};
use crate::error::{Error, Result};
use crate::matching::min_cost_assignment;
use crate::model::PredictionVars;
use crate::targets::TargetSet;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_human: f64,
    pub l_object: f64,
    pub l_class: f64,
    pub l_verb: f64,
    pub l_noun: f64,
    pub l_sparse: f64,
    pub total: f64,
    /// Number of aligned (prediction, target) pairs.
    pub aligned: usize,
}

/// Graph handles for the scalar loss terms. `total` is `None` when the scene
/// has no targets: there is nothing to differentiate.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Option<Var>,
    pub breakdown: LossBreakdown,
}

/// P×T masks and costs are summed elementwise and divided by
/// `max(1, aligned)`.
fn masked<T: Real>(g: &mut Graph<T>, mask: Var, cost: Var, norm: f64) -> Result<Var> {
    let m = g.mul(mask, cost)?;
    let s = g.sum(m)?;
    Ok(g.scale(s, 1.0 / norm)?)
}

/// Pairwise L1 cost for human and object boxes, masked.
pub fn box_loss<T: Real>(
    g: &mut Graph<T>,
    mask: Var,
    norm: f64,
    pred: &PredictionVars,
    targets: &TargetSet,
) -> Result<(Var, Var)> {
    let dh = align::pairwise_l1(g, pred.human, &targets.human_matrix())?;
    let dobj = align::pairwise_l1(g, pred.object, &targets.object_matrix())?;
    Ok((masked(g, mask, dh, norm)?, masked(g, mask, dobj, norm)?))
}

/// Masked verb BCE (mean over verb slots) and noun cross-entropy.
pub fn class_loss<T: Real>(
    g: &mut Graph<T>,
    mask: Var,
    norm: f64,
    pred: &PredictionVars,
    targets: &TargetSet,
) -> Result<(Var, Var)> {
    let verbs = targets.verb_matrix::<T>();
    let v = targets.num_verbs as f64;
    let pos_t = g.constant(transposed(&verbs));
    let neg_t = g.constant(transposed(&Tensor::from_fn(verbs.shape(), |k| T::one() - verbs.data()[k])));
    let pv = g.clamp(pred.verb, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.log(pv)?;
    let one_minus = g.neg(pv)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let log_q = g.log(one_minus)?;
    let pos = g.matmul(log_p, pos_t)?;
    let neg = g.matmul(log_q, neg_t)?;
    let ll = g.add(pos, neg)?;
    let bce = g.scale(ll, -1.0 / v)?;

    let nouns_t = g.constant(transposed(&targets.noun_matrix::<T>()));
    let pn = g.clamp(pred.noun, PROB_CLAMP, 1.0)?;
    let log_n = g.log(pn)?;
    let ll_n = g.matmul(log_n, nouns_t)?;
    let ce = g.neg(ll_n)?;
    Ok((masked(g, mask, bce, norm)?, masked(g, mask, ce, norm)?))
}

/// Mean of the alignment matrix.
pub fn sparsity_loss<T: Real>(g: &mut Graph<T>, mask: Var) -> Result<Var> {
    Ok(g.mean(mask)?)
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}

/// Assembles `L_box + L_class + lambda * L_sparse` under `mask`.
fn assemble<T: Real>(
    g: &mut Graph<T>,
    mask: Var,
    pred: &PredictionVars,
    targets: &TargetSet,
    lambda_sparse: Option<f64>,
) -> Result<LossVars> {
    let aligned_f: f64 = g.value(mask).data().iter().map(|x| x.to_f64_lossy()).sum();
    let norm = aligned_f.max(1.0);
    let (lh, lo) = box_loss(g, mask, norm, pred, targets)?;
    let (lv, ln) = class_loss(g, mask, norm, pred, targets)?;
    let lbox = g.add(lh, lo)?;
    let lclass = g.add(lv, ln)?;
    let mut total = g.add(lbox, lclass)?;
    let mut l_sparse = 0.0;
    if let Some(lambda) = lambda_sparse {
        let ls = sparsity_loss(g, mask)?;
        l_sparse = scalar(g, ls);
        if lambda != 0.0 {
            let w = g.scale(ls, lambda)?;
            total = g.add(total, w)?;
        }
    }
    Ok(LossVars {
        total: Some(total),
        breakdown: LossBreakdown {
            l_box: scalar(g, lbox),
            l_human: scalar(g, lh),
            l_object: scalar(g, lo),
            l_class: scalar(g, lclass),
            l_verb: scalar(g, lv),
            l_noun: scalar(g, ln),
            l_sparse,
            total: scalar(g, total),
            aligned: aligned_f.round() as usize,
        },
    })
}

/// Weak-mode loss: samples an alignment and masks every term with it.
pub fn weak_loss<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    pred: &PredictionVars,
    targets: &TargetSet,
    align_cfg: &AlignConfig,
    lambda_sparse: f64,
    rng: &mut R,
) -> Result<(LossVars, Option<Alignment>)> {
    if targets.is_empty() {
        return Ok((LossVars { total: None, breakdown: LossBreakdown::default() }, None));
    }
    let a = align::align(g, pred, targets, align_cfg, rng)?;
    let loss = assemble(g, a.hard, pred, targets, Some(lambda_sparse))?;
    Ok((loss, Some(a)))
}

/// Hungarian assignment of targets to predictions under the cost
/// `1 - alpha_g GP - alpha_v VP`. Returns the prediction index per target.
pub fn strong_assignment<T: Real>(
    g: &mut Graph<T>,
    pred: &PredictionVars,
    targets: &TargetSet,
    align_cfg: &AlignConfig,
) -> Result<Vec<usize>> {
    let p = g.shape(pred.human)[0];
    if targets.len() > p {
        return Err(Error::TooManyTargets { targets: targets.len(), predictions: p });
    }
    let gp = align::geometric_prior(g, pred, targets, align_cfg.tau)?;
    let vp = align::visual_prior(g, pred, targets)?;
    let s = align::combine_scores(g, gp, vp, align_cfg)?;
    let sv = g.value(s);
    let t = targets.len();
    let cost: Vec<Vec<f64>> = (0..t)
        .map(|j| (0..p).map(|i| 1.0 - sv.data()[i * t + j].to_f64_lossy()).collect())
        .collect();
    Ok(min_cost_assignment(&cost))
}

/// Strong-mode loss: one-to-one matched pairs, no sparsity term.
pub fn strong_loss<T: Real>(
    g: &mut Graph<T>,
    pred: &PredictionVars,
    targets: &TargetSet,
    align_cfg: &AlignConfig,
) -> Result<(LossVars, Vec<usize>)> {
    if targets.is_empty() {
        return Ok((LossVars { total: None, breakdown: LossBreakdown::default() }, Vec::new()));
    }
    let assignment = strong_assignment(g, pred, targets, align_cfg)?;
    let (p, t) = (g.shape(pred.human)[0], targets.len());
    let mut m = Tensor::<T>::zeros(&[p, t]);
    for (j, &i) in assignment.iter().enumerate() {
        m.data_mut()[i * t + j] = T::one();
    }
    let mask = g.constant(m);
    Ok((assemble(g, mask, pred, targets, None)?, assignment))
}
