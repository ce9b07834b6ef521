//! Alignment layer: scores every (prediction, target) pair from geometric and
//! visual agreement, then samples a hard 0/1 alignment with a straight-through
//! gradient.

use ndtensor::{Graph, Real, Tensor, Var};
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionVars;
use crate::targets::TargetSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Difference of two Gumbel(0,1) draws, i.e. Logistic(0,1).
    Logistic,
    /// A single Gumbel(0,1) draw.
    Gumbel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub alpha_g: f64,
    pub alpha_v: f64,
    pub tau: f64,
    pub delta: f64,
    pub temperature: f64,
    pub noise: bool,
    pub noise_kind: NoiseKind,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            alpha_g: 0.5,
            alpha_v: 0.5,
            tau: 1.0,
            delta: 0.5,
            temperature: 1.0,
            noise: true,
            noise_kind: NoiseKind::Logistic,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_g >= 0.0 && self.alpha_v >= 0.0) || (self.alpha_g + self.alpha_v - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "align.alpha_g + align.alpha_v must equal 1 with both >= 0 (got {} + {})",
                self.alpha_g, self.alpha_v
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("align.tau must be positive (got {})", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("align.delta must lie in (0, 1) (got {})", self.delta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "align.temperature must be positive (got {})",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// P×T matrix of `sum_c |pred[i,c] - target[j,c]|` for P×C predictions and
/// T×C targets.
pub fn pairwise_l1<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let p = g.shape(pred)[0];
    let (t, c) = (target.outer(), target.last_dim());
    let expand = g.constant(Tensor::from_fn(&[p * t, p], |k| {
        if (k / p) / t == k % p {
            T::one()
        } else {
            T::zero()
        }
    }));
    let tiled = g.constant(Tensor::from_fn(&[p * t, c], |k| target.data()[((k / c) % t) * c + k % c]));
    let rep = g.matmul(expand, pred)?;
    let diff = g.sub(rep, tiled)?;
    let abs = g.abs(diff)?;
    let summed = g.sum_lastdim(abs)?;
    Ok(g.reshape(summed, &[p, t])?)
}

/// `GP[i,j] = exp(-(|h'_i - h_j|_1 + |o'_i - o_j|_1) / tau)`.
pub fn geometric_prior<T: Real>(g: &mut Graph<T>, pred: &PredictionVars, targets: &TargetSet, tau: f64) -> Result<Var> {
    let dh = pairwise_l1(g, pred.human, &targets.human_matrix())?;
    let dobj = pairwise_l1(g, pred.object, &targets.object_matrix())?;
    let d = g.add(dh, dobj)?;
    let scaled = g.scale(d, -1.0 / tau)?;
    Ok(g.exp(scaled)?)
}

/// `VP = v' v^T + n' n^T`.
pub fn visual_prior<T: Real>(g: &mut Graph<T>, pred: &PredictionVars, targets: &TargetSet) -> Result<Var> {
    let (pv, pn) = (g.shape(pred.verb)[1], g.shape(pred.noun)[1]);
    if pv != targets.num_verbs || pn != targets.num_nouns {
        return Err(Error::VocabMismatch(format!(
            "predictions have {pv} verbs/{pn} nouns, targets {}/{}",
            targets.num_verbs, targets.num_nouns
        )));
    }
    let vt = g.constant(transposed(&targets.verb_matrix()));
    let nt = g.constant(transposed(&targets.noun_matrix()));
    let v = g.matmul(pred.verb, vt)?;
    let n = g.matmul(pred.noun, nt)?;
    Ok(g.add(v, n)?)
}

pub(crate) fn transposed<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.outer(), t.last_dim());
    Tensor::from_fn(&[c, r], |k| t.data()[(k % r) * c + k / r])
}

/// `S = alpha_g GP + alpha_v VP`.
pub fn combine_scores<T: Real>(g: &mut Graph<T>, gp: Var, vp: Var, cfg: &AlignConfig) -> Result<Var> {
    let a = g.scale(gp, cfg.alpha_g)?;
    let b = g.scale(vp, cfg.alpha_v)?;
    Ok(g.add(a, b)?)
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Noise tensor of the given shape, scaled by `temperature`.
pub fn sample_noise<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    rng: &mut R,
    temperature: f64,
    kind: NoiseKind,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let g = match kind {
            NoiseKind::Logistic => gumbel(rng) - gumbel(rng),
            NoiseKind::Gumbel => gumbel(rng),
        };
        T::lit(temperature * g)
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Discretized {
    /// `sigmoid((S + G) / temperature)`.
    pub soft: Var,
    /// `soft >= delta` in the forward pass, identity gradient to `soft`.
    pub hard: Var,
}

pub fn discretize<T: Real>(
    g: &mut Graph<T>,
    scores: Var,
    noise: Option<&Tensor<T>>,
    cfg: &AlignConfig,
) -> Result<Discretized> {
    let mut x = scores;
    if let Some(n) = noise {
        let n = g.constant(n.clone());
        x = g.add(x, n)?;
    }
    if cfg.temperature != 1.0 {
        x = g.scale(x, 1.0 / cfg.temperature)?;
    }
    let soft = g.sigmoid(x)?;
    let hard = g.straight_through(soft, cfg.delta)?;
    Ok(Discretized { soft, hard })
}

#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub geometric: Var,
    pub visual: Var,
    pub scores: Var,
    pub soft: Var,
    pub hard: Var,
}

/// Full alignment for one scene. `rng` supplies the noise when it is enabled.
pub fn align<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    pred: &PredictionVars,
    targets: &TargetSet,
    cfg: &AlignConfig,
    rng: &mut R,
) -> Result<Alignment> {
    let geometric = geometric_prior(g, pred, targets, cfg.tau)?;
    let visual = visual_prior(g, pred, targets)?;
    let scores = combine_scores(g, geometric, visual, cfg)?;
    let noise = cfg
        .noise
        .then(|| sample_noise::<T, R>(g.shape(scores), rng, cfg.temperature, cfg.noise_kind));
    let Discretized { soft, hard } = discretize(g, scores, noise.as_ref(), cfg)?;
    Ok(Alignment {
        geometric,
        visual,
        scores,
        soft,
        hard,
    })
}
