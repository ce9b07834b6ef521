//! Miniature encoder-decoder set-prediction network.
//!
//! Grid tokens go through an input projection, fixed 2-D sinusoidal position
//! codes and post-norm self-attention blocks. `P` learned queries decode the
//! token memory through alternating self- and cross-attention; four 2-layer
//! heads map each query feature to a human box, an object box, verb
//! probabilities (sigmoid) and a noun distribution (softmax).
//!
//! Parameter names are stable:
//!
//! ```text
//! input_proj.w / input_proj.b
//! enc.{l}.attn.h{k}.wq|wk|wv   enc.{l}.attn.wo|bo   enc.{l}.ln1.g|b
//! enc.{l}.mlp.l1.w|b  enc.{l}.mlp.l2.w|b  enc.{l}.ln2.g|b
//! queries
//! dec.{l}.self_attn.*  dec.{l}.cross_attn.*  dec.{l}.ln1|ln2|ln3.*  dec.{l}.mlp.*
//! head.{human,object,verb,noun}.l1.w|b  head.*.l2.w|b
//! ```

use ndtensor::{Bound, Graph, ParameterStore, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub input_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    /// Normalize sublayer inputs (plus one final norm per stack) instead of
    /// residual sums.
    pub pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            num_queries: 8,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            mlp_hidden: 128,
            dropout: 0.1,
            input_dim: 24,
            grid_h: 6,
            grid_w: 6,
            num_verbs: 4,
            num_nouns: 6,
            pre_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_queries", self.num_queries),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("input_dim", self.input_dim),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("num_verbs", self.num_verbs),
            ("num_nouns", self.num_nouns),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

pub const HEADS: [(&str, Activation); 4] = [
    ("human", Activation::Sigmoid),
    ("object", Activation::Sigmoid),
    ("verb", Activation::Sigmoid),
    ("noun", Activation::Softmax),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Softmax,
}

impl ModelConfig {
    fn head_out(&self, head: &str) -> usize {
        match head {
            "human" | "object" => 4,
            "verb" => self.num_verbs,
            _ => self.num_nouns,
        }
    }
}

struct Init<'a> {
    store: ParameterStore<f32>,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| self.rng.random_range(-bound..bound) as f32);
        self.store.insert(format!("{name}.w"), w)?;
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| self.rng.random_range(-bound..bound) as f32);
        self.store.insert(name, w)?;
        Ok(())
    }

    fn layernorm(&mut self, name: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{name}.g"), Tensor::ones(&[d]))?;
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[d]))?;
        Ok(())
    }

    fn attention(&mut self, name: &str, cfg: &ModelConfig) -> Result<()> {
        let (d, dk) = (cfg.d_model, cfg.head_dim());
        for h in 0..cfg.heads {
            for m in ["wq", "wk", "wv"] {
                self.matrix(&format!("{name}.h{h}.{m}"), d, dk)?;
            }
        }
        self.matrix(&format!("{name}.wo"), d, d)?;
        self.store.insert(format!("{name}.bo"), Tensor::zeros(&[d]))?;
        Ok(())
    }

    fn mlp(&mut self, name: &str, d: usize, hidden: usize, out: usize) -> Result<()> {
        self.linear(&format!("{name}.l1"), d, hidden, true)?;
        self.linear(&format!("{name}.l2"), hidden, out, true)
    }
}

/// Fresh parameters: fan-in-scaled uniform projections, unit layernorm
/// gains, zero biases, queries from N(0, 1/D).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[rng::TAG_INIT]);
    let mut init = Init {
        store: ParameterStore::new(),
        rng: &mut rng,
    };
    let d = cfg.d_model;
    init.linear("input_proj", cfg.input_dim, d, true)?;
    for l in 0..cfg.enc_layers {
        init.attention(&format!("enc.{l}.attn"), cfg)?;
        init.layernorm(&format!("enc.{l}.ln1"), d)?;
        init.mlp(&format!("enc.{l}.mlp"), d, cfg.mlp_hidden, d)?;
        init.layernorm(&format!("enc.{l}.ln2"), d)?;
    }
    if cfg.pre_norm {
        init.layernorm("enc.norm", d)?;
    }
    let std = 1.0 / (d as f64).sqrt();
    let q = Tensor::from_fn(&[cfg.num_queries, d], |_| {
        (std * init.rng.sample::<f64, _>(StandardNormal)) as f32
    });
    init.store.insert("queries", q)?;
    for l in 0..cfg.dec_layers {
        init.attention(&format!("dec.{l}.self_attn"), cfg)?;
        init.layernorm(&format!("dec.{l}.ln1"), d)?;
        init.attention(&format!("dec.{l}.cross_attn"), cfg)?;
        init.layernorm(&format!("dec.{l}.ln2"), d)?;
        init.mlp(&format!("dec.{l}.mlp"), d, cfg.mlp_hidden, d)?;
        init.layernorm(&format!("dec.{l}.ln3"), d)?;
    }
    if cfg.pre_norm {
        init.layernorm("dec.norm", d)?;
    }
    for (head, _) in HEADS {
        init.mlp(&format!("head.{head}"), d, d, cfg.head_out(head))?;
    }
    Ok(init.store)
}

/// Fixed 2-D sinusoidal position codes, `HW×D`. The first half of the
/// channels encodes the row, the second half the column.
pub fn positional_encoding<T: Real>(h: usize, w: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let two_pi = std::f64::consts::TAU;
    Tensor::from_fn(&[h * w, d], |k| {
        let (tok, ch) = (k / d, k % d);
        let (r, c) = (tok / w, tok % w);
        let (pos, ch, width) = if ch < half {
            ((r as f64 + 0.5) / h as f64 * two_pi, ch, half.max(1))
        } else {
            ((c as f64 + 0.5) / w as f64 * two_pi, ch - half, (d - half).max(1))
        };
        let i = (ch / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * i / width as f64);
        let v = if ch % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
        T::lit(v)
    })
}

/// Dropout masks drawn from a dedicated stream.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let scale = T::lit(1.0 / keep);
        let mask = Tensor::from_fn(g.shape(x), |_| {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        let m = g.constant(mask);
        Ok(g.mul(x, m)?)
    }
}

/// Model bound into one graph.
pub struct Net<'a, T: Real> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Bound,
    pub dropout: Option<&'a mut Dropout>,
    _marker: std::marker::PhantomData<T>,
}

/// Per-query output variables.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// P×4, sigmoid.
    pub human: Var,
    /// P×4, sigmoid.
    pub object: Var,
    /// P×V, sigmoid.
    pub verb: Var,
    /// P×N, softmax.
    pub noun: Var,
}

/// Concrete predictions for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T = f64> {
    pub human: Tensor<T>,
    pub object: Tensor<T>,
    pub verb: Tensor<T>,
    pub noun: Tensor<T>,
}

impl PredictionVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> PredictionSet<T> {
        PredictionSet {
            human: g.value(self.human).clone(),
            object: g.value(self.object).clone(),
            verb: g.value(self.verb).clone(),
            noun: g.value(self.noun).clone(),
        }
    }
}

impl<T: Real> PredictionSet<T> {
    pub fn num_predictions(&self) -> usize {
        self.human.shape()[0]
    }
}

pub struct DecodeOutput {
    /// P×D query features.
    pub features: Var,
    /// `[layer][head]` cross-attention maps, each P×HW.
    pub cross_attention: Vec<Vec<Var>>,
}

pub struct ForwardOutput {
    pub pred: PredictionVars,
    pub tokens: Var,
    pub decode: DecodeOutput,
}

pub fn grid_tensor<T: Real>(grid: &Grid) -> Tensor<T> {
    Tensor::from_fn(&[grid.h * grid.w, grid.d], |k| T::lit(grid.data[k] as f64))
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Bound, dropout: Option<&'a mut Dropout>) -> Self {
        Self {
            cfg,
            params,
            dropout,
            _marker: std::marker::PhantomData,
        }
    }

    fn p(&self, name: &str) -> Var {
        self.params.get(name)
    }

    fn drop(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self.dropout.as_deref_mut() {
            Some(d) => d.apply(g, x),
            None => Ok(x),
        }
    }

    fn linear(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.p(&format!("{name}.w")))?;
        Ok(g.add_row(y, self.p(&format!("{name}.b")))?)
    }

    fn layernorm(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let n = g.layernorm(x)?;
        let s = g.mul_row(n, self.p(&format!("{name}.g")))?;
        Ok(g.add_row(s, self.p(&format!("{name}.b")))?)
    }

    /// Sublayer input: normalized under pre-norm, unchanged otherwise.
    fn pre(&self, g: &mut Graph<T>, norm: &str, x: Var) -> Result<Var> {
        if self.cfg.pre_norm {
            self.layernorm(g, norm, x)
        } else {
            Ok(x)
        }
    }

    /// `x + dropout(y)`, normalized afterwards under post-norm.
    fn residual(&mut self, g: &mut Graph<T>, norm: &str, x: Var, y: Var) -> Result<Var> {
        let y = self.drop(g, y)?;
        let r = g.add(x, y)?;
        if self.cfg.pre_norm {
            Ok(r)
        } else {
            self.layernorm(g, norm, r)
        }
    }

    fn mlp(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, &format!("{name}.l1"), x)?;
        let h = g.relu(h)?;
        self.linear(g, &format!("{name}.l2"), h)
    }

    /// Multi-head scaled dot-product attention. Pushes each head's attention
    /// matrix to `maps` when given.
    fn attention(
        &self,
        g: &mut Graph<T>,
        name: &str,
        query: Var,
        key: Var,
        value: Var,
        mut maps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q = g.matmul(query, self.p(&format!("{name}.h{h}.wq")))?;
            let k = g.matmul(key, self.p(&format!("{name}.h{h}.wk")))?;
            let v = g.matmul(value, self.p(&format!("{name}.h{h}.wv")))?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, scale)?;
            let attn = g.softmax(logits)?;
            if let Some(m) = maps.as_deref_mut() {
                m.push(attn);
            }
            outs.push(g.matmul(attn, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let y = g.matmul(cat, self.p(&format!("{name}.wo")))?;
        Ok(g.add_row(y, self.p(&format!("{name}.bo")))?)
    }

    fn check_grid(&self, grid: &Tensor<T>) -> Result<()> {
        let expected = [self.cfg.tokens(), self.cfg.input_dim];
        if grid.shape() != expected {
            return Err(Error::Config(format!(
                "grid shape {:?} does not match model (tokens×input_dim) {:?}",
                grid.shape(),
                expected
            )));
        }
        Ok(())
    }

    /// `HW×D_in` grid → `HW×D` tokens. Returns `(tokens, position codes)`.
    pub fn encode(&mut self, g: &mut Graph<T>, grid: &Tensor<T>) -> Result<(Var, Var)> {
        self.check_grid(grid)?;
        let cfg = self.cfg;
        let input = g.constant(grid.clone());
        let pos = g.constant(positional_encoding(cfg.grid_h, cfg.grid_w, cfg.d_model));
        let mut x = self.linear(g, "input_proj", input)?;
        for l in 0..cfg.enc_layers {
            let h = self.pre(g, &format!("enc.{l}.ln1"), x)?;
            let qk = g.add(h, pos)?;
            let a = self.attention(g, &format!("enc.{l}.attn"), qk, qk, h, None)?;
            x = self.residual(g, &format!("enc.{l}.ln1"), x, a)?;
            let h = self.pre(g, &format!("enc.{l}.ln2"), x)?;
            let f = self.mlp(g, &format!("enc.{l}.mlp"), h)?;
            x = self.residual(g, &format!("enc.{l}.ln2"), x, f)?;
        }
        if cfg.pre_norm {
            x = self.layernorm(g, "enc.norm", x)?;
        }
        Ok((x, pos))
    }

    /// Decodes `P` queries against the token memory.
    pub fn decode(&mut self, g: &mut Graph<T>, memory: Var, pos: Var) -> Result<DecodeOutput> {
        let cfg = self.cfg;
        if g.shape(memory) != [cfg.tokens(), cfg.d_model] {
            return Err(Error::Config(format!(
                "memory shape {:?} does not match model",
                g.shape(memory)
            )));
        }
        let queries = self.p("queries");
        let keys = g.add(memory, pos)?;
        let mut tgt = g.constant(Tensor::zeros(&[cfg.num_queries, cfg.d_model]));
        let mut maps = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let h = self.pre(g, &format!("dec.{l}.ln1"), tgt)?;
            let q = g.add(h, queries)?;
            let a = self.attention(g, &format!("dec.{l}.self_attn"), q, q, h, None)?;
            tgt = self.residual(g, &format!("dec.{l}.ln1"), tgt, a)?;

            let h = self.pre(g, &format!("dec.{l}.ln2"), tgt)?;
            let q = g.add(h, queries)?;
            let mut layer_maps = Vec::with_capacity(cfg.heads);
            let a = self.attention(g, &format!("dec.{l}.cross_attn"), q, keys, memory, Some(&mut layer_maps))?;
            maps.push(layer_maps);
            tgt = self.residual(g, &format!("dec.{l}.ln2"), tgt, a)?;

            let h = self.pre(g, &format!("dec.{l}.ln3"), tgt)?;
            let f = self.mlp(g, &format!("dec.{l}.mlp"), h)?;
            tgt = self.residual(g, &format!("dec.{l}.ln3"), tgt, f)?;
        }
        if cfg.pre_norm {
            tgt = self.layernorm(g, "dec.norm", tgt)?;
        }
        Ok(DecodeOutput {
            features: tgt,
            cross_attention: maps,
        })
    }

    /// Four 2-layer heads over `P×D` features.
    pub fn classify(&mut self, g: &mut Graph<T>, x: Var) -> Result<PredictionVars> {
        let mut outs = [x; 4];
        for (slot, (head, act)) in outs.iter_mut().zip(HEADS) {
            let logits = self.mlp(g, &format!("head.{head}"), x)?;
            *slot = match act {
                Activation::Sigmoid => g.sigmoid(logits)?,
                Activation::Softmax => g.softmax(logits)?,
            };
        }
        Ok(PredictionVars {
            human: outs[0],
            object: outs[1],
            verb: outs[2],
            noun: outs[3],
        })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, grid: &Tensor<T>) -> Result<ForwardOutput> {
        let (tokens, pos) = self.encode(g, grid)?;
        let decode = self.decode(g, tokens, pos)?;
        let pred = self.classify(g, decode.features)?;
        Ok(ForwardOutput { pred, tokens, decode })
    }
}

/// Inference on one grid without gradient recording.
pub fn predict(cfg: &ModelConfig, params: &ParameterStore<f32>, grid: &Grid) -> Result<PredictionSet<f64>> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false);
    let mut net = Net::new(cfg, &bound, None);
    let out = net.forward(&mut g, &grid_tensor(grid))?;
    let p = out.pred.values(&g);
    Ok(PredictionSet {
        human: p.human.cast(),
        object: p.object.cast(),
        verb: p.verb.cast(),
        noun: p.noun.cast(),
    })
}
