//! Attention and MLP sublayers and the two ways of composing them into a
//! transformer layer.
//!
//! The sequential layer applies the attention residual and then the MLP
//! residual (a Lie-Trotter split of `dX/dt = F(X) + G(X, X)`). The parallel
//! layer evaluates both branches on the same input and adds their sum once,
//! which is a single forward-Euler step of that ODE with unit step.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    Sequential,
    Parallel,
}

/// Where layer normalization sits.
///
/// For the parallel layer:
/// * `A`: one shared pre-norm feeding both branches, `X + F(n(X)) + G(n(X))`.
/// * `B`: one pre-norm per branch, `X + F(n1(X)) + G(n0(X))`.
/// * `C`: post-norm, `n(X + F(X) + G(X))`.
///
/// The sequential layer has two norms for `A`/`B` (pre-norm before each
/// sublayer) and two post-norms for `C`. `None` is the raw residual equations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormVariant {
    #[serde(rename = "none")]
    None,
    A,
    B,
    C,
}

impl NormVariant {
    pub fn norm_count(self, variant: BlockVariant) -> usize {
        match (variant, self) {
            (_, NormVariant::None) => 0,
            (BlockVariant::Sequential, _) => 2,
            (BlockVariant::Parallel, NormVariant::A | NormVariant::C) => 1,
            (BlockVariant::Parallel, NormVariant::B) => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub variant: BlockVariant,
    pub norm: NormVariant,
    pub dropout_p: f64,
    pub stoch_depth_p: f64,
    pub training: bool,
    pub causal: bool,
}

impl BlockConfig {
    pub fn new(variant: BlockVariant, norm: NormVariant) -> Self {
        Self { variant, norm, dropout_p: 0.0, stoch_depth_p: 0.0, training: false, causal: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout_p)));
        }
        if !(0.0..1.0).contains(&self.stoch_depth_p) {
            return Err(Error::Config(format!("stochastic depth rate {} not in [0, 1)", self.stoch_depth_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Var> {
    pub heads: usize,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = Var> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = Var> {
    pub gamma: T,
    pub beta: T,
}

/// One layer's weights. Query/key/value matrices hold all heads side by side:
/// head `h` owns columns `h*d/H .. (h+1)*d/H`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Var> {
    pub attn: AttentionParams<T>,
    pub mlp: MlpParams<T>,
    pub norms: Vec<NormParams<T>>,
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            heads: self.heads,
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }

    fn fields(&self) -> [(&'static str, &T); 8] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 8] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ]
    }
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams { gamma: f(&self.gamma), beta: f(&self.beta) }
    }
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            attn: self.attn.map(f),
            mlp: self.mlp.map(f),
            norms: self.norms.iter().map(|n| n.map(f)).collect(),
        }
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (name, t) in self.attn.fields() {
            out.push((format!("{prefix}attn.{name}"), t));
        }
        let m = &self.mlp;
        for (name, t) in [("w1", &m.w1), ("b1", &m.b1), ("w2", &m.w2), ("b2", &m.b2)] {
            out.push((format!("{prefix}mlp.{name}"), t));
        }
        for (i, n) in self.norms.iter().enumerate() {
            out.push((format!("{prefix}norm{i}.gamma"), &n.gamma));
            out.push((format!("{prefix}norm{i}.beta"), &n.beta));
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        for (name, t) in self.attn.fields_mut() {
            out.push((format!("{prefix}attn.{name}"), t));
        }
        let m = &mut self.mlp;
        for (name, t) in [("w1", &mut m.w1), ("b1", &mut m.b1), ("w2", &mut m.w2), ("b2", &mut m.b2)] {
            out.push((format!("{prefix}mlp.{name}"), t));
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            out.push((format!("{prefix}norm{i}.gamma"), &mut n.gamma));
            out.push((format!("{prefix}norm{i}.beta"), &mut n.beta));
        }
    }
}

/// Dimensions of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub norms: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_dim == 0 {
            return Err(Error::Config(format!("zero dimension in {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide model dim {}", self.heads, self.dim)));
        }
        Ok(())
    }
}

impl BlockParams<Tensor> {
    /// Truncated-normal projections, zero biases, unit/zero norm affine.
    pub fn init(dims: BlockDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let BlockDims { dim: d, heads, mlp_dim: f, norms } = dims;
        let mut w = |r: usize, c: usize| Tensor::trunc_normal([r, c], INIT_STD, rng);
        let attn = AttentionParams {
            heads,
            wq: w(d, d),
            bq: Tensor::zeros([d]),
            wk: w(d, d),
            bk: Tensor::zeros([d]),
            wv: w(d, d),
            bv: Tensor::zeros([d]),
            wo: w(d, d),
            bo: Tensor::zeros([d]),
        };
        let mlp = MlpParams { w1: w(d, f), b1: Tensor::zeros([f]), w2: w(f, d), b2: Tensor::zeros([d]) };
        let norms = (0..norms).map(|_| NormParams { gamma: Tensor::ones([d]), beta: Tensor::zeros([d]) }).collect();
        Ok(Self { attn, mlp, norms })
    }

    /// Every entry uniform in `[-scale, scale]`; norm gains are `1 + U(-scale, scale)`.
    /// Used for gradient checks and property tests where tiny init would hide bugs.
    pub fn random(dims: BlockDims, scale: f64, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let BlockDims { dim: d, heads, mlp_dim: f, norms } = dims;
        let mut u = |shape: &[usize]| Tensor::uniform(shape.to_vec(), -scale, scale, rng);
        let attn = AttentionParams {
            heads,
            wq: u(&[d, d]),
            bq: u(&[d]),
            wk: u(&[d, d]),
            bk: u(&[d]),
            wv: u(&[d, d]),
            bv: u(&[d]),
            wo: u(&[d, d]),
            bo: u(&[d]),
        };
        let mlp = MlpParams { w1: u(&[d, f]), b1: u(&[f]), w2: u(&[f, d]), b2: u(&[d]) };
        let norms = (0..norms).map(|_| NormParams { gamma: u(&[d]).map(|v| 1.0 + v), beta: u(&[d]) }).collect();
        Ok(Self { attn, mlp, norms })
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            dim: self.attn.wq.shape()[0],
            heads: self.attn.heads,
            mlp_dim: self.mlp.w1.shape()[1],
            norms: self.norms.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.named("", &mut v);
        v.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zeroes both branch outputs (`Wo`, `bo`, `W2`, `b2`).
    pub fn zero_branch_outputs(&mut self) {
        for t in [&mut self.attn.wo, &mut self.attn.bo, &mut self.mlp.w2, &mut self.mlp.b2] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Multiplies both branch outputs by `eps`, scaling the layer's vector field by `eps`.
    pub fn scale_branch_outputs(&mut self, eps: f64) {
        for t in [&mut self.attn.wo, &mut self.attn.bo, &mut self.mlp.w2, &mut self.mlp.b2] {
            t.data_mut().iter_mut().for_each(|v| *v *= eps);
        }
    }

    /// Records every tensor as a grad-enabled leaf.
    pub fn bind(&self, tape: &mut Tape) -> BlockParams<Var> {
        self.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    /// Records every tensor as a constant.
    pub fn bind_const(&self, tape: &mut Tape) -> BlockParams<Var> {
        self.map(&mut |t: &Tensor| tape.constant(t.clone()))
    }
}

/// Inverted dropout: zero each entry with probability `p`, scale survivors by `1/(1-p)`.
/// Identity when `p == 0` or no RNG is supplied.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let numel = shape.iter().product();
    let mask: Vec<f64> = (0..numel).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, x: Var, p: &NormParams) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, LN_EPS)
}

/// Multi-head dot-product attention `G(·, X)` over all positions of `x[L×d]`.
/// No residual. `dropout_p` applies to attention probabilities and to the
/// projected output when an RNG is supplied.
pub fn attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    causal: bool,
    dropout_p: f64,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!("{} heads do not divide model dim {d}", p.heads)));
    }
    let dh = d / p.heads;
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores, causal)?;
        let probs = dropout(tape, probs, dropout_p, rng.as_deref_mut())?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let out = linear(tape, cat, p.wo, p.bo)?;
    dropout(tape, out, dropout_p, rng)
}

/// Position-wise MLP `F`: `gelu(x·W1 + b1)·W2 + b2`. No residual.
pub fn mlp(tape: &mut Tape, x: Var, p: &MlpParams, dropout_p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let h = linear(tape, x, p.w1, p.b1)?;
    let h = tape.gelu(h);
    let out = linear(tape, h, p.w2, p.b2)?;
    dropout(tape, out, dropout_p, rng)
}

fn check_norms(p: &BlockParams, cfg: &BlockConfig) -> Result<()> {
    let want = cfg.norm.norm_count(cfg.variant);
    if p.norms.len() != want {
        return Err(Error::Config(format!(
            "{:?}/{:?} needs {want} norm parameter sets, params carry {}",
            cfg.variant,
            cfg.norm,
            p.norms.len()
        )));
    }
    Ok(())
}

fn drop_p(cfg: &BlockConfig) -> f64 {
    if cfg.training {
        cfg.dropout_p
    } else {
        0.0
    }
}

fn residual(tape: &mut Tape, x: Var, update: Var, scale: f64) -> Result<Var> {
    let update = if scale == 1.0 { update } else { tape.scale(update, scale) };
    tape.add(x, update)
}

/// The combined branch output of a parallel layer, before the residual add
/// and before any post-norm. This is the layer's vector field.
pub fn parallel_update(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    cfg: &BlockConfig,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    check_norms(p, cfg)?;
    let dp = drop_p(cfg);
    let (attn_in, mlp_in) = match cfg.norm {
        NormVariant::None | NormVariant::C => (x, x),
        NormVariant::A => {
            let y = norm(tape, x, &p.norms[0])?;
            (y, y)
        }
        NormVariant::B => (norm(tape, x, &p.norms[0])?, norm(tape, x, &p.norms[1])?),
    };
    let g = attention(tape, attn_in, &p.attn, cfg.causal, dp, rng.as_deref_mut())?;
    let f = mlp(tape, mlp_in, &p.mlp, dp, rng)?;
    tape.add(g, f)
}

/// Post-step map of a parallel layer: the post-norm for variant `C`, identity otherwise.
pub fn parallel_projection(tape: &mut Tape, x: Var, p: &BlockParams, cfg: &BlockConfig) -> Result<Var> {
    match cfg.norm {
        NormVariant::C => norm(tape, x, &p.norms[0]),
        _ => Ok(x),
    }
}

/// `X + F(X) + G(X, X)` with the configured norm placement. `update_scale`
/// multiplies the combined branch output (stochastic-depth compensation).
pub fn parallel_block_scaled(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    cfg: &BlockConfig,
    update_scale: f64,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let u = parallel_update(tape, x, p, cfg, rng)?;
    let y = residual(tape, x, u, update_scale)?;
    parallel_projection(tape, y, p, cfg)
}

pub fn parallel_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    cfg: &BlockConfig,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    parallel_block_scaled(tape, x, p, cfg, 1.0, rng)
}

/// Attention residual then MLP residual.
pub fn sequential_block_scaled(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    cfg: &BlockConfig,
    update_scale: f64,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    check_norms(p, cfg)?;
    let dp = drop_p(cfg);
    match cfg.norm {
        NormVariant::None => {
            let g = attention(tape, x, &p.attn, cfg.causal, dp, rng.as_deref_mut())?;
            let y = residual(tape, x, g, update_scale)?;
            let f = mlp(tape, y, &p.mlp, dp, rng)?;
            residual(tape, y, f, update_scale)
        }
        NormVariant::A | NormVariant::B => {
            let xn = norm(tape, x, &p.norms[0])?;
            let g = attention(tape, xn, &p.attn, cfg.causal, dp, rng.as_deref_mut())?;
            let y = residual(tape, x, g, update_scale)?;
            let yn = norm(tape, y, &p.norms[1])?;
            let f = mlp(tape, yn, &p.mlp, dp, rng)?;
            residual(tape, y, f, update_scale)
        }
        NormVariant::C => {
            let g = attention(tape, x, &p.attn, cfg.causal, dp, rng.as_deref_mut())?;
            let y = residual(tape, x, g, update_scale)?;
            let y = norm(tape, y, &p.norms[0])?;
            let f = mlp(tape, y, &p.mlp, dp, rng)?;
            let z = residual(tape, y, f, update_scale)?;
            norm(tape, z, &p.norms[1])
        }
    }
}

pub fn sequential_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    cfg: &BlockConfig,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    sequential_block_scaled(tape, x, p, cfg, 1.0, rng)
}

/// Outcome of the stochastic-depth draw for one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthGate {
    pub keep: bool,
    /// Multiplier for the residual update when kept: `1 / survival`.
    pub scale: f64,
}

/// Survival probability `1 - p·m/(D-1)` for layer `m` of `D`.
pub fn survival_probability(layer: usize, depth: usize, p: f64) -> f64 {
    if depth <= 1 {
        1.0
    } else {
        1.0 - p * layer as f64 / (depth - 1) as f64
    }
}

/// Linear-decay stochastic depth. In evaluation mode every layer is kept unscaled.
pub fn stochastic_depth_gate(layer: usize, depth: usize, p: f64, training: bool, rng: Option<&mut Rng>) -> DepthGate {
    let keep_all = DepthGate { keep: true, scale: 1.0 };
    let Some(rng) = rng else { return keep_all };
    if !training || p <= 0.0 {
        return keep_all;
    }
    let survival = survival_probability(layer, depth, p);
    if rng.random::<f64>() < survival {
        DepthGate { keep: true, scale: 1.0 / survival }
    } else {
        DepthGate { keep: false, scale: 0.0 }
    }
}

/// Position of a layer in the stack, for stochastic depth.
#[derive(Clone, Copy, Debug)]
pub struct LayerPos {
    pub index: usize,
    pub depth: usize,
}

/// One layer with the configured composition, norm placement, dropout and
/// stochastic depth. Evaluation mode turns every regularizer into the identity.
pub fn apply_block(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams,
    cfg: &BlockConfig,
    pos: LayerPos,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    cfg.validate()?;
    let gate = stochastic_depth_gate(pos.index, pos.depth, cfg.stoch_depth_p, cfg.training, rng.as_deref_mut());
    if !gate.keep {
        return Ok(x);
    }
    match cfg.variant {
        BlockVariant::Sequential => sequential_block_scaled(tape, x, p, cfg, gate.scale, rng),
        BlockVariant::Parallel => parallel_block_scaled(tape, x, p, cfg, gate.scale, rng),
    }
}
