//! Full models: a stack of `D` layers drawing on `k` independent parameter
//! sets, with either a patch-embedding image classifier or a decoder-only
//! language-model front and back end.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{
    apply_block, stochastic_depth_gate, BlockConfig, BlockDims, BlockParams, BlockVariant, LayerPos, NormParams,
    NormVariant, INIT_STD, LN_EPS,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::integrators::{rk4_step_scaled, BlockField, Scheme};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    DeitTi,
    NlpSmall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classify { channels: usize, image_size: usize, patch_size: usize, classes: usize },
    Lm { vocab: usize, max_len: usize },
}

impl Task {
    pub fn is_lm(&self) -> bool {
        matches!(self, Task::Lm { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub depth: usize,
    pub independent_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub variant: BlockVariant,
    pub norm: NormVariant,
    pub scheme: Scheme,
    pub dropout_p: f64,
    pub stoch_depth_p: f64,
    pub task: Task,
    #[serde(default)]
    pub preset: Option<Preset>,
}

/// Encoder/decoder sizes of the small translation model. Translation itself is
/// not implemented; kept for reference next to the other presets.
pub struct TranslationSmall;

impl TranslationSmall {
    pub const EMBED_DIM: usize = 128;
    pub const FFN_DIM: usize = 512;
    pub const ENCODER_HEADS: usize = 2;
    pub const DECODER_HEADS: usize = 2;
}

impl NetworkConfig {
    /// DeiT-Ti shape: 12 layers, width 192, 3 heads, MLP ratio 4, parallel layers with norm `A`.
    pub fn deit_ti(classes: usize, image_size: usize, patch_size: usize) -> Self {
        Self {
            depth: 12,
            independent_layers: 12,
            dim: 192,
            heads: 3,
            mlp_dim: 768,
            variant: BlockVariant::Parallel,
            norm: NormVariant::A,
            scheme: Scheme::Euler,
            dropout_p: 0.0,
            stoch_depth_p: 0.0,
            task: Task::Classify { channels: 3, image_size, patch_size, classes },
            preset: Some(Preset::DeitTi),
        }
    }

    /// Small decoder LM: width 128, FFN 512, 2 heads, 6 layers, byte vocabulary.
    pub fn nlp_small(vocab: usize, max_len: usize) -> Self {
        Self {
            depth: 6,
            independent_layers: 6,
            dim: 128,
            heads: 2,
            mlp_dim: 512,
            variant: BlockVariant::Parallel,
            norm: NormVariant::A,
            scheme: Scheme::Euler,
            dropout_p: 0.0,
            stoch_depth_p: 0.0,
            task: Task::Lm { vocab, max_len },
            preset: Some(Preset::NlpSmall),
        }
    }

    /// CPU-sized classifier for the synthetic patterned-patch task (32×32×3, patch 4, 10 classes).
    pub fn desk_classify() -> Self {
        Self {
            depth: 2,
            independent_layers: 2,
            dim: 32,
            heads: 2,
            mlp_dim: 64,
            task: Task::Classify { channels: 3, image_size: 32, patch_size: 4, classes: 10 },
            preset: None,
            ..Self::deit_ti(10, 32, 4)
        }
    }

    /// CPU-sized byte-level language model.
    pub fn desk_lm(max_len: usize) -> Self {
        Self {
            depth: 2,
            independent_layers: 2,
            dim: 64,
            heads: 2,
            mlp_dim: 128,
            preset: None,
            ..Self::nlp_small(256, max_len)
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims { dim: self.dim, heads: self.heads, mlp_dim: self.mlp_dim, norms: self.norm.norm_count(self.variant) }
    }

    pub fn block_config(&self, training: bool) -> BlockConfig {
        BlockConfig {
            variant: self.variant,
            norm: self.norm,
            dropout_p: self.dropout_p,
            stoch_depth_p: self.stoch_depth_p,
            training,
            causal: self.task.is_lm(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        share_map(self.depth, self.independent_layers)?;
        self.block_dims().validate()?;
        self.block_config(false).validate()?;
        if self.scheme == Scheme::Rk4 && self.variant != BlockVariant::Parallel {
            return Err(Error::Config(
                "rk4 integrates the parallel layer's vector field; use --variant parallel".into(),
            ));
        }
        match self.task {
            Task::Classify { channels, image_size, patch_size, classes } => {
                if channels == 0 || classes == 0 || patch_size == 0 || image_size == 0 {
                    return Err(Error::Config("zero-sized image task".into()));
                }
                if image_size % patch_size != 0 {
                    return Err(Error::Config(format!(
                        "image size {image_size} not divisible by patch size {patch_size}"
                    )));
                }
            }
            Task::Lm { vocab, max_len } => {
                if vocab == 0 || max_len == 0 {
                    return Err(Error::Config("zero-sized language-model task".into()));
                }
            }
        }
        Ok(())
    }

    /// Output width of the head: classes or vocabulary.
    pub fn outputs(&self) -> usize {
        match self.task {
            Task::Classify { classes, .. } => classes,
            Task::Lm { vocab, .. } => vocab,
        }
    }
}

/// Layer `m` of `depth` uses parameter set `floor(m·k/depth)`: consecutive runs
/// of `depth/k` layers share one set.
pub fn share_map(depth: usize, independent: usize) -> Result<Vec<usize>> {
    if independent == 0 || independent > depth || !depth.is_multiple_of(independent) {
        return Err(Error::Config(format!(
            "independent layers {independent} must divide depth {depth} and lie in 1..={depth}"
        )));
    }
    Ok((0..depth).map(|m| m * independent / depth).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Embedding<T = Var> {
    /// Patch projection (a strided convolution written as a matmul), class token,
    /// learned positions for the class token plus every patch.
    Patch { proj_w: T, proj_b: T, cls: T, pos: T },
    /// Token table and learned positions.
    Token { table: T, pos: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = Var> {
    pub embed: Embedding<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: NormParams<T>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> NetworkParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NetworkParams<U> {
        let embed = match &self.embed {
            Embedding::Patch { proj_w, proj_b, cls, pos } => {
                Embedding::Patch { proj_w: f(proj_w), proj_b: f(proj_b), cls: f(cls), pos: f(pos) }
            }
            Embedding::Token { table, pos } => Embedding::Token { table: f(table), pos: f(pos) },
        };
        NetworkParams {
            embed,
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// All parameters with stable names, each shared set listed once.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        match &self.embed {
            Embedding::Patch { proj_w, proj_b, cls, pos } => {
                out.push(("embed.proj_w".to_string(), proj_w));
                out.push(("embed.proj_b".to_string(), proj_b));
                out.push(("embed.cls".to_string(), cls));
                out.push(("embed.pos".to_string(), pos));
            }
            Embedding::Token { table, pos } => {
                out.push(("embed.table".to_string(), table));
                out.push(("embed.pos".to_string(), pos));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("set{i}."), &mut out);
        }
        out.push(("final_norm.gamma".to_string(), &self.final_norm.gamma));
        out.push(("final_norm.beta".to_string(), &self.final_norm.beta));
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        match &mut self.embed {
            Embedding::Patch { proj_w, proj_b, cls, pos } => {
                out.push(("embed.proj_w".to_string(), proj_w));
                out.push(("embed.proj_b".to_string(), proj_b));
                out.push(("embed.cls".to_string(), cls));
                out.push(("embed.pos".to_string(), pos));
            }
            Embedding::Token { table, pos } => {
                out.push(("embed.table".to_string(), table));
                out.push(("embed.pos".to_string(), pos));
            }
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.named_mut(&format!("set{i}."), &mut out);
        }
        out.push(("final_norm.gamma".to_string(), &mut self.final_norm.gamma));
        out.push(("final_norm.beta".to_string(), &mut self.final_norm.beta));
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }
}

impl NetworkParams<Tensor> {
    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t: &Tensor| Tensor::zeros(t.shape().to_vec()))
    }

    /// `self += other`, entry by entry.
    pub fn add_assign(&mut self, other: &NetworkParams<Tensor>) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for (_, a) in self.named_mut() {
            a.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// One training or evaluation example.
#[derive(Clone, Copy, Debug)]
pub enum Sample<'a> {
    Image { pixels: &'a [f64], label: usize },
    Tokens { input: &'a [usize], targets: &'a [usize] },
}

/// Loss, logits and parameter gradient of one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: NetworkParams<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    share_map: Vec<usize>,
    pub params: NetworkParams<Tensor>,
}

/// Splits a `C×S×S` image into `(S/p)²` patches in row-major scan order; each
/// patch is flattened channel-major then row-major, `(c, dy, dx)`.
pub fn patchify(pixels: &[f64], channels: usize, size: usize, patch: usize) -> Result<Tensor> {
    if pixels.len() != channels * size * size {
        return Err(Error::Input(format!("image has {} values, expected {channels}x{size}x{size}", pixels.len())));
    }
    if patch == 0 || !size.is_multiple_of(patch) {
        return Err(Error::Input(format!("image size {size} not divisible by patch size {patch}")));
    }
    let grid = size / patch;
    let width = channels * patch * patch;
    let mut data = Vec::with_capacity(grid * grid * width);
    for py in 0..grid {
        for px in 0..grid {
            for c in 0..channels {
                for dy in 0..patch {
                    let row = (c * size + py * patch + dy) * size + px * patch;
                    data.extend_from_slice(&pixels[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([grid * grid, width], data)
}

impl Network {
    /// Initializes parameters deterministically from `seed`.
    pub fn build(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let embed = match cfg.task {
            Task::Classify { channels, image_size, patch_size, .. } => {
                let patches = (image_size / patch_size) * (image_size / patch_size);
                Embedding::Patch {
                    proj_w: Tensor::trunc_normal([channels * patch_size * patch_size, d], INIT_STD, &mut rng),
                    proj_b: Tensor::zeros([d]),
                    cls: Tensor::trunc_normal([1, d], INIT_STD, &mut rng),
                    pos: Tensor::trunc_normal([patches + 1, d], INIT_STD, &mut rng),
                }
            }
            Task::Lm { vocab, max_len } => Embedding::Token {
                table: Tensor::trunc_normal([vocab, d], INIT_STD, &mut rng),
                pos: Tensor::trunc_normal([max_len, d], INIT_STD, &mut rng),
            },
        };
        let blocks = (0..cfg.independent_layers)
            .map(|_| BlockParams::init(cfg.block_dims(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let params = NetworkParams {
            embed,
            blocks,
            final_norm: NormParams { gamma: Tensor::ones([d]), beta: Tensor::zeros([d]) },
            head_w: Tensor::trunc_normal([d, cfg.outputs()], INIT_STD, &mut rng),
            head_b: Tensor::zeros([cfg.outputs()]),
        };
        Self::with_params(cfg, params)
    }

    /// Assembles a network from existing parameters, checking every shape.
    pub fn with_params(cfg: NetworkConfig, params: NetworkParams<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let share_map = share_map(cfg.depth, cfg.independent_layers)?;
        let net = Self { cfg, share_map, params };
        let template = net.shape_template();
        let got = net.params.named();
        let want = template.named();
        if got.len() != want.len() {
            return Err(Error::Config(format!("expected {} parameter tensors, got {}", want.len(), got.len())));
        }
        for ((name, t), (wname, shape)) in got.iter().zip(&want) {
            if name != wname || t.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {wname} with {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(net)
    }

    fn shape_template(&self) -> NetworkParams<Vec<usize>> {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let embed = match cfg.task {
            Task::Classify { channels, image_size, patch_size, .. } => {
                let n = (image_size / patch_size).pow(2);
                Embedding::Patch {
                    proj_w: vec![channels * patch_size * patch_size, d],
                    proj_b: vec![d],
                    cls: vec![1, d],
                    pos: vec![n + 1, d],
                }
            }
            Task::Lm { vocab, max_len } => Embedding::Token { table: vec![vocab, d], pos: vec![max_len, d] },
        };
        let dims = cfg.block_dims();
        let block = BlockParams {
            attn: crate::blocks::AttentionParams {
                heads: dims.heads,
                wq: vec![d, d],
                bq: vec![d],
                wk: vec![d, d],
                bk: vec![d],
                wv: vec![d, d],
                bv: vec![d],
                wo: vec![d, d],
                bo: vec![d],
            },
            mlp: crate::blocks::MlpParams {
                w1: vec![d, dims.mlp_dim],
                b1: vec![dims.mlp_dim],
                w2: vec![dims.mlp_dim, d],
                b2: vec![d],
            },
            norms: vec![NormParams { gamma: vec![d], beta: vec![d] }; dims.norms],
        };
        NetworkParams {
            embed,
            blocks: vec![block; cfg.independent_layers],
            final_norm: NormParams { gamma: vec![d], beta: vec![d] },
            head_w: vec![d, cfg.outputs()],
            head_b: vec![cfg.outputs()],
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn share_map(&self) -> &[usize] {
        &self.share_map
    }

    /// Trainable parameters, each shared set counted once.
    pub fn param_count(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters outside the layer stack (embeddings, final norm, head).
    pub fn param_count_outside_layers(&self) -> usize {
        self.param_count() - self.params.blocks.iter().map(|b| b.param_count()).sum::<usize>()
    }

    pub fn bind(&self, tape: &mut Tape) -> NetworkParams<Var> {
        self.params.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    pub fn bind_const(&self, tape: &mut Tape) -> NetworkParams<Var> {
        self.params.map(&mut |t: &Tensor| tape.constant(t.clone()))
    }

    /// Runs the `D` layers on `x[L×d]`.
    pub fn run_layers(
        &self,
        tape: &mut Tape,
        bound: &NetworkParams<Var>,
        mut x: Var,
        training: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let cfg = self.cfg.block_config(training);
        let depth = self.cfg.depth;
        for (m, &set) in self.share_map.iter().enumerate() {
            let p = &bound.blocks[set];
            let pos = LayerPos { index: m, depth };
            x = match self.cfg.scheme {
                Scheme::Euler => apply_block(tape, x, p, &cfg, pos, rng.as_deref_mut())?,
                Scheme::Rk4 => {
                    let gate = stochastic_depth_gate(m, depth, cfg.stoch_depth_p, cfg.training, rng.as_deref_mut());
                    if !gate.keep {
                        continue;
                    }
                    let mut field = BlockField { params: p, cfg, rng: rng.as_deref_mut() };
                    rk4_step_scaled(tape, &mut field, x, m as f64, 1.0, gate.scale)?
                }
            };
        }
        Ok(x)
    }

    /// Logits `[1×classes]` for one `C×S×S` image.
    pub fn forward_image(
        &self,
        tape: &mut Tape,
        bound: &NetworkParams<Var>,
        pixels: &[f64],
        training: bool,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let Task::Classify { channels, image_size, patch_size, .. } = self.cfg.task else {
            return Err(Error::Input("image input to a language model".into()));
        };
        let Embedding::Patch { proj_w, proj_b, cls, pos } = bound.embed else {
            return Err(Error::Config("classifier without patch embedding".into()));
        };
        let patches = tape.constant(patchify(pixels, channels, image_size, patch_size)?);
        let emb = tape.matmul(patches, proj_w)?;
        let emb = tape.add_row(emb, proj_b)?;
        let tokens = tape.concat_rows(&[cls, emb])?;
        let x = tape.add(tokens, pos)?;
        let x = self.run_layers(tape, bound, x, training, rng)?;
        let first = tape.slice_rows(x, 0, 1)?;
        let first = tape.layer_norm(first, bound.final_norm.gamma, bound.final_norm.beta, LN_EPS)?;
        let logits = tape.matmul(first, bound.head_w)?;
        tape.add_row(logits, bound.head_b)
    }

    /// Logits `[L×V]` for one token sequence; position `t` only sees tokens `≤ t`.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        bound: &NetworkParams<Var>,
        tokens: &[usize],
        training: bool,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let Task::Lm { vocab, max_len } = self.cfg.task else {
            return Err(Error::Input("token input to an image classifier".into()));
        };
        let Embedding::Token { table, pos } = bound.embed else {
            return Err(Error::Config("language model without token embedding".into()));
        };
        if tokens.is_empty() || tokens.len() > max_len {
            return Err(Error::Input(format!("sequence length {} not in 1..={max_len}", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token {bad} out of range for vocabulary {vocab}")));
        }
        let e = tape.gather_rows(table, tokens)?;
        let p = tape.slice_rows(pos, 0, tokens.len())?;
        let x = tape.add(e, p)?;
        let x = self.run_layers(tape, bound, x, training, rng)?;
        let x = tape.layer_norm(x, bound.final_norm.gamma, bound.final_norm.beta, LN_EPS)?;
        let logits = tape.matmul(x, bound.head_w)?;
        tape.add_row(logits, bound.head_b)
    }

    fn sample_logits(
        &self,
        tape: &mut Tape,
        bound: &NetworkParams<Var>,
        sample: Sample<'_>,
        training: bool,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, Vec<usize>)> {
        match sample {
            Sample::Image { pixels, label } => {
                Ok((self.forward_image(tape, bound, pixels, training, rng)?, vec![label]))
            }
            Sample::Tokens { input, targets } => {
                if input.len() != targets.len() {
                    return Err(Error::Input("input and target lengths differ".into()));
                }
                Ok((self.forward_tokens(tape, bound, input, training, rng)?, targets.to_vec()))
            }
        }
    }

    /// Mean cross-entropy of one sample and its gradient with respect to every
    /// parameter. Shared sets receive the sum over the layers that use them.
    pub fn sample_grad(&self, sample: Sample<'_>, training: bool, rng: Option<&mut Rng>) -> Result<SampleGrad> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (logits, targets) = self.sample_logits(&mut tape, &bound, sample, training, rng)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let grads = tape.backward(loss)?;
        Ok(SampleGrad {
            loss: tape.value(loss).data()[0],
            logits: tape.value(logits).clone(),
            grads: bound.map(&mut |v: &Var| grads.get_or_zeros(*v)),
        })
    }

    /// Evaluation-mode logits and summed (not averaged) cross-entropy of one sample.
    pub fn sample_eval(&self, sample: Sample<'_>) -> Result<(Tensor, f64)> {
        let mut tape = Tape::new();
        let bound = self.bind_const(&mut tape);
        let (logits, targets) = self.sample_logits(&mut tape, &bound, sample, false, None)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let total = tape.value(loss).data()[0] * targets.len() as f64;
        Ok((tape.value(logits).clone(), total))
    }

    /// Evaluation-mode logits `[B×classes]` for images `[B×C×S×S]`.
    pub fn forward_classify(&self, images: &Tensor) -> Result<Tensor> {
        self.forward_classify_with(images, Exec::default())
    }

    pub fn forward_classify_with(&self, images: &Tensor, exec: Exec) -> Result<Tensor> {
        let Task::Classify { channels, image_size, classes, .. } = self.cfg.task else {
            return Err(Error::Input("image input to a language model".into()));
        };
        let want = [channels, image_size, image_size];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(Error::Input(format!(
                "images have shape {:?}, expected [B, {channels}, {image_size}, {image_size}]",
                images.shape()
            )));
        }
        let b = images.shape()[0];
        let per = channels * image_size * image_size;
        let rows = exec.map(b, |i| {
            let mut tape = Tape::new();
            let bound = self.bind_const(&mut tape);
            let pixels = &images.data()[i * per..(i + 1) * per];
            let y = self.forward_image(&mut tape, &bound, pixels, false, None)?;
            Ok(tape.value(y).data().to_vec())
        });
        let data = rows.into_iter().collect::<Result<Vec<_>>>()?.concat();
        Tensor::new([b, classes], data)
    }

    /// Evaluation-mode logits `[B×L×V]` for equal-length token sequences.
    pub fn forward_lm(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        self.forward_lm_with(tokens, Exec::default())
    }

    pub fn forward_lm_with(&self, tokens: &[Vec<usize>], exec: Exec) -> Result<Tensor> {
        let Task::Lm { vocab, .. } = self.cfg.task else {
            return Err(Error::Input("token input to an image classifier".into()));
        };
        let len = tokens.first().map(Vec::len).ok_or_else(|| Error::Input("empty token batch".into()))?;
        if tokens.iter().any(|t| t.len() != len) {
            return Err(Error::Input("token sequences in a batch must share one length".into()));
        }
        let rows = exec.map(tokens.len(), |i| {
            let mut tape = Tape::new();
            let bound = self.bind_const(&mut tape);
            let y = self.forward_tokens(&mut tape, &bound, &tokens[i], false, None)?;
            Ok(tape.value(y).data().to_vec())
        });
        let data = rows.into_iter().collect::<Result<Vec<_>>>()?.concat();
        Tensor::new([tokens.len(), len, vocab], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_classifier(k: usize, depth: usize) -> NetworkConfig {
        NetworkConfig {
            depth,
            independent_layers: k,
            dim: 8,
            heads: 2,
            mlp_dim: 16,
            variant: BlockVariant::Parallel,
            norm: NormVariant::A,
            scheme: Scheme::Euler,
            dropout_p: 0.0,
            stoch_depth_p: 0.0,
            task: Task::Classify { channels: 1, image_size: 4, patch_size: 2, classes: 3 },
            preset: None,
        }
    }

    #[test]
    fn share_map_examples() {
        assert_eq!(share_map(12, 12).unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(share_map(12, 6).unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
        assert_eq!(share_map(12, 1).unwrap(), vec![0; 12]);
        assert_eq!(share_map(12, 4).unwrap(), vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert!(matches!(share_map(12, 5), Err(Error::Config(_))));
        assert!(share_map(12, 0).is_err());
        assert!(share_map(4, 8).is_err());
    }

    #[test]
    fn patchify_scans_row_major() {
        // 4x4 single-channel image with value = 10*row + col
        let pixels: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let p = patchify(&pixels, 1, 4, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 12.0, 13.0]);
        assert_eq!(p.row(2), &[20.0, 21.0, 30.0, 31.0]);
        assert_eq!(p.row(3), &[22.0, 23.0, 32.0, 33.0]);
    }

    #[test]
    fn patchify_channel_major_within_patch() {
        // 2 channels, 2x2 image, one patch covering everything
        let pixels = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let p = patchify(&pixels, 2, 2, 2).unwrap();
        assert_eq!(p.row(0), &pixels);
        assert!(patchify(&pixels, 2, 2, 3).is_err());
    }

    #[test]
    fn hand_traced_patch_embedding() {
        // D=1, d=4, 4x4 image, patch 2. With identity-like projection the
        // embedded tokens are the raw patch vectors.
        let cfg = NetworkConfig { dim: 4, heads: 1, ..tiny_classifier(1, 1) };
        let mut params = Network::build(cfg.clone(), 0).unwrap().params;
        if let Embedding::Patch { proj_w, proj_b, cls, pos } = &mut params.embed {
            *proj_w = Tensor::identity(4);
            *proj_b = Tensor::zeros([4]);
            *cls = Tensor::zeros([1, 4]);
            *pos = Tensor::zeros([5, 4]);
        }
        let net = Network::with_params(cfg, params).unwrap();
        let pixels: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let bound = net.bind_const(&mut tape);
        let Embedding::Patch { proj_w, proj_b, cls, pos } = bound.embed else { unreachable!() };
        let patches = tape.constant(patchify(&pixels, 1, 4, 2).unwrap());
        let emb = tape.matmul(patches, proj_w).unwrap();
        let emb = tape.add_row(emb, proj_b).unwrap();
        let tokens = tape.concat_rows(&[cls, emb]).unwrap();
        let x = tape.add(tokens, pos).unwrap();
        let v = tape.value(x);
        assert_eq!(v.row(0), &[0.0; 4]);
        assert_eq!(v.row(1), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(v.row(4), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::build(tiny_classifier(2, 4), 7).unwrap();
        let b = Network::build(tiny_classifier(2, 4), 7).unwrap();
        let c = Network::build(tiny_classifier(2, 4), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_sharing_uses_one_storage() {
        let cfg = NetworkConfig { depth: 12, ..tiny_classifier(1, 12) };
        let mut net = Network::build(cfg, 1).unwrap();
        assert_eq!(net.params.blocks.len(), 1);
        assert!(net.share_map().iter().all(|&s| s == 0));
        let images = Tensor::uniform([2, 1, 4, 4], 0.0, 1.0, &mut Rng::seed_from_u64(3));
        let before = net.forward_classify(&images).unwrap();
        net.params.blocks[0].attn.wo.data_mut()[0] += 0.5;
        net.params.blocks[0].mlp.w2.data_mut()[0] += 0.5;
        let after = net.forward_classify(&images).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn identical_images_identical_logits() {
        let net = Network::build(tiny_classifier(2, 2), 3).unwrap();
        let img = Tensor::uniform([1, 1, 4, 4], 0.0, 1.0, &mut Rng::seed_from_u64(9));
        let mut data = img.data().to_vec();
        data.extend_from_slice(img.data());
        let batch = Tensor::new([2, 1, 4, 4], data).unwrap();
        let y = net.forward_classify(&batch).unwrap();
        assert_eq!(y.row(0), y.row(1));
        assert!(y.is_finite());
        assert!(net.forward_classify(&Tensor::zeros([1, 1, 3, 3])).is_err());
    }

    #[test]
    fn param_count_is_affine_in_k() {
        let count = |k| Network::build(NetworkConfig { depth: 12, ..tiny_classifier(k, 12) }, 0).unwrap().param_count();
        let per_layer = count(2) - count(1);
        for k in [1, 2, 3, 4, 6, 12] {
            assert_eq!(count(k), count(1) + (k - 1) * per_layer);
        }
    }

    #[test]
    fn lm_validates_tokens() {
        let cfg = NetworkConfig { task: Task::Lm { vocab: 5, max_len: 4 }, ..tiny_classifier(1, 1) };
        let net = Network::build(cfg, 0).unwrap();
        assert!(net.forward_lm(&[vec![1, 2, 5]]).is_err());
        assert!(net.forward_lm(&[vec![1, 2, 3, 4, 0]]).is_err());
        let y = net.forward_lm(&[vec![4]]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5]);
        assert!(y.is_finite());
    }

    #[test]
    fn rk4_needs_parallel_layers() {
        let cfg = NetworkConfig { variant: BlockVariant::Sequential, scheme: Scheme::Rk4, ..tiny_classifier(1, 1) };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
