//! Deterministic training and evaluation loops.
//!
//! Every random draw is derived from the run seed plus the step (and sample)
//! index, and per-sample work is reduced in index order, so a run is
//! bit-reproducible whichever [`Exec`] mode computes it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{ImageDataset, TextCorpus};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{self, MetricRecord, Quality, Split};
use crate::network::{Network, NetworkConfig, NetworkParams, Sample, Task};
use crate::optim::{AdamConfig, AdamW, LrSchedule};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub cosine: bool,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Language-model window length.
    pub seq_len: usize,
    pub dataset: Option<PathBuf>,
    /// Share of a text corpus (or a loaded image file) held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: None,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 10,
            cosine: true,
            weight_decay: 0.05,
            seed: 0,
            eval_interval: 50,
            seq_len: 32,
            dataset: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch size, eval interval and sequence length must be positive".into()));
        }
        if self.max_steps.is_none() && self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::Config("need at least one epoch or step".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Images { train: ImageDataset, val: ImageDataset },
    Text { train: TextCorpus, val: TextCorpus },
}

/// One split of a dataset, ready for an evaluation pass.
#[derive(Clone, Copy, Debug)]
pub enum EvalSet<'a> {
    Images(&'a ImageDataset),
    Text(&'a TextCorpus, usize),
}

impl EvalSet<'_> {
    fn len(&self) -> usize {
        match self {
            EvalSet::Images(d) => d.len(),
            EvalSet::Text(c, l) => c.eval_starts(*l).len(),
        }
    }
}

impl Dataset {
    pub fn val(&self, seq_len: usize) -> EvalSet<'_> {
        match self {
            Dataset::Images { val, .. } => EvalSet::Images(val),
            Dataset::Text { val, .. } => EvalSet::Text(val, seq_len),
        }
    }

    pub fn train(&self, seq_len: usize) -> EvalSet<'_> {
        match self {
            Dataset::Images { train, .. } => EvalSet::Images(train),
            Dataset::Text { train, .. } => EvalSet::Text(train, seq_len),
        }
    }
}

/// Mixes seed words into one well-spread 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const TAG_EPOCH: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_WINDOWS: u64 = 3;

fn check_geometry(cfg: &NetworkConfig, set: EvalSet<'_>) -> Result<()> {
    match (&cfg.task, set) {
        (Task::Classify { channels, image_size, classes, .. }, EvalSet::Images(d)) => {
            if d.channels != *channels || d.height != *image_size || d.width != *image_size {
                return Err(Error::Config(format!(
                    "dataset images are {}x{}x{}, model expects {channels}x{image_size}x{image_size}",
                    d.channels, d.height, d.width
                )));
            }
            if let Some(&l) = d.labels.iter().find(|&&l| l as usize >= *classes) {
                return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
            }
            Ok(())
        }
        (Task::Lm { max_len, vocab }, EvalSet::Text(_, seq_len)) => {
            if seq_len > *max_len {
                return Err(Error::Config(format!("sequence length {seq_len} exceeds model max_len {max_len}")));
            }
            if *vocab < crate::data::BYTE_VOCAB {
                return Err(Error::Config(format!("byte corpus needs vocabulary 256, model has {vocab}")));
            }
            Ok(())
        }
        _ => Err(Error::Config("dataset kind does not match model task".into())),
    }
}

/// Exact pass over `set` in evaluation mode. Samples are processed in chunks
/// of `batch_size` but accumulated one by one in index order, so the result
/// does not depend on the batch size.
pub fn evaluate(net: &Network, set: EvalSet<'_>, batch_size: usize, exec: Exec) -> Result<(f64, Quality)> {
    check_geometry(net.config(), set)?;
    let n = set.len();
    if n == 0 {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut total, mut count, mut hits) = (0.0, 0usize, 0usize);
    for lo in (0..n).step_by(batch_size) {
        let hi = (lo + batch_size).min(n);
        let outs = match set {
            EvalSet::Images(d) => exec.map(hi - lo, |j| {
                let i = lo + j;
                let pixels = d.image(i);
                let (logits, nll) = net.sample_eval(Sample::Image { pixels: &pixels, label: d.label(i) })?;
                Ok::<_, Error>((nll, 1, usize::from(metrics::argmax(logits.data()) == d.label(i))))
            }),
            EvalSet::Text(c, len) => {
                let starts = c.eval_starts(len);
                exec.map(hi - lo, |j| {
                    let (input, targets) = c.window(starts[lo + j], len);
                    let (_, nll) = net.sample_eval(Sample::Tokens { input: &input, targets: &targets })?;
                    Ok::<_, Error>((nll, len, 0))
                })
            }
        };
        for out in outs {
            let (nll, k, hit) = out?;
            total += nll;
            count += k;
            hits += hit;
        }
    }
    let loss = total / count as f64;
    let quality = match set {
        EvalSet::Images(_) => Quality::Top1(hits as f64 / n as f64),
        EvalSet::Text(..) => Quality::Perplexity(metrics::perplexity(total, count)),
    };
    Ok((loss, quality))
}

/// Where the final (or last good) parameters go, next to the best-val checkpoint.
pub fn last_checkpoint_path(best: &Path) -> PathBuf {
    let stem = best.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    best.with_file_name(format!("{stem}.last.ckpt"))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricRecord>,
    pub best_val: Option<MetricRecord>,
    pub net: Network,
    pub steps: usize,
}

fn better(new: &MetricRecord, old: &MetricRecord) -> bool {
    match (new.quality, old.quality) {
        (Quality::Top1(a), Quality::Top1(b)) => a > b || (a == b && new.loss < old.loss),
        _ => new.loss < old.loss,
    }
}

struct Batcher<'a> {
    data: &'a Dataset,
    cfg: &'a TrainConfig,
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
}

impl Batcher<'_> {
    fn steps_per_epoch(data: &Dataset, cfg: &TrainConfig) -> usize {
        match data {
            Dataset::Images { train, .. } => train.len().div_ceil(cfg.batch_size),
            Dataset::Text { train, .. } => (train.window_count(cfg.seq_len) / (cfg.batch_size * cfg.seq_len)).max(1),
        }
    }

    /// Image indices, or window starts, for `step`.
    fn next(&mut self, step: usize) -> Vec<usize> {
        match self.data {
            Dataset::Images { train, .. } => {
                if self.cursor >= self.order.len() {
                    self.order = (0..train.len()).collect();
                    let mut rng = Rng::seed_from_u64(derive_seed(&[self.cfg.seed, TAG_EPOCH, self.epoch]));
                    self.order.shuffle(&mut rng);
                    self.epoch += 1;
                    self.cursor = 0;
                }
                let hi = (self.cursor + self.cfg.batch_size).min(self.order.len());
                let batch = self.order[self.cursor..hi].to_vec();
                self.cursor = hi;
                batch
            }
            Dataset::Text { train, .. } => {
                let mut rng = Rng::seed_from_u64(derive_seed(&[self.cfg.seed, TAG_WINDOWS, step as u64]));
                let n = train.window_count(self.cfg.seq_len);
                (0..self.cfg.batch_size).map(|_| rng.random_range(0..n)).collect()
            }
        }
    }
}

/// Trains from a fresh initialization of `model` seeded by `cfg.seed`.
///
/// With `checkpoint` set, the best-validation parameters are written there
/// and the final ones to [`last_checkpoint_path`]. On divergence the last
/// good parameters are written to the latter and a divergence error returned.
pub fn train(
    model: &NetworkConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    exec: Exec,
    checkpoint: Option<&Path>,
    log: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_geometry(model, data.train(cfg.seq_len))?;
    check_geometry(model, data.val(cfg.seq_len))?;
    match data {
        Dataset::Images { train, .. } if train.is_empty() => return Err(Error::Dataset("empty training set".into())),
        Dataset::Text { train, .. } if train.window_count(cfg.seq_len) == 0 => {
            return Err(Error::Dataset(format!("training text shorter than one window of {}", cfg.seq_len + 1)))
        }
        _ => {}
    }
    if data.val(cfg.seq_len).len() == 0 {
        return Err(Error::Dataset("validation split is empty".into()));
    }

    let mut net = Network::build(model.clone(), cfg.seed)?;
    let total = cfg.max_steps.unwrap_or(cfg.epochs * Batcher::steps_per_epoch(data, cfg));
    let schedule = LrSchedule { base: cfg.lr, warmup: cfg.warmup_steps, total, cosine: cfg.cosine };
    let mut opt = AdamW::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut batcher = Batcher { data, cfg, order: Vec::new(), epoch: 0, cursor: 0 };
    let started = Instant::now();
    let last_path = checkpoint.map(last_checkpoint_path);
    let diverged = |net: &Network, msg: String| -> Error {
        if let Some(p) = &last_path {
            if let Err(e) = checkpoint::save(net, p) {
                return Error::Divergence(format!("{msg}; saving last good checkpoint failed: {e}"));
            }
        }
        Error::Divergence(msg)
    };

    let mut records = Vec::new();
    let mut best: Option<MetricRecord> = None;
    let (mut run_loss, mut run_hits, mut run_samples, mut run_steps) = (0.0, 0usize, 0usize, 0usize);
    for step in 0..total {
        let batch = batcher.next(step);
        let net_ref = &net;
        let outs = exec.map(batch.len(), |j| {
            let mut rng = Rng::seed_from_u64(derive_seed(&[cfg.seed, TAG_SAMPLE, step as u64, j as u64]));
            match data {
                Dataset::Images { train, .. } => {
                    let i = batch[j];
                    let pixels = train.image(i);
                    let label = train.label(i);
                    let out = net_ref.sample_grad(Sample::Image { pixels: &pixels, label }, true, Some(&mut rng))?;
                    let hit = metrics::argmax(out.logits.data()) == label;
                    Ok::<_, Error>((out.loss, usize::from(hit), out.grads))
                }
                Dataset::Text { train, .. } => {
                    let (input, targets) = train.window(batch[j], cfg.seq_len);
                    let out = net_ref.sample_grad(
                        Sample::Tokens { input: &input, targets: &targets },
                        true,
                        Some(&mut rng),
                    )?;
                    Ok::<_, Error>((out.loss, 0, out.grads))
                }
            }
        });
        let mut grad: Option<NetworkParams<Tensor>> = None;
        let mut loss = 0.0;
        for out in outs {
            let (l, hit, g) = out?;
            loss += l;
            run_hits += hit;
            match &mut grad {
                None => grad = Some(g),
                Some(acc) => acc.add_assign(&g),
            }
        }
        let mut grad = grad.expect("batches are non-empty");
        grad.scale_assign(1.0 / batch.len() as f64);
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(diverged(&net, format!("training loss {loss} at step {step}")));
        }
        let named = grad.named();
        let grads: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        if let Err(e) = opt.step(net.params.named_mut(), &grads, schedule.at(step)) {
            return Err(match e {
                Error::Divergence(m) => diverged(&net, m),
                e => e,
            });
        }
        run_loss += loss;
        run_samples += batch.len();
        run_steps += 1;

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == total {
            let mean = run_loss / run_steps as f64;
            let quality = match data {
                Dataset::Images { .. } => Quality::Top1(run_hits as f64 / run_samples as f64),
                Dataset::Text { .. } => Quality::Perplexity(mean.exp()),
            };
            let rec = MetricRecord {
                step: done,
                split: Split::Train,
                loss: mean,
                quality,
                seconds: started.elapsed().as_secs_f64(),
            };
            log(&rec);
            records.push(rec);
            (run_loss, run_hits, run_samples, run_steps) = (0.0, 0, 0, 0);

            let (vloss, vq) = evaluate(&net, data.val(cfg.seq_len), cfg.batch_size, exec)?;
            if !vloss.is_finite() {
                return Err(diverged(&net, format!("validation loss {vloss} at step {done}")));
            }
            let rec = MetricRecord {
                step: done,
                split: Split::Val,
                loss: vloss,
                quality: vq,
                seconds: started.elapsed().as_secs_f64(),
            };
            log(&rec);
            records.push(rec);
            if best.as_ref().is_none_or(|b| better(&rec, b)) {
                best = Some(rec);
                if let Some(p) = checkpoint {
                    checkpoint::save(&net, p)?;
                }
            }
        }
    }
    if let Some(p) = &last_path {
        checkpoint::save(&net, p)?;
    }
    Ok(TrainReport { records, best_val: best, net, steps: total })
}
