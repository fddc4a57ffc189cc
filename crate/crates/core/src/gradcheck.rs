//! Central finite-difference gradient checks.
//!
//! Each case builds a computation from named inputs, contracts its output
//! with fixed random weights `w` into `L = Σ w ⊙ out`, and compares the tape
//! gradient of `L` with `(L(x + h) - L(x - h)) / 2h` entry by entry. Random
//! weights keep cases meaningful where a plain sum has a trivially zero
//! gradient (a sum over layer-norm outputs, a sum over softmax rows).

use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};

use crate::autodiff::{OpKind, Tape, Var};
use crate::blocks::{apply_block, BlockConfig, BlockDims, BlockParams, BlockVariant, LayerPos, NormVariant};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::integrators::{integrate, Scheme, SharedLayerField};
use crate::network::{share_map, Network, NetworkConfig, Sample, Task};
use crate::tensor::Tensor;
use crate::train::derive_seed;
use crate::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;
pub const SEEDS: u64 = 10;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Block,
    Network,
    Rk4,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Block, Scope::Network, Scope::Rk4];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Block => "block",
            Scope::Network => "network",
            Scope::Rk4 => "rk4",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown gradcheck scope {s:?}; expected ops|block|network|rk4")))
    }
}

/// Worst entry of one named input.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub worst: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case: String,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
}

impl CaseReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < REL_TOL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScopeReport {
    pub scope: Scope,
    pub cases: Vec<CaseReport>,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn failing_cases(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.cases.iter().filter(|c| !c.passed()).map(|c| c.case.as_str()).collect();
        names.dedup();
        names
    }

    /// Worst relative error per `case/group` over all seeds, in first-seen order.
    pub fn worst_by_group(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.cases {
            for g in &c.groups {
                let key = format!("{}/{}", c.case, g.name);
                match out.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, w)) => *w = w.max(g.worst),
                    None => out.push((key, g.worst)),
                }
            }
        }
        out
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + 'a;

/// Compares tape and finite-difference gradients for every input entry, or
/// for `max_entries` randomly chosen entries per input when set.
pub fn check_fn(
    inputs: &[(String, Tensor)],
    seed: u64,
    max_entries: Option<usize>,
    fault: Option<OpKind>,
    build: &Build<'_>,
) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_backward_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let weights = Tensor::uniform(tape.shape(out).to_vec(), -1.0, 1.0, &mut rng);
    let grads = tape.backward_seeded(out, &weights)?;

    let loss_at = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let entries: Vec<usize> = match max_entries {
            Some(m) if m < t.numel() => (0..m).map(|_| rng.random_range(0..t.numel())).collect(),
            _ => (0..t.numel()).collect(),
        };
        let mut worst = 0.0f64;
        for &j in &entries {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&values)?;
            values[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        reports.push(GroupReport { name: name.clone(), worst, checked: entries.len() });
    }
    Ok(reports)
}

fn uniform(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn named(inputs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// One gradcheck case of the ops scope. Dims are at most 5, entries in `[-1, 1]`.
fn op_case(kind: OpKind, variant: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut dim = |lo: usize| rng.random_range(lo..=5);
    let (m, n, k) = (dim(1), dim(2), dim(1));
    let mut rng = Rng::seed_from_u64(derive_seed(&[seed, 1]));
    let r = &mut rng;
    let check = |inputs: Vec<(&str, Tensor)>, f: &Build<'_>| check_fn(&named(inputs), seed, None, fault, f);
    match kind {
        OpKind::Leaf => check(vec![("x", uniform([m, n], r))], &|_t, v| Ok(v[0])),
        OpKind::MatMul => {
            check(vec![("a", uniform([m, k], r)), ("b", uniform([k, n], r))], &|t, v| t.matmul(v[0], v[1]))
        }
        OpKind::Add => check(vec![("a", uniform([m, n], r)), ("b", uniform([m, n], r))], &|t, v| t.add(v[0], v[1])),
        OpKind::AddRow => check(vec![("a", uniform([m, n], r)), ("b", uniform([n], r))], &|t, v| t.add_row(v[0], v[1])),
        OpKind::Mul => check(vec![("a", uniform([m, n], r)), ("b", uniform([m, n], r))], &|t, v| t.mul(v[0], v[1])),
        OpKind::Scale => {
            let (s, d) = (r.random_range(-2.0..2.0), r.random_range(0.5..3.0));
            check(vec![("a", uniform([m, n], r))], &move |t, v| {
                let y = t.scale(v[0], s);
                Ok(t.div_scalar(y, d))
            })
        }
        OpKind::Gelu => check(vec![("a", uniform([m, n], r))], &|t, v| Ok(t.gelu(v[0]))),
        OpKind::Softmax => {
            let causal = variant == 1;
            let rows = if causal { n } else { m };
            check(vec![("a", uniform([rows, n], r))], &move |t, v| t.softmax_rows(v[0], causal))
        }
        OpKind::LayerNorm => {
            check(vec![("x", uniform([m, n], r)), ("gamma", uniform([n], r)), ("beta", uniform([n], r))], &|t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        }
        OpKind::Transpose => check(vec![("a", uniform([m, n], r))], &|t, v| t.transpose(v[0])),
        OpKind::SliceCols => {
            let start = r.random_range(0..n);
            let len = r.random_range(1..=n - start);
            check(vec![("a", uniform([m, n], r))], &move |t, v| t.slice_cols(v[0], start, len))
        }
        OpKind::ConcatCols => check(vec![("a", uniform([m, n], r)), ("b", uniform([m, k], r))], &|t, v| {
            t.concat_cols(&[v[0], v[1], v[0]])
        }),
        OpKind::SliceRows => {
            let rows = m + 1;
            let start = r.random_range(0..rows);
            let len = r.random_range(1..=rows - start);
            check(vec![("a", uniform([rows, n], r))], &move |t, v| t.slice_rows(v[0], start, len))
        }
        OpKind::ConcatRows => check(vec![("a", uniform([m, n], r)), ("b", uniform([k, n], r))], &|t, v| {
            t.concat_rows(&[v[1], v[0], v[1]])
        }),
        OpKind::GatherRows => {
            let ids: Vec<usize> = (0..k + 2).map(|_| r.random_range(0..m)).collect();
            check(vec![("table", uniform([m, n], r))], &move |t, v| t.gather_rows(v[0], &ids))
        }
        OpKind::Sum => check(vec![("a", uniform([m, n], r))], &|t, v| Ok(t.sum(v[0]))),
        OpKind::CrossEntropy => {
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            check(vec![("logits", uniform([m, n], r))], &move |t, v| t.cross_entropy(v[0], &targets))
        }
    }
}

fn op_cases() -> Vec<(String, OpKind, usize)> {
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        out.push((kind.name().to_string(), kind, 0));
        if kind == OpKind::Softmax {
            out.push((format!("{}/causal", kind.name()), kind, 1));
        }
    }
    out
}

/// Random small layer dimensions: `L ≤ 4`, `d ≤ 8`, `H ≤ 2`.
fn small_dims(rng: &mut Rng, norms: usize) -> (usize, BlockDims) {
    let heads = rng.random_range(1..=2);
    let dim = (heads * rng.random_range(1..=8 / heads)).max(2);
    let mlp_dim = rng.random_range(1..=8);
    (rng.random_range(1..=4), BlockDims { dim, heads, mlp_dim, norms })
}

fn block_inputs(x: Tensor, sets: &[BlockParams<Tensor>]) -> Vec<(String, Tensor)> {
    let mut inputs = vec![("x".to_string(), x)];
    for (i, p) in sets.iter().enumerate() {
        let mut named = Vec::new();
        p.named(&format!("set{i}."), &mut named);
        inputs.extend(named.into_iter().map(|(n, t)| (n, t.clone())));
    }
    inputs
}

/// Rebuilds parameter structs over `vars[1..]` in the order `block_inputs` flattened them.
fn bind_sets(templates: &[BlockParams<Tensor>], vars: &[Var]) -> Vec<BlockParams<Var>> {
    let mut next = 1;
    templates
        .iter()
        .map(|p| {
            let mut idx = p.map(&mut |_| 0usize);
            let mut slots = Vec::new();
            idx.named_mut("", &mut slots);
            for (_, s) in slots {
                *s = next;
                next += 1;
            }
            idx.map(&mut |&i| vars[i])
        })
        .collect()
}

const BLOCK_CASES: [(&str, BlockVariant, NormVariant); 5] = [
    ("sequential/none", BlockVariant::Sequential, NormVariant::None),
    ("sequential/A", BlockVariant::Sequential, NormVariant::A),
    ("parallel/A", BlockVariant::Parallel, NormVariant::A),
    ("parallel/B", BlockVariant::Parallel, NormVariant::B),
    ("parallel/C", BlockVariant::Parallel, NormVariant::C),
];

fn block_case(variant: BlockVariant, norm: NormVariant, seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::seed_from_u64(seed);
    let (len, dims) = small_dims(&mut rng, norm.norm_count(variant));
    let params = vec![BlockParams::random(dims, 0.5, &mut rng)?];
    let x = uniform([len, dims.dim], &mut rng);
    let cfg = BlockConfig::new(variant, norm);
    let inputs = block_inputs(x, &params);
    check_fn(&inputs, seed, None, fault, &|t, v| {
        let p = &bind_sets(&params, v)[0];
        apply_block(t, v[0], p, &cfg, LayerPos { index: 0, depth: 1 }, None)
    })
}

const RK4_CASES: [(&str, usize, NormVariant); 3] = [
    ("rk4/shared/A", 1, NormVariant::A),
    ("rk4/shared/C", 1, NormVariant::C),
    ("rk4/independent/B", 2, NormVariant::B),
];

/// Two RK4 steps over `[0, 2]` through a two-layer weight-shared field.
fn rk4_case(k: usize, norm: NormVariant, seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::seed_from_u64(seed);
    let (len, dims) = small_dims(&mut rng, norm.norm_count(BlockVariant::Parallel));
    let sets = (0..k).map(|_| BlockParams::random(dims, 0.3, &mut rng)).collect::<Result<Vec<_>>>()?;
    let x = uniform([len, dims.dim], &mut rng);
    let cfg = BlockConfig::new(BlockVariant::Parallel, norm);
    let map = share_map(2, k)?;
    let inputs = block_inputs(x, &sets);
    check_fn(&inputs, seed, None, fault, &|t, v| {
        let bound = bind_sets(&sets, v);
        let mut field = SharedLayerField::new(bound.iter().collect(), map.clone(), cfg)?;
        integrate(t, &mut field, v[0], 0.0, 2.0, 2, Scheme::Rk4)
    })
}

const NETWORK_CASES: [&str; 3] = ["network/classify/parallel", "network/classify/sequential", "network/lm/rk4"];
const NETWORK_ENTRIES: usize = 6;

fn network_case(which: usize, seed: u64, fault: Option<OpKind>) -> Result<Vec<GroupReport>> {
    let mut rng = Rng::seed_from_u64(seed);
    let (variant, scheme, task) = match which {
        0 => (
            BlockVariant::Parallel,
            Scheme::Euler,
            Task::Classify { channels: 2, image_size: 4, patch_size: 2, classes: 3 },
        ),
        1 => (
            BlockVariant::Sequential,
            Scheme::Euler,
            Task::Classify { channels: 1, image_size: 4, patch_size: 2, classes: 4 },
        ),
        _ => (BlockVariant::Parallel, Scheme::Rk4, Task::Lm { vocab: 7, max_len: 4 }),
    };
    let cfg = NetworkConfig {
        depth: 2,
        independent_layers: 1,
        dim: 4,
        heads: 2,
        mlp_dim: 6,
        variant,
        norm: NormVariant::A,
        scheme,
        dropout_p: 0.0,
        stoch_depth_p: 0.0,
        task: task.clone(),
        preset: None,
    };
    let net = Network::build(cfg, seed)?;
    // initial weights are too small to exercise much curvature; widen them
    let mut params = net.params.clone();
    for (_, t) in params.named_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let net = Network::with_params(net.config().clone(), params)?;
    let inputs: Vec<(String, Tensor)> = net.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let sample_pixels: Vec<f64>;
    let tokens: Vec<usize>;
    let sample = match task {
        Task::Classify { channels, image_size, classes, .. } => {
            sample_pixels = (0..channels * image_size * image_size).map(|_| rng.random_range(0.0..1.0)).collect();
            Sample::Image { pixels: &sample_pixels, label: rng.random_range(0..classes) }
        }
        Task::Lm { vocab, max_len } => {
            tokens = (0..=max_len).map(|_| rng.random_range(0..vocab)).collect();
            Sample::Tokens { input: &tokens[..max_len], targets: &tokens[1..] }
        }
    };
    let mut idx = net.params.map(&mut |_| 0usize);
    for (i, (_, s)) in idx.named_mut().into_iter().enumerate() {
        *s = i;
    }
    check_fn(&inputs, seed, Some(NETWORK_ENTRIES), fault, &|t, v| {
        let bound = idx.map(&mut |&i| v[i]);
        let logits = match sample {
            Sample::Image { pixels, .. } => net.forward_image(t, &bound, pixels, false, None)?,
            Sample::Tokens { input, .. } => net.forward_tokens(t, &bound, input, false, None)?,
        };
        match sample {
            Sample::Image { label, .. } => t.cross_entropy(logits, &[label]),
            Sample::Tokens { targets, .. } => t.cross_entropy(logits, targets),
        }
    })
}

/// Runs every case of `scope` for seeds `0..seeds`, in parallel across cases.
pub fn run_scope(scope: Scope, seeds: u64, fault: Option<OpKind>, exec: Exec) -> Result<ScopeReport> {
    type Job = (String, Box<dyn Fn(u64) -> Result<Vec<GroupReport>> + Send + Sync>);
    let jobs: Vec<Job> = match scope {
        Scope::Ops => op_cases()
            .into_iter()
            .map(|(name, kind, variant)| -> Job { (name, Box::new(move |s| op_case(kind, variant, s, fault))) })
            .collect(),
        Scope::Block => BLOCK_CASES
            .iter()
            .map(|&(name, v, n)| -> Job { (name.to_string(), Box::new(move |s| block_case(v, n, s, fault))) })
            .collect(),
        Scope::Rk4 => RK4_CASES
            .iter()
            .map(|&(name, k, n)| -> Job { (name.to_string(), Box::new(move |s| rk4_case(k, n, s, fault))) })
            .collect(),
        Scope::Network => NETWORK_CASES
            .iter()
            .enumerate()
            .map(|(i, &name)| -> Job { (name.to_string(), Box::new(move |s| network_case(i, s, fault))) })
            .collect(),
    };
    let per = seeds as usize;
    let results = exec.map(jobs.len() * per, |i| {
        let (name, job) = &jobs[i / per];
        let seed = (i % per) as u64;
        let case_seed = derive_seed(&[seed, (i / per) as u64]);
        job(case_seed).map(|groups| CaseReport { case: name.clone(), seed, groups })
    });
    Ok(ScopeReport { scope, cases: results.into_iter().collect::<Result<Vec<_>>>()? })
}
