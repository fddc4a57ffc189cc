mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use partrans::blocks::{BlockDims, NormVariant};
use partrans::checkpoint;
use partrans::data::{ImageDataset, PatternedPatch, TextCorpus, MEMO_PATTERN};
use partrans::gradcheck::{self, Scope};
use partrans::integrators::{linear_field, measure_order, FrozenBlockField, Order, Scheme, ORDER_HORIZON};
use partrans::metrics::{MetricRecord, Split};
use partrans::network::{share_map, Network, NetworkConfig, Task};
use partrans::train::{self, derive_seed, Dataset, TrainConfig};
use partrans::{Error, OpKind, Result, Rng, Tensor};
use rand::SeedableRng;

use config::{ExecArg, FileConfig, ModelArgs, SchemeArg, TrainArgs};

#[derive(Parser)]
#[command(name = "partrans", version, about = "Sequential and parallel transformer layers as ODE integrator steps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from scratch; logs key=value metric lines.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalCmd),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckCmd),
    /// Trainable parameter count of a configuration.
    ParamCount(ParamCountCmd),
    /// Measured convergence order of Euler and RK4.
    OrderCheck(OrderCmd),
}

#[derive(clap::Args)]
struct TrainCmd {
    /// TOML file with [model] and [train] tables; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Best-validation checkpoint path; final weights go next to it as <stem>.last.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    exec: ExecArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(clap::Args)]
struct EvalCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model fields, checked against the checkpoint's stored configuration.
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, value_enum, default_value_t)]
    exec: ExecArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Block,
    Network,
    Rk4,
    All,
}

#[derive(clap::Args)]
struct GradcheckCmd {
    #[arg(long, value_enum, default_value = "all")]
    scope: ScopeArg,
    #[arg(long, default_value_t = gradcheck::SEEDS)]
    seeds: u64,
    /// Corrupt one op's backward rule (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    exec: ExecArg,
}

#[derive(clap::Args)]
struct ParamCountCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Print counts for every k dividing the depth.
    #[arg(long)]
    sweep: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldArg {
    Linear,
    Transformer,
    All,
}

#[derive(clap::Args)]
struct OrderCmd {
    /// Only this scheme (both when absent).
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long, value_enum, default_value = "all")]
    field: FieldArg,
    #[arg(long, default_value_t = ORDER_HORIZON)]
    horizon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn emit(line: impl std::fmt::Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn load_dataset(model: &NetworkConfig, tc: &TrainConfig, args: &TrainArgs) -> Result<Dataset> {
    match (&model.task, &tc.dataset) {
        (Task::Classify { .. }, Some(path)) => {
            let all = ImageDataset::load(path)?;
            let (train, val) = all.split(tc.val_fraction);
            Ok(Dataset::Images { train, val })
        }
        (&Task::Classify { channels, image_size, patch_size, classes }, None) => {
            let synth = PatternedPatch { channels, image_size, patch_size, classes };
            Ok(Dataset::Images {
                train: synth.generate(args.train_size.unwrap_or(256), derive_seed(&[tc.seed, 100]))?,
                val: synth.generate(args.val_size.unwrap_or(128), derive_seed(&[tc.seed, 101]))?,
            })
        }
        (Task::Lm { .. }, path) => {
            let corpus = match path {
                Some(p) => TextCorpus::load(p)?,
                None => TextCorpus::repeated(MEMO_PATTERN, 4096)?,
            };
            let (train, val) = corpus.split(tc.val_fraction);
            Ok(Dataset::Text { train, val })
        }
    }
}

fn run_train(cmd: TrainCmd) -> Result<ExitCode> {
    let file = FileConfig::load_opt(cmd.config.as_deref())?;
    let model_args = file.model.overlay(cmd.model);
    let train_args = file.train.overlay(cmd.train);
    let model = model_args.resolve()?;
    let tc = train_args.resolve()?;
    let data = load_dataset(&model, &tc, &train_args)?;
    let exec = cmd.exec.resolve();
    emit(format_args!(
        "event=start params={} depth={} independent_layers={} variant={:?} norm={:?} scheme={:?} seed={} exec={:?}",
        Network::build(model.clone(), tc.seed)?.param_count(),
        model.depth,
        model.independent_layers,
        model.variant,
        model.norm,
        model.scheme,
        tc.seed,
        exec
    ));
    let report = train::train(&model, &tc, &data, exec, cmd.checkpoint.as_deref(), &mut |r| emit(r))?;
    if let Some(best) = report.best_val {
        emit(format_args!("event=done steps={} best_step={} best_loss={:?}", report.steps, best.step, best.loss));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_eval(cmd: EvalCmd) -> Result<ExitCode> {
    let file = FileConfig::load_opt(cmd.config.as_deref())?;
    let model_args = file.model.overlay(cmd.model);
    let train_args = file.train.overlay(cmd.train);
    let net = checkpoint::load(&cmd.checkpoint)?;
    let stored = net.config().clone();
    if !model_args.is_empty() {
        let requested = model_args.apply(stored.clone())?;
        if requested != stored {
            return Err(Error::Config(format!(
                "requested model configuration does not match checkpoint {}",
                cmd.checkpoint.display()
            )));
        }
    }
    let tc = train_args.resolve()?;
    let data = load_dataset(&stored, &tc, &train_args)?;
    let (split, set) = match cmd.split {
        SplitArg::Val => (Split::Val, data.val(tc.seq_len)),
        SplitArg::Train => (Split::Train, data.train(tc.seq_len)),
    };
    let start = std::time::Instant::now();
    let (loss, quality) = train::evaluate(&net, set, tc.batch_size, cmd.exec.resolve())?;
    emit(MetricRecord { step: 0, split, loss, quality, seconds: start.elapsed().as_secs_f64() });
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(cmd: GradcheckCmd) -> Result<ExitCode> {
    let fault = match &cmd.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Input(format!("unknown op {name:?}")))?),
        None => None,
    };
    let scopes: Vec<Scope> = match cmd.scope {
        ScopeArg::Ops => vec![Scope::Ops],
        ScopeArg::Block => vec![Scope::Block],
        ScopeArg::Network => vec![Scope::Network],
        ScopeArg::Rk4 => vec![Scope::Rk4],
        ScopeArg::All => Scope::ALL.to_vec(),
    };
    let mut ok = true;
    for scope in scopes {
        let report = gradcheck::run_scope(scope, cmd.seeds, fault, cmd.exec.resolve())?;
        for (group, worst) in report.worst_by_group() {
            let status = if worst < gradcheck::REL_TOL { "pass" } else { "FAIL" };
            emit(format_args!("scope={scope} group={group} worst_rel={worst:.3e} status={status}"));
        }
        let failing = report.failing_cases();
        let status = if failing.is_empty() { "pass" } else { "FAIL" };
        emit(format_args!(
            "scope={scope} cases={} seeds={} tol={:e} status={status}{}",
            report.cases.len(),
            cmd.seeds,
            gradcheck::REL_TOL,
            if failing.is_empty() { String::new() } else { format!(" failing={}", failing.join(",")) }
        ));
        ok &= failing.is_empty();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_param_count(cmd: ParamCountCmd) -> Result<ExitCode> {
    let file = FileConfig::load_opt(cmd.config.as_deref())?;
    let cfg = file.model.overlay(cmd.model).resolve()?;
    let ks: Vec<usize> = if cmd.sweep {
        (1..=cfg.depth).filter(|k| share_map(cfg.depth, *k).is_ok()).collect()
    } else {
        vec![cfg.independent_layers]
    };
    for k in ks {
        let net = Network::build(NetworkConfig { independent_layers: k, ..cfg.clone() }, 0)?;
        emit(format_args!(
            "param_count={} depth={} independent_layers={k} variant={:?} norm={:?} outside_layers={}",
            net.param_count(),
            cfg.depth,
            cfg.variant,
            cfg.norm,
            net.param_count_outside_layers()
        ));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_order_check(cmd: OrderCmd) -> Result<ExitCode> {
    let schemes = match cmd.scheme {
        Some(SchemeArg::Euler) => vec![Scheme::Euler],
        Some(SchemeArg::Rk4) => vec![Scheme::Rk4],
        None => vec![Scheme::Euler, Scheme::Rk4],
    };
    let fields: &[&str] = match cmd.field {
        FieldArg::Linear => &["linear"],
        FieldArg::Transformer => &["transformer"],
        FieldArg::All => &["linear", "transformer"],
    };
    for &field in fields {
        for &scheme in &schemes {
            let order = if field == "linear" {
                measure_order(&mut linear_field(-1.0), scheme, &Tensor::scalar(1.0), cmd.horizon)?
            } else {
                let mut rng = Rng::seed_from_u64(cmd.seed);
                let dims = BlockDims { dim: 8, heads: 2, mlp_dim: 16, norms: 1 };
                let mut f = FrozenBlockField::random(dims, NormVariant::A, 0.5, &mut rng)?;
                let x0 = Tensor::uniform([4, 8], -1.0, 1.0, &mut rng);
                measure_order(&mut f, scheme, &x0, cmd.horizon)?
            };
            let band = match scheme {
                Scheme::Euler => 0.8..=1.2,
                Scheme::Rk4 => 3.5..=4.5,
            };
            match order {
                Order::Slope { slope, errors, .. } => emit(format_args!(
                    "field={field} scheme={scheme:?} slope={slope:.4} in_band={} errors={}",
                    band.contains(&slope),
                    errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(",")
                )),
                Order::Exact => emit(format_args!("field={field} scheme={scheme:?} exact=true")),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(c) => run_train(c),
        Cmd::Eval(c) => run_eval(c),
        Cmd::Gradcheck(c) => run_gradcheck(c),
        Cmd::ParamCount(c) => run_param_count(c),
        Cmd::OrderCheck(c) => run_order_check(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
