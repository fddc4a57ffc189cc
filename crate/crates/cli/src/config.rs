//! Command-line and TOML configuration. Every field is optional; a file is
//! read first and flags given on the command line replace its values.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use partrans::blocks::{BlockVariant, NormVariant};
use partrans::integrators::Scheme;
use partrans::network::{NetworkConfig, Preset, Task};
use partrans::train::TrainConfig;
use partrans::{Error, Exec, Result};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
pub enum PresetArg {
    #[value(name = "deit_ti")]
    #[serde(rename = "deit_ti")]
    DeitTi,
    #[value(name = "nlp_small")]
    #[serde(rename = "nlp_small")]
    NlpSmall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Classify,
    Lm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
pub enum NormArg {
    #[value(name = "none")]
    #[serde(rename = "none")]
    None,
    #[value(name = "A")]
    A,
    #[value(name = "B")]
    B,
    #[value(name = "C")]
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ExecArg {
    Sequential,
    #[default]
    Parallel,
}

impl ExecArg {
    pub fn resolve(self) -> Exec {
        match self {
            ExecArg::Sequential => Exec::Sequential,
            #[cfg(feature = "parallel")]
            ExecArg::Parallel => Exec::Parallel,
            #[cfg(not(feature = "parallel"))]
            ExecArg::Parallel => Exec::Sequential,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    /// Architecture preset.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Number of layers D.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Number of independent parameter sets k (must divide D).
    #[arg(long)]
    pub independent_layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub stoch_depth_p: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub cosine: Option<bool>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Image file or UTF-8 text file; synthetic data when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Synthetic training images.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Synthetic validation images.
    #[arg(long)]
    pub val_size: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, [$($f:ident),*]) => {{
        let (mut b, t) = ($base, $top);
        $( if t.$f.is_some() { b.$f = t.$f; } )*
        b
    }};
}

impl ModelArgs {
    pub fn overlay(self, top: ModelArgs) -> ModelArgs {
        overlay!(
            self,
            top,
            [
                preset,
                task,
                depth,
                independent_layers,
                dim,
                heads,
                mlp_dim,
                variant,
                norm,
                scheme,
                dropout_p,
                stoch_depth_p,
                channels,
                image_size,
                patch_size,
                classes,
                vocab,
                max_len
            ]
        )
    }

    fn base(&self) -> Result<NetworkConfig> {
        let cfg = match (self.preset, self.task) {
            (Some(PresetArg::DeitTi), Some(TaskArg::Lm)) | (Some(PresetArg::NlpSmall), Some(TaskArg::Classify)) => {
                return Err(Error::Config("preset and task disagree".into()))
            }
            (Some(PresetArg::DeitTi), _) => NetworkConfig::deit_ti(100, 224, 16),
            (Some(PresetArg::NlpSmall), _) => NetworkConfig::nlp_small(256, 128),
            (None, Some(TaskArg::Lm)) => NetworkConfig::desk_lm(64),
            (None, _) => NetworkConfig::desk_classify(),
        };
        Ok(cfg)
    }

    /// Preset (or desk-scale default) with every given field applied on top.
    pub fn resolve(&self) -> Result<NetworkConfig> {
        let base = self.base()?;
        let cfg = self.apply(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the given fields to an existing configuration.
    pub fn apply(&self, mut cfg: NetworkConfig) -> Result<NetworkConfig> {
        if let Some(d) = self.depth {
            cfg.depth = d;
            if self.independent_layers.is_none() {
                cfg.independent_layers = d;
            }
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(independent_layers, dim, heads, mlp_dim, dropout_p, stoch_depth_p);
        if let Some(v) = self.variant {
            cfg.variant = match v {
                VariantArg::Sequential => BlockVariant::Sequential,
                VariantArg::Parallel => BlockVariant::Parallel,
            };
        }
        if let Some(n) = self.norm {
            cfg.norm = match n {
                NormArg::None => NormVariant::None,
                NormArg::A => NormVariant::A,
                NormArg::B => NormVariant::B,
                NormArg::C => NormVariant::C,
            };
        }
        if let Some(s) = self.scheme {
            cfg.scheme = match s {
                SchemeArg::Euler => Scheme::Euler,
                SchemeArg::Rk4 => Scheme::Rk4,
            };
        }
        if let Some(p) = self.preset {
            cfg.preset = Some(match p {
                PresetArg::DeitTi => Preset::DeitTi,
                PresetArg::NlpSmall => Preset::NlpSmall,
            });
        }
        let image_flags = self.channels.or(self.image_size).or(self.patch_size).or(self.classes);
        let lm_flags = self.vocab.or(self.max_len);
        match &mut cfg.task {
            Task::Classify { channels, image_size, patch_size, classes } => {
                if lm_flags.is_some() {
                    return Err(Error::Config("--vocab/--max-len apply to the lm task only".into()));
                }
                *channels = self.channels.unwrap_or(*channels);
                *image_size = self.image_size.unwrap_or(*image_size);
                *patch_size = self.patch_size.unwrap_or(*patch_size);
                *classes = self.classes.unwrap_or(*classes);
            }
            Task::Lm { vocab, max_len } => {
                if image_flags.is_some() {
                    return Err(Error::Config("image geometry flags apply to the classify task only".into()));
                }
                *vocab = self.vocab.unwrap_or(*vocab);
                *max_len = self.max_len.unwrap_or(*max_len);
            }
        }
        Ok(cfg)
    }

    pub fn is_empty(&self) -> bool {
        *self == ModelArgs::default()
    }
}

impl TrainArgs {
    pub fn overlay(self, top: TrainArgs) -> TrainArgs {
        overlay!(
            self,
            top,
            [
                epochs,
                max_steps,
                batch_size,
                lr,
                warmup_steps,
                cosine,
                weight_decay,
                seed,
                eval_interval,
                seq_len,
                dataset,
                val_fraction,
                train_size,
                val_size
            ]
        )
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )* };
        }
        set!(epochs, batch_size, lr, warmup_steps, cosine, weight_decay, seed, eval_interval, seq_len, val_fraction);
        cfg.max_steps = self.max_steps;
        cfg.dataset = self.dataset.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Layout of the optional TOML file: `[model]` and `[train]` tables.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelArgs,
    pub train: TrainArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).unwrap_or_else(|| Ok(Self::default()))
    }
}
