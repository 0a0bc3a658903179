use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ossl_core::data::SyntheticConfig;
use ossl_core::losses::ConsistencyMode;
use ossl_core::pipeline::TrainConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ossl", version, about = "Prompt-driven open-set semi-supervised learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset or import CIFAR-10 into the dataset format.
    GenData(GenDataArgs),
    /// Supervised pre-training of backbone and ID prompt.
    Pretrain(PretrainArgs),
    /// Prompt-only fine-tuning on the unlabeled split.
    Finetune(StageArgs),
    /// Score the test split and write metrics.json.
    Eval(EvalArgs),
    /// gen-data (unless --data is given), pretrain, finetune and eval in one go.
    RunAll(RunAllArgs),
    /// Re-execute a run from its manifest and compare metrics.json.
    Reproduce(ReproduceArgs),
    /// Per-seed AUROC comparison of two groups of runs.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 2)]
    pub id_classes: usize,
    #[arg(long, default_value_t = 1)]
    pub ood_classes: usize,
    #[arg(long, default_value_t = 50)]
    pub labeled_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub unlabeled_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
}

impl SyntheticArgs {
    pub fn config(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_id_classes: self.id_classes,
            n_ood_classes: self.ood_classes,
            channels: self.channels,
            side: self.side,
            labeled_per_class: self.labeled_per_class,
            unlabeled_per_class: self.unlabeled_per_class,
            test_per_class: self.test_per_class,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generate the synthetic benchmark (the default source).
    #[arg(long, conflicts_with = "cifar")]
    pub synthetic: bool,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long, value_name = "DIR")]
    pub cifar: Option<PathBuf>,
    /// CIFAR-10 classes used as ID (default: the six animal classes).
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub cifar_id: Option<Vec<usize>>,
    #[command(flatten)]
    pub synth: SyntheticArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Literal,
    Absolute,
}

impl From<ModeArg> for ConsistencyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Literal => ConsistencyMode::Literal,
            ModeArg::Absolute => ConsistencyMode::Absolute,
        }
    }
}

fn parse_sign(s: &str) -> Result<f64, String> {
    match s {
        "+1" | "1" => Ok(1.0),
        "-1" => Ok(-1.0),
        _ => Err(format!("expected +1 or -1, got {s:?}")),
    }
}

/// Training flags shared by every stage; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Flat JSON TrainConfig; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt width.
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n_candidates: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// EMA decay of the teacher.
    #[arg(long)]
    pub ema: Option<f64>,
    #[arg(long)]
    pub epochs_pretrain: Option<usize>,
    #[arg(long)]
    pub epochs_finetune: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub consistency_mode: Option<ModeArg>,
    #[arg(long, value_parser = parse_sign, allow_hyphen_values = true)]
    pub cl_sign: Option<f64>,
    /// Disable prompt-wise contrastive learning.
    #[arg(long)]
    pub no_cl: bool,
    /// Replay a labeled batch at every fine-tuning step.
    #[arg(long)]
    pub replay_labeled: bool,
}

pub fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let raw = std::fs::read(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    serde_json::from_slice(&raw).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

impl TrainArgs {
    /// Config file (or `base`) with flag overrides applied, validated.
    pub fn resolve(&self, base: TrainConfig) -> CliResult<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => read_config(path)?,
            None => base,
        };
        macro_rules! set {
            ($field:ident, $value:expr) => {
                if let Some(v) = $value {
                    c.$field = v.into();
                }
            };
        }
        set!(seed, self.seed);
        set!(p, self.p);
        set!(n_candidates, self.n_candidates);
        set!(lambda, self.lambda);
        set!(eta, self.eta);
        set!(lr, self.lr);
        set!(momentum, self.momentum);
        set!(ema_decay, self.ema);
        set!(epochs_pretrain, self.epochs_pretrain);
        set!(epochs_finetune, self.epochs_finetune);
        set!(batch_size, self.batch_size);
        set!(consistency_mode, self.consistency_mode);
        set!(cl_sign, self.cl_sign);
        if self.no_cl {
            c.use_cl = false;
        }
        if self.replay_labeled {
            c.replay_labeled = true;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Run directory holding the previous stage's artifacts.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunAllArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Existing dataset directory; otherwise a synthetic one is generated per seed.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SyntheticArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Cartesian sweep, e.g. `p=2,4,8 n=3,5 lambda=0.3,0.5`. Keys: p, n, lambda,
    /// eta, lr, ema, seed, cl (on/off).
    #[arg(long, num_args = 1.., value_name = "KEY=V1,V2")]
    pub ablate: Vec<String>,
    /// Run sweep points concurrently.
    #[arg(long, requires = "ablate")]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// run_manifest.json of the run to re-execute.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories of variant A, one per seed.
    #[arg(long, num_args = 1.., required = true)]
    pub a: Vec<PathBuf>,
    /// Run directories of variant B, one per seed.
    #[arg(long, num_args = 1.., required = true)]
    pub b: Vec<PathBuf>,
    #[arg(long, default_value = "a")]
    pub name_a: String,
    #[arg(long, default_value = "b")]
    pub name_b: String,
    /// Output prefix; writes PREFIX.csv and PREFIX.md.
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
}
