use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use la2former::bench::AttentionKind;
use la2former::training::LossVariant;

use crate::config::{defaults_help, parse_loss, RunConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "la2former", version, about = "Locality-aware attention neural operator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write its report and checkpoints.
    #[command(after_help = defaults_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train one model per patch size and tabulate error and epoch time.
    #[command(after_help = defaults_help())]
    AblateWindow(AblateArgs),
    /// Train over hidden widths and depths under a fixed budget.
    #[command(after_help = defaults_help())]
    ScaleStudy(ScaleArgs),
    /// Time attention branches against the dense pairwise reference.
    Bench(BenchArgs),
    /// Print the per-layer soft-mask parameters of a checkpoint.
    DumpMask(DumpMaskArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Darcy,
    Pointcloud,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Grid nodes per side (darcy).
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    /// Points per sample (pointcloud).
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Config file plus flag overrides shared by the training commands.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Patch size.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_hidden: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossVariant>,
    /// Seeds both parameter initialization and data shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    /// Config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($dst:ident).+;)*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($dst).+ = v; })*
            };
        }
        set! {
            layers => model.layers;
            hidden => model.hidden;
            k => model.k;
            alpha => model.alpha;
            heads => model.heads;
            epochs => train.epochs;
            batch_size => train.batch_size;
            lr => train.lr;
            lr_min => train.lr_min;
            weight_decay => train.weight_decay;
            clip_norm => train.clip_norm;
            loss => train.loss;
            seed => train.seed;
            seed => model.seed;
        }
        if let Some(ff) = self.ff_hidden {
            cfg.model.ff_hidden = Some(ff);
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Directory for the per-sample CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Patch sizes to compare.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Hidden widths; defaults to the configured width.
    #[arg(long, value_delimiter = ',')]
    pub widths: Vec<usize>,
    /// Layer counts; defaults to the configured depth.
    #[arg(long, value_delimiter = ',')]
    pub depths: Vec<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "global,local,dense")]
    pub kinds: Vec<KindArg>,
    /// Point counts.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    pub points: Vec<usize>,
    /// Patch sizes (local attention only).
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub hidden: Vec<usize>,
    /// Timed repeats after one warm-up.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Cases whose estimated working set exceeds this are rejected.
    #[arg(long, default_value_t = 2048)]
    pub memory_cap_mb: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Global,
    Local,
    Dense,
}

impl From<KindArg> for AttentionKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Global => AttentionKind::Global,
            KindArg::Local => AttentionKind::Local,
            KindArg::Dense => AttentionKind::Dense,
        }
    }
}

#[derive(Debug, Args)]
pub struct DumpMaskArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for `mask.csv`; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
