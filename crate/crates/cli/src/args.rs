use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use anomaly_vqa::backbone::BackboneKind;
use anomaly_vqa::data::QuestionTemplate;
use anomaly_vqa::fusion::FusionStrategy;

#[derive(Debug, Parser)]
#[command(name = "anomaly-vqa", version, about = "Visual question answering over anomaly detection outputs")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML or JSON file whose keys mirror the long flags. A `[<command>]`
    /// table applies to that subcommand; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fixture dataset (manifest plus PNG images).
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint and the loss history.
    Train(TrainArgs),
    /// Score a checkpoint on a split and write report JSON and tables.
    Eval(EvalArgs),
    /// Answer one question about one case.
    Generate(GenerateArgs),
    /// Serve the model over HTTP.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Generate(_) => "generate",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Average,
    Concat,
    Channel,
}

impl From<FusionArg> for FusionStrategy {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Average => FusionStrategy::Average,
            FusionArg::Concat => FusionStrategy::Concat,
            FusionArg::Channel => FusionStrategy::Channel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Patch,
    Conv,
}

impl From<BackboneArg> for BackboneKind {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Patch => BackboneKind::PatchTransformer,
            BackboneArg::Conv => BackboneKind::ConvStack,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TemplateArg {
    IsNormal,
    DescribeCondition,
    Severity,
    MapReflectsDisease,
    DescribeDifferences,
}

impl From<TemplateArg> for QuestionTemplate {
    fn from(t: TemplateArg) -> Self {
        match t {
            TemplateArg::IsNormal => QuestionTemplate::IsNormal,
            TemplateArg::DescribeCondition => QuestionTemplate::DescribeCondition,
            TemplateArg::Severity => QuestionTemplate::Severity,
            TemplateArg::MapReflectsDisease => QuestionTemplate::MapReflectsDisease,
            TemplateArg::DescribeDifferences => QuestionTemplate::DescribeDifferences,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives manifest.json and images/.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub patients: usize,
    #[arg(long, default_value_t = 1)]
    pub cases_per_patient: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "healthy,tumor,edema,resection")]
    pub categories: Vec<String>,
    /// Categories flagged as open-set.
    #[arg(long, value_delimiter = ',')]
    pub unknown_categories: Vec<String>,
    /// Exact number of healthy cases.
    #[arg(long)]
    pub healthy_cases: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub templates: Vec<TemplateArg>,
    /// Draw lesions only into the anomaly map.
    #[arg(long)]
    pub signal_only_in_anomaly: bool,
    /// One brain texture for every case.
    #[arg(long)]
    pub shared_anatomy: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = FusionArg::Concat)]
    pub fusion: FusionArg,
    /// Insert the query transformer between backbone and fusion.
    #[arg(long)]
    pub kq: bool,
    #[arg(long, default_value_t = 8)]
    pub kq_queries: usize,
    #[arg(long, default_value_t = 64)]
    pub kq_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub kq_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub kq_heads: usize,
    /// Text-encoder archive used to initialize the query transformer.
    #[arg(long, value_name = "FILE")]
    pub knowledge_init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackboneArg::Patch)]
    pub backbone: BackboneArg,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Pretrained backbone archive.
    #[arg(long, value_name = "FILE")]
    pub backbone_weights: Option<PathBuf>,
    /// Keep backbone weights fixed during training.
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub decoder_heads: usize,
    /// Longest answer in tokens.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Full model configuration as JSON; replaces all architecture flags.
    #[arg(long, value_name = "FILE")]
    pub model_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for best.safetensors, history.csv and split.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1.5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Train and validate on every sample instead of a patient-wise split.
    #[arg(long)]
    pub no_split: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    pub beam_width: usize,
    /// Answer length cap; the checkpoint's own limit when unset.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Split written by `train`; recomputed from --split-seed when absent.
    #[arg(long, value_name = "FILE")]
    pub split_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Also evaluate with the anomaly map withheld and write the paired table.
    #[arg(long)]
    pub ablation: bool,
    /// External NLI judge as NAME=COMMAND, speaking JSON lines on stdio.
    #[arg(long, value_name = "NAME=COMMAND")]
    pub judge: Vec<String>,
    /// Skip the built-in lexical judge.
    #[arg(long)]
    pub no_stub_judge: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "case")]
    pub case_id: String,
    #[arg(long)]
    pub question: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Withhold the anomaly map.
    #[arg(long)]
    pub without_anomaly: bool,
    /// Print answer and score as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Without a checkpoint, /ask answers 503.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[command(flatten)]
    pub decode: DecodeArgs,
}
