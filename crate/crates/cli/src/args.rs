use std::path::PathBuf;

use clap::{Args, Subcommand};
use lama_core::bench::BenchKind;
use lama_core::classifier::RegularizerKind;
use lama_core::model::{ContextMode, Encoder};
use lama_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train a model and write a checkpoint directory.
    Train(TrainCmd),
    /// Accuracy, per-class precision/recall and confusion matrix as JSON.
    Eval(EvalCmd),
    /// Export per-document attention as JSON lines.
    Attend(AttendCmd),
    /// Rank words by attention from an `attend` export.
    Topwords(TopwordsCmd),
    /// Parameter counts over a head grid, against the Transformer baseline.
    Params(ParamsCmd),
    /// Forward-pass runtime against sequence length.
    Bench(BenchCmd),
    /// Train one model per head count and tabulate validation accuracy.
    HeadsSweep(SweepCmd),
    /// Re-run a command from its `.run.json` manifest.
    Replay(ReplayCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Attend(_) => "attend",
            Command::Topwords(_) => "topwords",
            Command::Params(_) => "params",
            Command::Bench(_) => "bench",
            Command::HeadsSweep(_) => "heads-sweep",
            Command::Replay(_) => "replay",
        }
    }

    /// The same invocation with every optional setting filled in.
    pub fn resolved(&self) -> Command {
        match self {
            Command::Train(c) => Command::Train(TrainCmd {
                model: ModelArgs::from_config(&c.model.config()),
                ..c.clone()
            }),
            Command::HeadsSweep(c) => Command::HeadsSweep(SweepCmd {
                model: ModelArgs::from_config(&c.model.config()),
                ..c.clone()
            }),
            other => other.clone(),
        }
    }
}

/// Model and optimizer settings; anything left out takes the default.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Attention heads `m`.
    #[arg(long, short = 'm')]
    pub heads: Option<usize>,
    /// GRU hidden size per direction.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// none, positions or embeddings.
    #[arg(long)]
    pub regularizer: Option<RegularizerKind>,
    /// learned or doc-mean.
    #[arg(long)]
    pub ctx: Option<ContextMode>,
    /// bigru or le.
    #[arg(long)]
    pub encoder: Option<Encoder>,
    /// Minimum token frequency for the vocabulary.
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pretrained vectors, one `token v1 .. vd` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

impl ModelArgs {
    pub fn config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            hidden: self.hidden.unwrap_or(d.hidden),
            heads: self.heads.unwrap_or(d.heads),
            mlp_hidden: self.mlp_hidden.unwrap_or(d.mlp_hidden),
            max_len: self.max_len.unwrap_or(d.max_len),
            batch: self.batch.unwrap_or(d.batch),
            lr: self.lr.unwrap_or(d.lr),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            dropout: self.dropout.unwrap_or(d.dropout),
            patience: self.patience.unwrap_or(d.patience),
            lambda: self.lambda.unwrap_or(d.lambda),
            regularizer: self.regularizer.unwrap_or(d.regularizer),
            context: self.ctx.unwrap_or(d.context),
            encoder: self.encoder.unwrap_or(d.encoder),
            max_epochs: self.epochs.unwrap_or(d.max_epochs),
            min_count: self.min_count.unwrap_or(d.min_count),
            seed: self.seed.unwrap_or(d.seed),
            embeddings: self.embeddings.clone().or(d.embeddings),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            heads: Some(c.heads),
            hidden: Some(c.hidden),
            embed_dim: Some(c.embed_dim),
            mlp_hidden: Some(c.mlp_hidden),
            max_len: Some(c.max_len),
            epochs: Some(c.max_epochs),
            lr: Some(c.lr),
            momentum: Some(c.momentum),
            weight_decay: Some(c.weight_decay),
            dropout: Some(c.dropout),
            batch: Some(c.batch),
            patience: Some(c.patience),
            lambda: Some(c.lambda),
            regularizer: Some(c.regularizer),
            ctx: Some(c.context),
            encoder: Some(c.encoder),
            min_count: Some(c.min_count),
            seed: Some(c.seed),
            embeddings: c.embeddings.clone(),
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainCmd {
    /// Training TSV (`label<TAB>text`).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation TSV used for early stopping.
    #[arg(long)]
    pub valid: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AttendCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "attention.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TopwordsCmd {
    /// JSON lines written by `attend`.
    #[arg(long)]
    pub attention: PathBuf,
    /// Only documents whose true label is this class.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = lama_core::interpret::DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Words seen fewer times are skipped.
    #[arg(long, default_value_t = lama_core::interpret::DEFAULT_MIN_OCCURRENCES)]
    pub min_occurrences: usize,
    #[arg(long, default_value = "topwords.tsv")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ParamsCmd {
    #[arg(long, short = 'm', value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    pub heads: Vec<usize>,
    /// Annotation width `2h`; the embedding width is set equal to it.
    #[arg(long, default_value_t = 512)]
    pub d_ann: usize,
    #[arg(long, default_value_t = 10_000)]
    pub vocab: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = lama_core::classifier::DEFAULT_MLP_HIDDEN)]
    pub mlp_hidden: usize,
    /// learned or doc-mean.
    #[arg(long, default_value = "doc-mean")]
    pub ctx: ContextMode,
    #[arg(long, default_value_t = 512)]
    pub te_d_model: usize,
    #[arg(long, default_value_t = 2048)]
    pub te_d_ff: usize,
    #[arg(long, default_value = "params.csv")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BenchCmd {
    /// le or te.
    #[arg(long)]
    pub kind: BenchKind,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    /// Embedding width (LE) or `d_model` (TE).
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, short = 'm', default_value_t = 4)]
    pub heads: usize,
    /// Each trial repeats the pass until at least this many seconds.
    #[arg(long, default_value_t = 0.02)]
    pub min_trial_seconds: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SweepCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    /// Head counts to train.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,15,16,32")]
    pub grid: Vec<usize>,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayCmd {
    /// A `.run.json` file written by an earlier command.
    pub manifest: PathBuf,
}
