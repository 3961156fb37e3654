//! Batch entry points for the G2P toolkit: data preparation, masked
//! pretraining, G2P training, evaluation, and single-word prediction.
//!
//! Every command funnels its randomness through one `--seed`, resolves
//! settings as flags > config file > defaults, and emits a run manifest
//! recording resolved settings plus input/output hashes. Exit codes:
//! 0 success, 1 usage error, 2 data error, 3 runtime/numerical error.

use clap::{Args, Parser, Subcommand};

mod config;
mod evaluate;
mod manifest;
mod predict;
mod prepare;
mod pretrain;
mod train;
mod util;

pub use manifest::RunManifest;

#[derive(Debug)]
pub enum CliError {
    /// Contradictory or malformed invocation; exit 1.
    Usage(String),
    /// Unreadable, unparsable, or inconsistent input data; exit 2.
    Data(String),
    /// Failure during compute or while writing results; exit 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gbert_core::data::DataError> for CliError {
    fn from(e: gbert_core::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<gbert_core::models::ModelError> for CliError {
    fn from(e: gbert_core::models::ModelError) -> Self {
        use gbert_core::models::ModelError;
        match e {
            ModelError::Tensor(t) => CliError::Runtime(t.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<gbert_core::train::TrainError> for CliError {
    fn from(e: gbert_core::train::TrainError) -> Self {
        use gbert_core::train::TrainError;
        match e {
            TrainError::BadConfig(m) => CliError::Usage(m.into()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::DataTooSmall(m) => CliError::Data(m.into()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<gbert_core::eval::EvalError> for CliError {
    fn from(e: gbert_core::eval::EvalError) -> Self {
        use gbert_core::eval::EvalError;
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<gbert_core::checkpoint::CheckpointError> for CliError {
    fn from(e: gbert_core::checkpoint::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "gbert",
    version,
    about = "Grapheme-to-phoneme models around a pretrained grapheme encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split a pronunciation lexicon into train/valid/test files.
    PrepareData(PrepareArgs),
    /// Pretrain a grapheme encoder on wordlists with masked prediction.
    Pretrain(PretrainArgs),
    /// Train a G2P model (baseline or one of the gbert variants).
    Train(TrainArgs),
    /// Score one or more checkpoints on a test lexicon.
    Evaluate(EvaluateArgs),
    /// Pronounce words with a trained checkpoint.
    Predict(PredictArgs),
}

#[derive(Args, Debug, Default)]
pub struct PrepareArgs {
    /// Lexicon TSV: `word<TAB>phoneme phoneme ...`.
    #[arg(long)]
    pub lexicon: String,
    /// Directory receiving the split files and manifest.
    #[arg(long)]
    pub out_dir: String,
    /// Optional key-value settings file (flags win).
    #[arg(long)]
    pub config: Option<String>,
    /// Training records; default: everything left after valid and test.
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation records (default 1000).
    #[arg(long)]
    pub valid: Option<usize>,
    /// Test records (default 1000).
    #[arg(long)]
    pub test: Option<usize>,
    /// Also sample this many training records into train_low.tsv.
    #[arg(long)]
    pub low_resource_n: Option<usize>,
    /// Decompose Hangul syllables in words into jamo.
    #[arg(long)]
    pub jamo: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct PretrainArgs {
    /// Wordlist file, one word per line; repeat for bilingual mixes.
    #[arg(long, required = true)]
    pub wordlist: Vec<String>,
    /// Language tag per wordlist, in the same order (omit when monolingual).
    #[arg(long)]
    pub lang: Vec<String>,
    /// Lexicon or wordlist files whose words must not be pretrained on
    /// (validation/test hygiene).
    #[arg(long)]
    pub exclude: Vec<String>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: String,
    /// Training log TSV (default: `<out>.log`).
    #[arg(long)]
    pub log: Option<String>,
    #[arg(long)]
    pub config: Option<String>,
    /// Fraction of maskable positions corrupted per word (default 0.2).
    #[arg(long)]
    pub mask_ratio: Option<f32>,
    /// Encoder depth (default 6).
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Steps between validation passes.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Validations without improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub grad_clip: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// baseline | frozen | finetune | fused.
    #[arg(long)]
    pub variant: String,
    /// Pretrained grapheme-encoder checkpoint (gbert variants only).
    #[arg(long)]
    pub gbert: Option<String>,
    /// Directory holding train.tsv and valid.tsv.
    #[arg(long)]
    pub data_dir: Option<String>,
    /// Explicit train lexicon (overrides --data-dir).
    #[arg(long)]
    pub train: Option<String>,
    /// Explicit validation lexicon (overrides --data-dir).
    #[arg(long)]
    pub valid: Option<String>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: String,
    /// Training log TSV (default: `<out>.log`).
    #[arg(long)]
    pub log: Option<String>,
    #[arg(long)]
    pub config: Option<String>,
    /// Language tag: a source prefix token for the baseline, an embedding
    /// index for gbert variants.
    #[arg(long)]
    pub lang_tag: Option<String>,
    /// Map unknown graphemes to `<unk>` instead of failing.
    #[arg(long)]
    pub allow_unk: bool,
    /// Drop-net probability for the fused variant (default 1.0).
    #[arg(long)]
    pub drop_net_p: Option<f32>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f32>,
    /// Learning rate for encoder-side parameters (pretrained stack included).
    #[arg(long)]
    pub lr_encoder: Option<f32>,
    /// Learning rate for decoder-side parameters.
    #[arg(long)]
    pub lr_decoder: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f32>,
    #[arg(long)]
    pub grad_clip: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct EvaluateArgs {
    /// Model checkpoint; repeat to aggregate over seeds.
    #[arg(long, required = true)]
    pub model: Vec<String>,
    /// Test lexicon TSV.
    #[arg(long)]
    pub test: String,
    /// Directory for per-model report TSVs (optional).
    #[arg(long)]
    pub out_dir: Option<String>,
    #[arg(long)]
    pub config: Option<String>,
    /// Beam width (default 5; 1 is greedy).
    #[arg(long)]
    pub beam: Option<usize>,
    /// Emission cap per word (default: 2 * graphemes + 5).
    #[arg(long)]
    pub max_decode_len: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct PredictArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: String,
    /// Word to pronounce; repeatable.
    #[arg(long, required = true)]
    pub word: Vec<String>,
    #[arg(long)]
    pub config: Option<String>,
    /// Beam width (default 5).
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_decode_len: Option<usize>,
    /// Write the run manifest here (predict writes no other files).
    #[arg(long)]
    pub manifest: Option<String>,
}

/// Run a parsed command to completion.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PrepareData(args) => prepare::run(args),
        Command::Pretrain(args) => pretrain::run(args),
        Command::Train(args) => train::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Predict(args) => predict::run(args),
    }
}
