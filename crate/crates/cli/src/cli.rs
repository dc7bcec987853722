//! Argument definitions. Every subcommand takes the same config trio:
//! `--config` file, repeatable `--set key=value` overrides, and `--seed`
//! overriding the global seed; flags always win over file values.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "claimrl",
    version,
    about = "Pipeline driver: corpus building, tokenizer and model training, \
             reward-driven optimization, and evaluation reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Join component, claims, and crosswalk tables into a labeled dataset
    BuildCorpus(BuildCorpusArgs),
    /// Generate the synthetic claim corpus with splits
    MakeFixture(MakeFixtureArgs),
    /// Learn the word vocabulary from a dataset
    TrainVocab(TrainVocabArgs),
    /// Supervised fine-tuning of the language model
    TrainSft(TrainSftArgs),
    /// Train the granted/pre-grant reward classifier
    TrainRm(TrainRmArgs),
    /// Optimize a checkpoint against a reward, anchored to its start state
    TrainPpo(TrainPpoArgs),
    /// Judge generations from two checkpoints with the classifier
    EvalGrantedRatio(EvalGrantedRatioArgs),
    /// Render CSV and SVG reports from a training log
    Report(ReportArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Run-config file: flat `key = value` lines with section prefixes
    /// (sft.lr, ppo.kl_coef); `#` starts a comment
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set ppo.kl_coef=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Global seed; stage seeds not set explicitly derive from it
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct BuildCorpusArgs {
    /// Component membership table (TSV: doc_id, appl_id, one 0/1 column per tag)
    #[arg(long)]
    pub components: PathBuf,
    /// Granted claims table (TSV: doc_id, claim_one)
    #[arg(long)]
    pub granted: PathBuf,
    /// Pre-grant claims table (TSV: doc_id, claim_one)
    #[arg(long)]
    pub pregrant: PathBuf,
    /// Application-to-grant crosswalk (TSV: appl_id, granted_doc_id)
    #[arg(long)]
    pub crosswalk: PathBuf,
    /// Component tag to keep (ML, EVO, NLP, SPEECH, VISION, KR, PLANNING, HARDWARE)
    #[arg(long)]
    pub component: String,
    /// Output directory for dataset.jsonl and train/val/test splits
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct MakeFixtureArgs {
    /// Output directory for dataset.jsonl and train/val/test splits
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct TrainVocabArgs {
    /// Training dataset (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Output vocabulary path (JSON)
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct TrainSftArgs {
    /// Training split (JSONL)
    #[arg(long)]
    pub train: PathBuf,
    /// Validation split (JSONL)
    #[arg(long)]
    pub val: PathBuf,
    /// Vocabulary file from train-vocab
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output directory for model.ckpt and sft_log.csv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct TrainRmArgs {
    /// Training split (JSONL)
    #[arg(long)]
    pub train: PathBuf,
    /// Validation split (JSONL)
    #[arg(long)]
    pub val: PathBuf,
    /// Vocabulary file from train-vocab
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output directory for rm.ckpt and rm_log.csv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum RewardKind {
    /// 0 without the end tag, else 1 + generated_chars / max_len
    Length,
    /// Count of limiting-term occurrences in the generation
    Terms,
    /// Length reward plus term count on the same truncated text
    Joint,
    /// Grant probability from a trained classifier checkpoint
    Model,
}

#[derive(Args)]
pub struct TrainPpoArgs {
    /// Prompt dataset (JSONL); prompts are the leading tokens of each claim
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary file from train-vocab
    #[arg(long)]
    pub vocab: PathBuf,
    /// Starting policy checkpoint; also frozen as the divergence anchor
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for model.ckpt, train_log.csv, samples.jsonl
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Reward driving the optimization
    #[arg(long, value_enum)]
    pub reward: RewardKind,
    /// Character budget for the length and joint rewards
    #[arg(long = "max-len", default_value_t = 512)]
    pub max_len: usize,
    /// Comma-separated limiting terms; trailing spaces are significant
    /// (default: "wherein ,whereby ,where ,when ")
    #[arg(long)]
    pub terms: Option<String>,
    /// Classifier checkpoint; required with --reward model
    #[arg(long = "rm-checkpoint")]
    pub rm_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct EvalGrantedRatioArgs {
    /// Prompt dataset (JSONL), normally the test split
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary file from train-vocab
    #[arg(long)]
    pub vocab: PathBuf,
    /// Policy checkpoint before optimization
    #[arg(long)]
    pub before: PathBuf,
    /// Policy checkpoint after optimization
    #[arg(long)]
    pub after: PathBuf,
    /// Classifier checkpoint that judges generations
    #[arg(long = "rm-checkpoint")]
    pub rm_checkpoint: PathBuf,
    /// Output report path (JSON)
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset label in the report (default: the data file stem)
    #[arg(long = "dataset-name")]
    pub dataset_name: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Optimization log (train_log.csv)
    #[arg(long = "train-log")]
    pub train_log: PathBuf,
    /// Optional granted-ratio report to include (JSON)
    #[arg(long)]
    pub granted: Option<PathBuf>,
    /// Output directory for report.csv and the SVG plots
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}
