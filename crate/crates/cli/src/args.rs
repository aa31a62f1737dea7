use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tbscreen", version, about = "Multimodal tuberculosis risk scoring from cough audio and demographics")]
pub struct Cli {
    /// Worker threads for fold, ablation and permutation parallelism
    /// (default: all available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort directory (cohort.csv plus audio/*.wav).
    Synth(SynthArgs),
    /// Cross-validated training; writes one bundle and history per fold.
    Train(TrainArgs),
    /// Score a labelled cohort with a trained bundle and report metrics.
    Eval(EvalArgs),
    /// Score one recording plus its tabular record; prints JSON.
    Score(ScoreArgs),
    /// Leave-one-out feature ablation table.
    Ablate(AblateArgs),
    /// t-SNE of acoustic profiles with Mantel, logistic/Wald and Welch tests.
    Stats(StatsArgs),
    /// Single-sample end-to-end inference latency.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of patients.
    #[arg(long, default_value_t = 1105)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output cohort directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Recording length in seconds.
    #[arg(long)]
    pub clip_secs: Option<f64>,
    /// Strength of the label signal in tabular columns, in [0, 1].
    #[arg(long)]
    pub tabular_coupling: Option<f64>,
    /// Strength of the label signal in the audio, in [0, 1].
    #[arg(long)]
    pub audio_coupling: Option<f64>,
    /// Comma-separated tabular columns allowed to carry signal.
    #[arg(long, value_delimiter = ',')]
    pub informative: Option<Vec<String>>,
    /// JSON synthesis config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Fused,
    Tabular,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Trbl,
    Bce,
}

/// Pipeline configuration file plus the flags that override it.
#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON document with dsp/gbdt/model/train/trbl sections, or a run
    /// manifest whose resolved config should be reused.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Positive-class weight of the risk-balanced loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub modality: Option<ModalityArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Cohort directory holding cohort.csv and audio/.
    #[arg(long)]
    pub cohort: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Decision threshold on the positive-class probability.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Also write an attribution heatmap over the first N patients.
    #[arg(long)]
    pub heatmap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// 16-bit PCM mono WAV.
    #[arg(long)]
    pub wav: PathBuf,
    /// JSON object keyed by tabular column (gender, hemoptysis, ...);
    /// null marks a missing value.
    #[arg(long)]
    pub tabular_json: PathBuf,
    /// Directory for a run manifest; nothing is written without it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Comma-separated features to withhold (default: every registered one).
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub n_iter: usize,
    /// Mantel permutations.
    #[arg(long, default_value_t = 9999)]
    pub perms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Cohort whose recordings are cycled through as inputs.
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Timed single-sample inferences.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
}
