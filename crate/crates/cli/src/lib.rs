//! One binary, one pipeline: every stage of the early-writing translation
//! workflow exposed as a subcommand with a shared config file and explicit
//! seeding.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn version_line() -> String {
    format!(
        "scrawl {TOOLKIT_VERSION} (checkpoint format v{}, lm format v{})",
        scrawl_core::model::CKPT_FORMAT_VERSION,
        scrawl_core::ngram::LM_FORMAT_VERSION,
    )
}

#[derive(Parser, Debug)]
#[command(
    name = "scrawl",
    about = "Translate noisy early-stage writing into conventional writing",
    disable_version_flag = true
)]
pub struct Cli {
    /// Print toolkit and file-format versions.
    #[arg(long, global = true)]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Shuffle a pair file into train/val/test files.
    Split(SplitArgs),
    /// Corrupt clean text into synthetic student/teacher pairs.
    Augment(AugmentArgs),
    /// Fit the smoothed n-gram language model on a pair file's teachers.
    LmTrain(LmTrainArgs),
    /// Train the encoder-decoder translation model.
    Train(TrainArgs),
    /// Decode translations for a pair or text file.
    Translate(TranslateArgs),
    /// Score predictions against teacher texts.
    Eval(EvalArgs),
    /// Fit the softmax temperature on validation pairs.
    Calibrate(CalibrateArgs),
    /// Per-bin calibration statistics (ECE/MCE).
    CalibReport(CalibReportArgs),
    /// Metric-vs-rejection-fraction curve from prediction confidences.
    RejectCurve(RejectCurveArgs),
    /// Run the whole experiment end to end from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Input pair file (JSON lines).
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output prefix; writes <prefix>.train, <prefix>.val, <prefix>.test.
    #[arg(long)]
    pub out_prefix: PathBuf,
    /// Comma-separated train,val,test ratios.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub ratios: String,
    #[arg(long)]
    pub seed: u64,
    /// Replace this fraction of train teachers with another pair's teacher.
    #[arg(long)]
    pub noise_rate: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Clean text, one sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output pair file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Config file providing the [augment] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LmTrainArgs {
    /// Pair file whose teacher texts feed the model.
    #[arg(long)]
    pub pairs: PathBuf,
    /// N-gram order.
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Interpolation constant k.
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file; defaults to building one from the pair file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Write the vocabulary used to this path.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// smoothed-ce | robust
    #[arg(long)]
    pub loss: Option<String>,
    /// Label smoothing epsilon.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Robust mixture noise rate alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fitted n-gram model (required for the robust loss).
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Warm-start from this checkpoint.
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    /// Vocabulary file; defaults to building one from the training pairs.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Vocabulary sidecar output; defaults to <out>.vocab.json.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
    /// Training-history CSV output.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Drop pairs longer than max_seq_len instead of failing.
    #[arg(long)]
    pub drop_too_long: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_encoder_layers: Option<usize>,
    #[arg(long)]
    pub n_decoder_layers: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Checkpoint to decode with.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Comma-separated checkpoints for deep-ensemble decoding.
    #[arg(long, value_delimiter = ',')]
    pub ensemble: Vec<PathBuf>,
    /// Copy the input through unchanged (Identity baseline).
    #[arg(long)]
    pub identity: bool,
    /// Vocabulary file (required unless --identity).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Pair file, or raw text with --raw-text.
    #[arg(long)]
    pub input: PathBuf,
    /// Treat the input as raw text, one student text per line.
    #[arg(long)]
    pub raw_text: bool,
    /// Output predictions (JSON lines: student, prediction, confidence).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Decode cap; defaults to the model's max_seq_len.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Pair file with teacher references.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Prediction file from `translate`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Machine-readable report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-pair detail CSV.
    #[arg(long)]
    pub per_pair: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Validation pairs to maximize likelihood on.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Sidecar output; defaults to <ckpt>.temp.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibReportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Softmax temperature to report at.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Read the temperature from a `calibrate` sidecar instead.
    #[arg(long, conflicts_with = "temperature")]
    pub temp_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Bin-statistics CSV output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RejectCurveArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Prediction file carrying confidences.
    #[arg(long)]
    pub pred: PathBuf,
    /// ned | fk-mae | lix-mae
    #[arg(long, default_value = "ned")]
    pub metric: String,
    /// Comma-separated rejection fractions; defaults to 0,0.05,...,0.95.
    #[arg(long)]
    pub grid: Option<String>,
    /// Curve CSV output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Config file naming the clean corpus and experiment settings.
    #[arg(long)]
    pub config: PathBuf,
    /// Artifact directory; overrides [paths].outputs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses and dispatches. `argv` starts with the subcommand (no program
/// name). Exit codes: 0 success, 1 usage error, 2 data/validation error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("scrawl"))
        .chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let kind = err.kind();
            if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = err.print();
                return 0;
            }
            let _ = err.print();
            if matches!(
                kind,
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand
            ) {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return 1;
        }
    };

    if cli.version {
        println!("{}", version_line());
        return 0;
    }
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        return 1;
    };

    let result = match command {
        Command::Split(args) => commands::split(args),
        Command::Augment(args) => commands::augment(args),
        Command::LmTrain(args) => commands::lm_train(args),
        Command::Train(args) => commands::train(args),
        Command::Translate(args) => commands::translate(args),
        Command::Eval(args) => commands::eval(args),
        Command::Calibrate(args) => commands::calibrate(args),
        Command::CalibReport(args) => commands::calib_report(args),
        Command::RejectCurve(args) => commands::reject_curve(args),
        Command::Pipeline(args) => pipeline::run(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::run;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(["bogus"]), 1);
    }

    #[test]
    fn train_without_seed_is_a_usage_error() {
        assert_eq!(run(["train", "--train", "a", "--val", "b", "--out", "c"]), 1);
    }

    #[test]
    fn version_flag_succeeds() {
        assert_eq!(run(["--version"]), 0);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        assert_eq!(
            run(["eval", "--pairs", "/nonexistent.jsonl", "--pred", "/nonexistent.jsonl"]),
            2
        );
    }
}
