use std::net::SocketAddr;
use std::path::PathBuf;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cxr_core::models::Arch;

/// Chest X-ray triage: build datasets, train and evaluate classifiers, and
/// serve predictions.
#[derive(Debug, Parser)]
#[command(name = "cxr", version, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for shuffling, splitting, weight init and synthesis.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Input channels (1 = grayscale, 3 = RGB). Inferred from the input file when omitted.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["1", "3"]).map(|s| s.parse::<usize>().unwrap()))]
    pub channels: Option<usize>,
    /// Suppress the configuration header and progress logs.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    /// Log format; `json` also makes every stdout line a JSON object.
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    pub log: LogFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a class-per-directory image tree into a dataset archive.
    Ingest(IngestArgs),
    /// Write a synthetic dataset archive.
    Synth(SynthArgs),
    /// Train a model on a dataset archive.
    Train(TrainArgs),
    /// Score a model on a dataset archive.
    Eval(EvalArgs),
    /// Classify one image and print the report as JSON.
    Predict(PredictArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
    /// Run gradient checks, the convolution oracle and roundtrip checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Root directory with one subdirectory per class.
    #[arg(long)]
    pub root: PathBuf,
    /// Output archive (.cxra).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the ingestion report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output archive (.cxra).
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class.
    #[arg(long)]
    pub per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Opt {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weighting {
    Off,
    InverseFrequency,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset archive (.cxra).
    #[arg(long)]
    pub data: PathBuf,
    /// Model family.
    #[arg(long, default_value_t = Arch::CustomCnn)]
    pub arch: Arch,
    /// Output model file (.cxrm).
    #[arg(long)]
    pub out: PathBuf,
    /// Passes over the training split.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 120)]
    pub batch: usize,
    /// Validation fraction.
    #[arg(long, default_value_t = 0.2)]
    pub val: f64,
    /// Channel width multiplier.
    #[arg(long, default_value_t = 1.0)]
    pub width_mult: f64,
    /// Optimizer.
    #[arg(long, value_enum, default_value_t = Opt::Adam)]
    pub opt: Opt,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Momentum for SGD.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Per-class loss weights.
    #[arg(long, value_enum, default_value_t = Weighting::Off)]
    pub class_weights: Weighting,
    /// Write the per-epoch history as CSV here.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset archive (.cxra).
    #[arg(long)]
    pub data: PathBuf,
    /// Model file (.cxrm).
    #[arg(long)]
    pub model: PathBuf,
    /// `val` re-derives the validation split from --seed and --val.
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Validation fraction used at training time.
    #[arg(long, default_value_t = 0.2)]
    pub val: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file (.cxrm).
    #[arg(long)]
    pub model: PathBuf,
    /// PNG, JPEG or PGM image.
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model file (.cxrm).
    #[arg(long)]
    pub model: PathBuf,
    /// Listen address; port 0 picks a free port.
    #[arg(long, default_value = cxr_serve::DEFAULT_BIND)]
    pub bind: SocketAddr,
    /// Largest accepted request body in bytes.
    #[arg(long, default_value_t = cxr_serve::DEFAULT_MAX_BODY)]
    pub max_body: usize,
    /// Directory of static files to serve at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifyLevel {
    Fast,
    Full,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// `fast` checks the custom CNN at quarter width, `full` at full width.
    #[arg(long, value_enum, default_value_t = VerifyLevel::Fast)]
    pub level: VerifyLevel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("cxr").chain(args.iter().copied()))
    }

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn train_defaults_are_the_reference_regime() {
        let cli = parse(&["train", "--data", "d.cxra", "--out", "m.cxrm"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!((t.epochs, t.batch, t.val), (10, 120, 0.2));
        assert_eq!((t.arch, t.opt, t.width_mult, t.lr), (Arch::CustomCnn, Opt::Adam, 1.0, 1e-3));
        assert_eq!(cli.global.seed, 0);
    }

    #[test]
    fn rejects_bad_input() {
        for args in [
            &["train", "--data", "d", "--out", "m", "--bogus"][..],
            &["train", "--data", "d", "--out", "m", "--arch", "resnet"],
            &["synth", "--out", "x", "--per-class", "5", "--channels", "2"],
            &["serve", "--model", "m", "--bind", "localhost"],
            &["frobnicate"],
        ] {
            let err = parse(args).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{args:?}");
        }
    }

    #[test]
    fn globals_work_after_the_subcommand() {
        let cli = parse(&["synth", "--out", "x", "--per-class", "5", "--seed", "7", "--channels", "3", "-q"]).unwrap();
        assert_eq!((cli.global.seed, cli.global.channels, cli.global.quiet), (7, Some(3), true));
    }

    #[test]
    fn help_documents_every_flag() {
        let mut cmd = Cli::command();
        cmd.build();
        for sub in cmd.get_subcommands() {
            for arg in sub.get_arguments().filter(|a| a.get_long().is_some()) {
                assert!(arg.get_help().is_some(), "{} --{} lacks help", sub.get_name(), arg.get_id());
            }
        }
    }
}
