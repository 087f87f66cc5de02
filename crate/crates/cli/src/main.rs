//! `vera`: learn guiding questions, score videos and evaluate the scores.

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vera_core::scorer::Stages;

/// Bad invocation rather than a failed operation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "vera", version, about = "Guiding-question learning and frame-level anomaly scoring for frozen VLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set tau=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the simulated backend described by this world file.
    #[arg(long, value_name = "WORLD")]
    pub sim_world: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StageArg {
    Initial,
    Retrieval,
    Smoothing,
    Full,
}

impl From<StageArg> for Stages {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Initial => Stages::Initial,
            StageArg::Retrieval => Stages::Retrieval,
            StageArg::Smoothing => Stages::Smoothing,
            StageArg::Full => Stages::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn guiding questions on the training manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score every video of the test manifest.
    Score {
        #[command(flatten)]
        common: Common,
        /// Question file, `preset:qstar` or `preset:q0` (default: <out>/questions.json).
        #[arg(long, short)]
        questions: Option<String>,
        /// Comma-separated subset of video ids.
        #[arg(long, value_delimiter = ',')]
        videos: Vec<String>,
        /// Last pipeline stage applied.
        #[arg(long, value_enum, default_value = "full")]
        stages: StageArg,
    },
    /// Frame-level AUC and AP of a score directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Manifest with ground truth (default: `test_manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory of `<id>.csv` score files (default: <out>/scores).
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Re-run steps 2 and 3 over a grid of one parameter, reusing cached verdicts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        questions: Option<String>,
        /// One of k_ratio, kernel_size, sigma1, tau, sigma2_ratio.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Render a score file as an SVG chart with ground-truth shading.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        video: String,
        /// Score file (default: <out>/scores/<video>.csv).
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// SVG path (default: <out>/plots/<video>.svg).
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Ask the model about one segment and print its verdict and explanation.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        questions: Option<String>,
        #[arg(long)]
        video: String,
        /// 1-based segment number.
        #[arg(long)]
        segment: usize,
    },
    /// Convert a temporal annotation file into a test manifest.
    ImportUcf {
        /// Annotation file (`name category s1 e1 s2 e2`).
        annotations: PathBuf,
        /// Manifest to write.
        #[arg(long, short)]
        output: PathBuf,
        /// `name count` table of frame counts.
        #[arg(long)]
        frame_counts: Option<PathBuf>,
        /// Root substituted for `{root}` in the frame template.
        #[arg(long)]
        frames_root: Option<String>,
        #[arg(long, default_value = "{root}/{id}/{index:06}.jpg")]
        frame_source: String,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
    /// Generate a simulated benchmark and a config that runs against it.
    Synth {
        /// Directory for manifests, world and config.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        train_videos: usize,
        #[arg(long, default_value_t = 30)]
        test_videos: usize,
        /// Verdict accuracy with no keyword in the questions.
        #[arg(long, default_value_t = 0.6)]
        accuracy: f64,
        /// Disable keyword bonuses, so question learning cannot help.
        #[arg(long)]
        no_keywords: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, resume } => commands::train(&common, resume),
        Command::Score {
            common,
            questions,
            videos,
            stages,
        } => commands::score(&common, questions.as_deref(), &videos, stages.into()),
        Command::Eval {
            common,
            manifest,
            scores,
        } => commands::eval(&common, manifest, scores),
        Command::Sweep {
            common,
            questions,
            param,
            values,
        } => commands::sweep(&common, questions.as_deref(), &param, &values),
        Command::Plot {
            common,
            video,
            scores,
            manifest,
            svg,
        } => commands::plot(&common, &video, scores, manifest, svg),
        Command::Explain {
            common,
            questions,
            video,
            segment,
        } => commands::explain(&common, questions.as_deref(), &video, segment),
        Command::ImportUcf {
            annotations,
            output,
            frame_counts,
            frames_root,
            frame_source,
            fps,
        } => commands::import_ucf(&annotations, &output, frame_counts, frames_root, frame_source, fps),
        Command::Synth {
            out,
            train_videos,
            test_videos,
            accuracy,
            no_keywords,
            seed,
        } => commands::synth(&out, train_videos, test_videos, accuracy, !no_keywords, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
