//! `dblstm` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dblstm_core::train::Task;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config values or input files.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] dblstm_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use dblstm_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Divergence { .. }) => 3,
            CliError::Core(E::Io(_) | E::Json(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "dblstm", version, about = "Train and evaluate dynamically-biased LSTM cells on ECG signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Hyperparameter overrides shared by the training commands; each wins over the config file.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Learning rate [default: 0.1 forecast, 0.01 classify]
    #[arg(long)]
    pub eta: Option<f64>,

    /// L2 weight penalty [default: 0.01]
    #[arg(long)]
    pub penalty: Option<f64>,

    /// Gradient clip threshold, `inf` to disable [default: inf forecast, 0.05 classify]
    #[arg(long)]
    pub clip: Option<f64>,

    /// Epochs [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Quantization bits, 0 for full precision [default: full precision]
    #[arg(long)]
    pub bits: Option<u32>,

    /// Seed for weights and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Cell type: dblstm or lstm [default: dblstm]
    #[arg(long)]
    pub cell: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic annotated ECG as series and annotation CSVs
    SynthEcg {
        /// Comma-separated beat classes, emitted round-robin
        #[arg(long, default_value = "N,L,R,A,V")]
        classes: String,

        /// Beats per class
        #[arg(long, default_value_t = 260)]
        beats: usize,

        /// Samples per beat
        #[arg(long, default_value_t = 300)]
        period: usize,

        /// Uniform noise amplitude
        #[arg(long, default_value_t = 0.05)]
        noise: f64,

        /// Relative per-beat variation of the wave shapes
        #[arg(long, default_value_t = 0.1)]
        variability: f64,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        /// Output directory for series.csv and annotations.csv
        #[arg(long)]
        out: PathBuf,
    },

    /// Train the forecasting head on one series
    TrainForecast {
        /// `key = value` config file
        #[arg(long)]
        config: Option<PathBuf>,

        /// Series CSV (`index,value`)
        #[arg(long)]
        series: Option<PathBuf>,

        /// Output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,

        /// Forecast horizon in samples [default: 280]
        #[arg(long)]
        delay: Option<usize>,

        /// Training window length in samples [default: 280]
        #[arg(long)]
        k: Option<usize>,

        #[command(flatten)]
        overrides: Overrides,
    },

    /// Train the five-class beat classifier
    TrainClassify {
        /// `key = value` config file
        #[arg(long)]
        config: Option<PathBuf>,

        /// Series CSV (`index,value`)
        #[arg(long)]
        series: Option<PathBuf>,

        /// Annotation CSV (`sample_index,label`)
        #[arg(long)]
        annotations: Option<PathBuf>,

        /// Output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,

        /// Window length in samples [default: 180]
        #[arg(long)]
        k: Option<usize>,

        /// Hidden size [default: 32]
        #[arg(long)]
        hidden: Option<usize>,

        #[command(flatten)]
        overrides: Overrides,
    },

    /// Train once per weight resolution with a shared seed
    QuantizeSweep {
        /// `key = value` config file
        #[arg(long)]
        config: Option<PathBuf>,

        /// forecast or classify
        #[arg(long, default_value = "classify")]
        task: Task,

        /// Comma-separated bits; 0 or 32 and above mean full precision
        #[arg(long, default_value = "1,2,3,4,32")]
        bits: String,

        /// Series CSV (`index,value`)
        #[arg(long)]
        series: Option<PathBuf>,

        /// Annotation CSV (`sample_index,label`)
        #[arg(long)]
        annotations: Option<PathBuf>,

        /// Output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,

        /// Epochs [default: 100]
        #[arg(long)]
        epochs: Option<usize>,

        /// Seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
    },

    /// Train DB-LSTM and the conventional LSTM side by side over several seeds
    CompareBaseline {
        /// `key = value` config file
        #[arg(long)]
        config: Option<PathBuf>,

        /// forecast or classify
        #[arg(long, default_value = "forecast")]
        task: Task,

        /// Comma-separated seeds, at least three
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,

        /// Series CSV (`index,value`)
        #[arg(long)]
        series: Option<PathBuf>,

        /// Annotation CSV (`sample_index,label`)
        #[arg(long)]
        annotations: Option<PathBuf>,

        /// Output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,

        /// Epochs [default: 100]
        #[arg(long)]
        epochs: Option<usize>,
    },

    /// Run saved weights over a series
    Evaluate {
        /// Weight file written by a training command
        #[arg(long)]
        weights: PathBuf,

        /// Series CSV (`index,value`)
        #[arg(long)]
        series: PathBuf,

        /// Beat annotations; without them a classifier labels consecutive windows
        #[arg(long)]
        annotations: Option<PathBuf>,

        /// forecast or classify; must match the weight file
        #[arg(long)]
        task: Task,

        /// Config used for training, for its preprocessing and split settings
        #[arg(long)]
        config: Option<PathBuf>,

        /// Forecast horizon in samples [default: 280]
        #[arg(long)]
        delay: Option<usize>,

        /// First input sample of the forecast window
        #[arg(long, default_value_t = 0)]
        start: usize,

        /// Classify only the validation split of the training config
        #[arg(long)]
        validation_only: bool,

        /// Output directory
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthEcg { classes, beats, period, noise, variability, seed, out } => {
            commands::synth_ecg(&classes, beats, period, noise, variability, seed, &out)
        }
        Command::TrainForecast { config, series, out_dir, delay, k, overrides } => {
            let mut s = commands::settings(Task::Forecast, config.as_deref(), &overrides)?;
            s.series = series.or(s.series);
            s.out_dir = out_dir.or(s.out_dir);
            s.delay = delay.unwrap_or(s.delay);
            s.run.k = k.unwrap_or(s.run.k);
            commands::train_forecast(&s)
        }
        Command::TrainClassify { config, series, annotations, out_dir, k, hidden, overrides } => {
            let mut s = commands::settings(Task::Classify, config.as_deref(), &overrides)?;
            s.series = series.or(s.series);
            s.annotations = annotations.or(s.annotations);
            s.out_dir = out_dir.or(s.out_dir);
            s.run.k = k.unwrap_or(s.run.k);
            s.run.hidden = hidden.unwrap_or(s.run.hidden);
            commands::train_classify(&s)
        }
        Command::QuantizeSweep { config, task, bits, series, annotations, out_dir, epochs, seed } => {
            let overrides = Overrides { epochs, seed, ..Overrides::default() };
            let mut s = commands::settings(task, config.as_deref(), &overrides)?;
            s.series = series.or(s.series);
            s.annotations = annotations.or(s.annotations);
            s.out_dir = out_dir.or(s.out_dir);
            let bits = commands::parse_list::<u32>("bits", &bits)?;
            commands::quantize_sweep(&s, &bits)
        }
        Command::CompareBaseline { config, task, seeds, series, annotations, out_dir, epochs } => {
            let overrides = Overrides { epochs, ..Overrides::default() };
            let mut s = commands::settings(task, config.as_deref(), &overrides)?;
            s.series = series.or(s.series);
            s.annotations = annotations.or(s.annotations);
            s.out_dir = out_dir.or(s.out_dir);
            let seeds = commands::parse_list::<u64>("seeds", &seeds)?;
            commands::compare_baseline(&s, &seeds)
        }
        Command::Evaluate { weights, series, annotations, task, config, delay, start, validation_only, out_dir } => {
            let mut s = commands::settings(task, config.as_deref(), &Overrides::default())?;
            s.delay = delay.unwrap_or(s.delay);
            let eval = commands::EvalRequest { weights, series, annotations, start, validation_only, out_dir };
            commands::evaluate(&s, &eval)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
