//! `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every assignment is
//! validated as it is read, so a bad value is reported against its own line.

use std::path::{Path, PathBuf};

use dblstm_core::backprop::ClipMode;
use dblstm_core::signal::{DenoiseConfig, SeriesPrep, WindowPrep, DEFAULT_PEAK};
use dblstm_core::train::{CellKind, RunConfig, Task};

use crate::CliError;

/// Everything a command needs besides its flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub cell: CellKind,
    pub series: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Forecast horizon in samples.
    pub delay: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Soft threshold of the wavelet denoiser; `none` disables denoising.
    pub denoise: Option<f64>,
    pub denoise_levels: usize,
    pub zscore: bool,
    /// Forecast series peak after z-scoring; `none` keeps raw z-scores.
    pub peak: Option<f64>,
    /// Epochs-to-threshold target for comparisons; task default when absent.
    pub threshold: Option<f64>,
}

pub const DEFAULT_DELAY: usize = 280;
pub const DEFAULT_TRAIN_PER_CLASS: usize = 200;
pub const DEFAULT_VAL_PER_CLASS: usize = 50;

impl Settings {
    pub fn defaults(task: Task) -> Self {
        let denoise = DenoiseConfig::default();
        Settings {
            run: match task {
                Task::Forecast => RunConfig::forecast_defaults(),
                Task::Classify => RunConfig::classify_defaults(),
            },
            cell: CellKind::Dblstm,
            series: None,
            annotations: None,
            out_dir: None,
            delay: DEFAULT_DELAY,
            train_per_class: DEFAULT_TRAIN_PER_CLASS,
            val_per_class: DEFAULT_VAL_PER_CLASS,
            denoise: Some(denoise.threshold),
            denoise_levels: denoise.levels,
            zscore: true,
            peak: Some(DEFAULT_PEAK),
            threshold: None,
        }
    }

    fn denoise_config(&self) -> Option<DenoiseConfig> {
        self.denoise.map(|threshold| DenoiseConfig { threshold, levels: self.denoise_levels })
    }

    pub fn series_prep(&self) -> SeriesPrep {
        SeriesPrep { denoise: self.denoise_config(), zscore: self.zscore, peak: self.peak }
    }

    pub fn window_prep(&self) -> WindowPrep {
        WindowPrep { denoise: self.denoise_config(), zscore: self.zscore }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.run.validate().map_err(|e| e.to_string())?;
        if self.delay == 0 {
            return Err("delay must be positive".into());
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return Err("train_per_class and val_per_class must be positive".into());
        }
        if self.denoise.is_some_and(|t| !(t >= 0.0 && t.is_finite())) {
            return Err("denoise threshold must be non-negative".into());
        }
        if self.denoise_levels == 0 {
            return Err("denoise_levels must be positive".into());
        }
        if self.peak.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            return Err("peak must be positive".into());
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("bad value `{value}` for `{key}`: {e}"))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_cell(value: &str) -> Result<CellKind, String> {
    match value {
        "dblstm" => Ok(CellKind::Dblstm),
        "lstm" => Ok(CellKind::Lstm),
        other => Err(format!("unknown cell `{other}` (expected dblstm or lstm)")),
    }
}

/// Sets one key. `0` for `bits` means full precision.
fn assign(s: &mut Settings, key: &str, value: &str) -> Result<(), String> {
    match key {
        "task" => {
            let task: Task = parse(key, value)?;
            if task != s.run.task {
                return Err(format!("task `{value}` does not match this command"));
            }
        }
        "eta" => s.run.eta = parse(key, value)?,
        "weight_penalty" => s.run.weight_penalty = parse(key, value)?,
        "clip" => s.run.clip = parse(key, value)?,
        "clip_mode" => s.run.clip_mode = parse::<ClipMode>(key, value)?,
        "epochs" => s.run.epochs = parse(key, value)?,
        "k" => s.run.k = parse(key, value)?,
        "hidden" => s.run.hidden = parse(key, value)?,
        "bits" => s.run.bits = parse_opt::<u32>(key, value)?.filter(|&b| b != 0),
        "inplace_quant" => s.run.inplace_quant = parse(key, value)?,
        "seed" => s.run.seed = parse(key, value)?,
        "init_scale" => s.run.init_scale = parse(key, value)?,
        "bias_value" => s.run.bias_value = parse_opt(key, value)?,
        "cell" => s.cell = parse_cell(value)?,
        "series" => s.series = Some(PathBuf::from(value)),
        "annotations" => s.annotations = Some(PathBuf::from(value)),
        "out_dir" => s.out_dir = Some(PathBuf::from(value)),
        "delay" => s.delay = parse(key, value)?,
        "train_per_class" => s.train_per_class = parse(key, value)?,
        "val_per_class" => s.val_per_class = parse(key, value)?,
        "denoise" => s.denoise = parse_opt(key, value)?,
        "denoise_levels" => s.denoise_levels = parse(key, value)?,
        "zscore" => s.zscore = parse(key, value)?,
        "peak" => s.peak = parse_opt(key, value)?,
        "threshold" => s.threshold = parse_opt(key, value)?,
        other => return Err(format!("unknown key `{other}`")),
    }
    s.validate()
}

/// Applies the assignments in `text` on top of `base`.
pub fn parse_config(text: &str, source_name: &str, mut base: Settings) -> Result<Settings, CliError> {
    let fail = |line: usize, msg: String| CliError::Usage(format!("{source_name}:{line}: {msg}"));
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| fail(i + 1, "expected `key = value`".into()))?;
        assign(&mut base, key.trim(), value.trim()).map_err(|msg| fail(i + 1, msg))?;
    }
    Ok(base)
}

pub fn load_config(path: &Path, base: Settings) -> Result<Settings, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string(), base)
}
