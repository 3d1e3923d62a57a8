//! ECG preprocessing, dataset builders, CSV I/O, and a synthetic beat generator.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sampling rate of the MIT-BIH recordings.
pub const MITBIH_RATE: f64 = 360.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub samples: Vec<f64>,
    /// Hz; zero for non-uniform series such as monthly counts.
    pub sample_rate: f64,
}

impl Series {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Length { needed: 1, got: 0 });
        }
        if let Some(idx) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Series { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The five beat classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BeatClass {
    N,
    L,
    R,
    A,
    V,
}

impl BeatClass {
    pub const ALL: [BeatClass; 5] = [BeatClass::N, BeatClass::L, BeatClass::R, BeatClass::A, BeatClass::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BeatClass> {
        BeatClass::ALL.get(i).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            BeatClass::N => 'N',
            BeatClass::L => 'L',
            BeatClass::R => 'R',
            BeatClass::A => 'A',
            BeatClass::V => 'V',
        }
    }
}

impl fmt::Display for BeatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

impl FromStr for BeatClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "N" => Ok(BeatClass::N),
            "L" => Ok(BeatClass::L),
            "R" => Ok(BeatClass::R),
            "A" => Ok(BeatClass::A),
            "V" => Ok(BeatClass::V),
            other => Err(format!("unknown beat label `{other}` (expected one of N,L,R,A,V)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub index: usize,
    pub label: BeatClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSeries {
    pub series: Series,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedSeries {
    pub fn new(series: Series, annotations: Vec<Annotation>) -> Result<Self> {
        for (i, pair) in annotations.windows(2).enumerate() {
            if pair[1].index <= pair[0].index {
                return Err(Error::Config(format!(
                    "annotation {} at sample {} is not after sample {}",
                    i + 1,
                    pair[1].index,
                    pair[0].index
                )));
            }
        }
        if let Some(last) = annotations.last() {
            if last.index >= series.len() {
                return Err(Error::Config(format!(
                    "annotation at sample {} is beyond the series end ({})",
                    last.index,
                    series.len()
                )));
            }
        }
        Ok(AnnotatedSeries { series, annotations })
    }
}

// ---------------------------------------------------------------------------
// Wavelet denoising

/// Daubechies-4 decomposition low-pass filter (8 taps).
const DB4_DEC_LO: [f64; 8] = [
    -0.010597401784997278,
    0.032883011666982945,
    0.030841381835986965,
    -0.18703481171888114,
    -0.02798376941698385,
    0.6308807679295904,
    0.7148465705525415,
    0.23037781330885523,
];

#[derive(Debug, Clone)]
struct FilterBank {
    dec_lo: Vec<f64>,
    dec_hi: Vec<f64>,
    rec_lo: Vec<f64>,
    rec_hi: Vec<f64>,
}

impl FilterBank {
    fn from_dec_lo(dec_lo: &[f64]) -> Self {
        let rec_lo: Vec<f64> = dec_lo.iter().rev().copied().collect();
        let rec_hi: Vec<f64> = dec_lo.iter().enumerate().map(|(k, &v)| if k % 2 == 0 { v } else { -v }).collect();
        let dec_hi = rec_hi.iter().rev().copied().collect();
        FilterBank { dec_lo: dec_lo.to_vec(), dec_hi, rec_lo, rec_hi }
    }

    fn len(&self) -> usize {
        self.dec_lo.len()
    }
}

/// Half-sample symmetric extension: `x[-1] = x[0]`, `x[n] = x[n-1]`.
fn sym_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

fn dwt_single(x: &[f64], bank: &FilterBank) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let f = bank.len();
    let out_len = (n + f - 1) / 2;
    let mut approx = vec![0.0; out_len];
    let mut detail = vec![0.0; out_len];
    for o in 0..out_len {
        let centre = 2 * o as isize + 1;
        let (mut a, mut d) = (0.0, 0.0);
        for j in 0..f {
            let v = x[sym_index(centre - j as isize, n)];
            a += bank.dec_lo[j] * v;
            d += bank.dec_hi[j] * v;
        }
        approx[o] = a;
        detail[o] = d;
    }
    (approx, detail)
}

fn idwt_single(approx: &[f64], detail: &[f64], bank: &FilterBank) -> Vec<f64> {
    let len = approx.len();
    let f = bank.len();
    let out_len = 2 * len + 2 - f;
    let mut out = vec![0.0; out_len];
    for (nidx, slot) in out.iter_mut().enumerate() {
        let m = nidx + f - 2;
        let mut acc = 0.0;
        // taps with (m - 2o) in [0, f)
        let o_hi = (m / 2).min(len - 1);
        let o_lo = (m + 1).saturating_sub(f).div_ceil(2);
        for o in o_lo..=o_hi {
            let tap = m - 2 * o;
            acc += bank.rec_lo[tap] * approx[o] + bank.rec_hi[tap] * detail[o];
        }
        *slot = acc;
    }
    out
}

fn max_level(n: usize, filter_len: usize) -> usize {
    let mut level = 0;
    let mut len = n;
    while len >= filter_len - 1 && (len / (filter_len - 1)) >= 2 {
        len /= 2;
        level += 1;
    }
    level
}

/// Settings for [`dwt_denoise_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    pub threshold: f64,
    pub levels: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig { threshold: 0.04, levels: 4 }
    }
}

pub const MIN_DENOISE_LEN: usize = 16;

fn soft_threshold(v: f64, thr: f64) -> f64 {
    v.signum() * (v.abs() - thr).max(0.0)
}

/// Multi-level db4 decomposition, soft thresholding of every detail band,
/// and reconstruction to the original length.
pub fn dwt_denoise(s: &Series, threshold: f64) -> Result<Series> {
    dwt_denoise_with(s, &DenoiseConfig { threshold, ..DenoiseConfig::default() })
}

pub fn dwt_denoise_with(s: &Series, cfg: &DenoiseConfig) -> Result<Series> {
    let n = s.len();
    if n < MIN_DENOISE_LEN {
        return Err(Error::Length { needed: MIN_DENOISE_LEN, got: n });
    }
    let bank = FilterBank::from_dec_lo(&DB4_DEC_LO);
    let levels = cfg.levels.min(max_level(n, bank.len())).max(1);

    let mut approx = s.samples.clone();
    let mut details = Vec::with_capacity(levels);
    let mut lengths = Vec::with_capacity(levels);
    for _ in 0..levels {
        lengths.push(approx.len());
        let (a, d) = dwt_single(&approx, &bank);
        details.push(d.into_iter().map(|v| soft_threshold(v, cfg.threshold)).collect::<Vec<_>>());
        approx = a;
    }
    for (d, &target_len) in details.iter().zip(&lengths).rev() {
        let mut rec = idwt_single(&approx, d, &bank);
        rec.truncate(target_len);
        approx = rec;
    }
    Series::new(approx, s.sample_rate)
}

/// `(x - mean) / std` with the population standard deviation; constant input maps to zeros.
pub fn zscore(s: &Series) -> Series {
    Series { samples: zscore_slice(&s.samples), sample_rate: s.sample_rate }
}

pub fn zscore_slice(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Whole-series preprocessing for forecasting: denoise, z-score, then
/// optionally rescale so the largest magnitude equals `peak`.
///
/// The hidden state of a cell lives in (-1, 1), so raw z-scores (whose R
/// peaks sit well above 1) cannot be reproduced without the rescale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPrep {
    pub denoise: Option<DenoiseConfig>,
    pub zscore: bool,
    pub peak: Option<f64>,
}

pub const DEFAULT_PEAK: f64 = 0.9;

impl Default for SeriesPrep {
    fn default() -> Self {
        SeriesPrep { denoise: Some(DenoiseConfig::default()), zscore: true, peak: Some(DEFAULT_PEAK) }
    }
}

pub fn prepare_series(s: &Series, prep: &SeriesPrep) -> Result<Series> {
    let mut out = match &prep.denoise {
        Some(cfg) => dwt_denoise_with(s, cfg)?,
        None => s.clone(),
    };
    if prep.zscore {
        out = zscore(&out);
    }
    if let Some(peak) = prep.peak {
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::Config(format!("peak scale must be positive, got {peak}")));
        }
        let max = out.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            for v in &mut out.samples {
                *v *= peak / max;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDataset {
    /// `1 x k`.
    pub inputs: Matrix,
    /// `1 x k`, the input shifted ahead by `delay` samples.
    pub targets: Matrix,
    pub delay: usize,
}

impl ForecastDataset {
    pub fn k(&self) -> usize {
        self.inputs.cols()
    }
}

/// Input window `s[start..start+len)` paired with `s[start+delay..start+delay+len)`.
pub fn make_forecast_pairs_at(s: &Series, start: usize, delay: usize, len: usize) -> Result<ForecastDataset> {
    let needed = start + len + delay;
    if len == 0 || needed > s.len() {
        return Err(Error::Length { needed: needed.max(1), got: s.len() });
    }
    Ok(ForecastDataset {
        inputs: Matrix::row(&s.samples[start..start + len]),
        targets: Matrix::row(&s.samples[start + delay..start + delay + len]),
        delay,
    })
}

pub fn make_forecast_pairs(s: &Series, delay: usize, train_len: usize) -> Result<ForecastDataset> {
    make_forecast_pairs_at(s, 0, delay, train_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    /// `1 x k`.
    pub input: Matrix,
    pub label: BeatClass,
    /// Annotation sample the window is centred on.
    pub centre: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyDataset {
    pub k: usize,
    pub windows: Vec<LabeledWindow>,
}

impl ClassifyDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn count(&self, label: BeatClass) -> usize {
        self.windows.iter().filter(|w| w.label == label).count()
    }

    /// First `train_per_class` windows of each label go to training, the rest to validation.
    pub fn split_per_class(&self, train_per_class: usize) -> (ClassifyDataset, ClassifyDataset) {
        let mut seen = [0usize; 5];
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for w in &self.windows {
            let c = &mut seen[w.label.index()];
            if *c < train_per_class {
                train.push(w.clone());
            } else {
                val.push(w.clone());
            }
            *c += 1;
        }
        (ClassifyDataset { k: self.k, windows: train }, ClassifyDataset { k: self.k, windows: val })
    }
}

/// Per-window preprocessing applied by [`window_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPrep {
    pub denoise: Option<DenoiseConfig>,
    pub zscore: bool,
}

impl Default for WindowPrep {
    fn default() -> Self {
        WindowPrep { denoise: Some(DenoiseConfig::default()), zscore: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WindowReport {
    /// Annotations whose window would leave the series.
    pub out_of_bounds: usize,
    /// Annotations dropped because their class already reached `per_class`.
    pub over_cap: usize,
}

/// Beat-centred windows of `k` samples, at most `per_class` per label, in annotation order.
pub fn window_dataset(
    a: &AnnotatedSeries,
    k: usize,
    per_class: usize,
    prep: &WindowPrep,
) -> Result<(ClassifyDataset, WindowReport)> {
    if k == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let before = k / 2;
    let after = k - before;
    let mut counts = [0usize; 5];
    let mut report = WindowReport::default();
    let mut windows = Vec::new();
    for ann in &a.annotations {
        if ann.index < before || ann.index + after > a.series.len() {
            report.out_of_bounds += 1;
            continue;
        }
        let slot = &mut counts[ann.label.index()];
        if *slot >= per_class {
            report.over_cap += 1;
            continue;
        }
        *slot += 1;
        let raw = &a.series.samples[ann.index - before..ann.index + after];
        let mut values = raw.to_vec();
        if let Some(cfg) = &prep.denoise {
            values = dwt_denoise_with(&Series::new(values, a.series.sample_rate)?, cfg)?.samples;
        }
        if prep.zscore {
            values = zscore_slice(&values);
        }
        windows.push(LabeledWindow { input: Matrix::row(&values), label: ann.label, centre: ann.index });
    }
    Ok((ClassifyDataset { k, windows }, report))
}

// ---------------------------------------------------------------------------
// Synthetic ECG

#[derive(Debug, Clone, Copy)]
struct Bump {
    /// Offset from the R peak, fraction of the period.
    at: f64,
    /// Width, fraction of the period.
    width: f64,
    amp: f64,
}

const fn bump(at: f64, width: f64, amp: f64) -> Bump {
    Bump { at, width, amp }
}

/// P, Q, R, S, T bumps plus how far the beat arrives early (fraction of the period).
fn morphology(class: BeatClass) -> ([Bump; 5], f64) {
    match class {
        BeatClass::N => (
            [
                bump(-0.20, 0.025, 0.15),
                bump(-0.03, 0.008, -0.12),
                bump(0.0, 0.010, 1.0),
                bump(0.03, 0.008, -0.25),
                bump(0.25, 0.045, 0.30),
            ],
            0.0,
        ),
        // broad notched R, discordant T
        BeatClass::L => (
            [
                bump(-0.20, 0.025, 0.15),
                bump(-0.022, 0.014, 0.55),
                bump(0.0, 0.016, 0.9),
                bump(0.05, 0.010, -0.05),
                bump(0.24, 0.040, -0.25),
            ],
            0.0,
        ),
        // rSR': small r, S between, tall R', shallow inverted T
        BeatClass::R => (
            [
                bump(-0.20, 0.025, 0.15),
                bump(-0.05, 0.008, 0.40),
                bump(0.0, 0.010, 1.0),
                bump(-0.025, 0.007, -0.35),
                bump(0.22, 0.035, -0.15),
            ],
            0.0,
        ),
        // premature with an early inverted P; the short coupling pulls T in
        BeatClass::A => (
            [
                bump(-0.12, 0.020, -0.12),
                bump(-0.03, 0.008, -0.12),
                bump(0.0, 0.010, 1.0),
                bump(0.03, 0.008, -0.25),
                bump(0.20, 0.040, 0.20),
            ],
            0.30,
        ),
        // premature, no P, wide QRS, T opposite to QRS
        BeatClass::V => (
            [
                bump(-0.20, 0.025, 0.0),
                bump(-0.035, 0.015, -0.20),
                bump(0.0, 0.030, 1.2),
                bump(0.05, 0.025, -0.50),
                bump(0.25, 0.065, -0.60),
            ],
            0.20,
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Beat classes, emitted round-robin.
    pub classes: Vec<BeatClass>,
    pub beats_per_class: usize,
    /// Samples per beat.
    pub period: usize,
    /// Amplitude of additive uniform noise.
    pub noise_amp: f64,
    /// Relative per-beat perturbation of bump amplitudes, widths and P/T timing; zero keeps
    /// every beat of a class identical.
    pub variability: f64,
    pub seed: u64,
}

pub const MIN_SYNTH_PERIOD: usize = 40;

/// Sum-of-Gaussians ECG with one annotation per R peak.
pub fn synth_ecg(cfg: &SynthConfig) -> Result<AnnotatedSeries> {
    if cfg.period < MIN_SYNTH_PERIOD {
        return Err(Error::Config(format!("period must be at least {MIN_SYNTH_PERIOD} samples, got {}", cfg.period)));
    }
    if cfg.classes.is_empty() {
        return Err(Error::Config("at least one beat class is required".into()));
    }
    if cfg.noise_amp.is_nan() || cfg.variability.is_nan() || cfg.noise_amp < 0.0 || cfg.variability < 0.0 {
        return Err(Error::Config("noise and variability must be non-negative".into()));
    }
    let p = cfg.period as f64;
    let beats = cfg.classes.len() * cfg.beats_per_class;
    let len = (beats + 1) * cfg.period;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = vec![0.0; len];
    let mut annotations = Vec::with_capacity(beats);

    for j in 0..beats {
        let class = cfg.classes[j % cfg.classes.len()];
        let (bumps, early) = morphology(class);
        let r_pos = ((j as f64 + 0.5) * p - early * p).round() as usize;
        for (bi, b) in bumps.iter().enumerate() {
            let mut jitter = |scale: f64| 1.0 + scale * cfg.variability * rng.gen_range(-1.0..=1.0);
            let amp = b.amp * jitter(1.0);
            let width = (b.width * jitter(1.0) * p).max(0.5);
            // P and T wander; the QRS stays locked to the annotation
            let shift = if bi == 0 || bi == 4 { (jitter(1.0) - 1.0) * 0.05 * p } else { 0.0 };
            let centre = r_pos as f64 + b.at * p + shift;
            if amp == 0.0 {
                continue;
            }
            let lo = (centre - 5.0 * width).floor().max(0.0) as usize;
            let hi = ((centre + 5.0 * width).ceil() as usize).min(len - 1);
            for (t, s) in samples.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let z = (t as f64 - centre) / width;
                *s += amp * (-0.5 * z * z).exp();
            }
        }
        annotations.push(Annotation { index: r_pos, label: class });
    }
    if cfg.noise_amp > 0.0 {
        for s in &mut samples {
            *s += rng.gen_range(-cfg.noise_amp..=cfg.noise_amp);
        }
    }
    AnnotatedSeries::new(Series::new(samples, MITBIH_RATE)?, annotations)
}

// ---------------------------------------------------------------------------
// CSV I/O

fn parse_err(source_name: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { source_name: source_name.to_string(), line, msg: msg.into() }
}

fn split_record<'a>(source_name: &str, line_no: usize, line: &'a str) -> Result<(usize, &'a str)> {
    let (idx, value) = line.split_once(',').ok_or_else(|| parse_err(source_name, line_no, "expected `index,value`"))?;
    let idx = idx
        .trim()
        .parse::<usize>()
        .map_err(|e| parse_err(source_name, line_no, format!("bad index `{}`: {e}", idx.trim())))?;
    Ok((idx, value.trim()))
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r'))).filter(|(_, l)| !l.trim().is_empty())
}

/// Parses `index,value` lines.
pub fn parse_series(text: &str, source_name: &str, sample_rate: f64) -> Result<Series> {
    let mut samples = Vec::new();
    for (line_no, line) in records(text) {
        let (_, value) = split_record(source_name, line_no, line)?;
        let v =
            value.parse::<f64>().map_err(|e| parse_err(source_name, line_no, format!("bad value `{value}`: {e}")))?;
        if !v.is_finite() {
            return Err(parse_err(source_name, line_no, "value is not finite"));
        }
        samples.push(v);
    }
    if samples.is_empty() {
        return Err(parse_err(source_name, 0, "no samples"));
    }
    Series::new(samples, sample_rate)
}

/// Parses `sample_index,label` lines.
pub fn parse_annotations(text: &str, source_name: &str) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    for (line_no, line) in records(text) {
        let (index, label) = split_record(source_name, line_no, line)?;
        let label = label.parse::<BeatClass>().map_err(|e| parse_err(source_name, line_no, e))?;
        if out.last().is_some_and(|prev| prev.index >= index) {
            return Err(parse_err(source_name, line_no, "sample indices must be strictly increasing"));
        }
        out.push(Annotation { index, label });
    }
    Ok(out)
}

pub fn load_csv_series(path: &Path) -> Result<Series> {
    let text = std::fs::read_to_string(path)?;
    parse_series(&text, &path.display().to_string(), MITBIH_RATE)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text, &path.display().to_string())
}

pub fn format_series(s: &Series) -> String {
    s.samples.iter().enumerate().map(|(i, v)| format!("{i},{v}\n")).collect()
}

pub fn format_annotations(anns: &[Annotation]) -> String {
    anns.iter().map(|a| format!("{},{}\n", a.index, a.label)).collect()
}

pub fn write_csv_series(path: &Path, s: &Series) -> Result<()> {
    std::fs::write(path, format_series(s))?;
    Ok(())
}

pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    std::fs::write(path, format_annotations(anns))?;
    Ok(())
}
