use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dblstm_core::baseline::LstmWeights;
use dblstm_core::dblstm::DbLstmWeights;
use dblstm_core::persist::{self, Model, WeightMeta};
use dblstm_core::quantize::QuantSpec;
use dblstm_core::signal::{
    self, prepare_series, window_dataset, AnnotatedSeries, BeatClass, ClassifyDataset, ForecastDataset, LabeledWindow,
    Series, SynthConfig,
};
use dblstm_core::train::{
    self, default_threshold, forecast_metrics, history_csv, CellKind, ConfusionMatrix, ForecastMetrics, RunConfig,
    RunSummary, Task, TaskData, NUM_CLASSES,
};
use dblstm_core::Matrix;
use serde::Serialize;

use crate::config::{load_config, Settings};
use crate::{CliError, Overrides};

const ACCURACY_NOTE: &str = "forecast accuracy is a surrogate, 100*max(0, 1 - sum|y - pred| / sum|y - mean(y)|); \
                             it is not the paper's undefined regression accuracy";

pub fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| CliError::Usage(format!("bad {what} entry `{}`: {e}", v.trim()))))
        .collect()
}

/// Defaults for `task`, then the config file, then flag overrides.
pub fn settings(task: Task, config: Option<&Path>, o: &Overrides) -> Result<Settings, CliError> {
    let mut s = Settings::defaults(task);
    if let Some(path) = config {
        s = load_config(path, s)?;
    }
    let run = &mut s.run;
    run.eta = o.eta.unwrap_or(run.eta);
    run.weight_penalty = o.penalty.unwrap_or(run.weight_penalty);
    run.clip = o.clip.unwrap_or(run.clip);
    run.epochs = o.epochs.unwrap_or(run.epochs);
    if let Some(b) = o.bits {
        run.bits = (b != 0).then_some(b);
    }
    run.seed = o.seed.unwrap_or(run.seed);
    if let Some(cell) = &o.cell {
        s.cell = match cell.as_str() {
            "dblstm" => CellKind::Dblstm,
            "lstm" => CellKind::Lstm,
            other => return Err(CliError::Usage(format!("unknown cell `{other}` (expected dblstm or lstm)"))),
        };
    }
    s.validate().map_err(CliError::Usage)?;
    Ok(s)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config key)")))
}

/// Input files are the caller's responsibility, so any failure to read them is a usage error.
fn input<T>(r: dblstm_core::Result<T>, path: &Path) -> Result<T, CliError> {
    r.map_err(|e| match e {
        dblstm_core::Error::Io(io) => CliError::Usage(format!("cannot read {}: {io}", path.display())),
        dblstm_core::Error::Json(js) => CliError::Usage(format!("cannot parse {}: {js}", path.display())),
        other => CliError::Usage(other.to_string()),
    })
}

fn load_series(path: &Path) -> Result<Series, CliError> {
    input(signal::load_csv_series(path), path)
}

fn load_annotated(series: &Path, annotations: &Path) -> Result<AnnotatedSeries, CliError> {
    let s = load_series(series)?;
    let anns = input(signal::load_annotations(annotations), annotations)?;
    Ok(AnnotatedSeries::new(s, anns)?)
}

fn out_dir(s: &Settings) -> Result<&Path, CliError> {
    let dir = required(&s.out_dir, "output directory")?;
    std::fs::create_dir_all(dir).map_err(dblstm_core::Error::from)?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(dblstm_core::Error::from)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(dblstm_core::Error::from)?;
    text.push('\n');
    write(path, &text)
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    wall_time_seconds: f64,
}

fn write_run_meta(dir: &Path, command: &str, started: Instant) -> Result<(), CliError> {
    let meta = RunMeta { command, wall_time_seconds: started.elapsed().as_secs_f64() };
    write_json(&dir.join("run_meta.json"), &meta)
}

// ---------------------------------------------------------------------------
// synth-ecg

pub fn synth_ecg(
    classes: &str,
    beats: usize,
    period: usize,
    noise: f64,
    variability: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let classes = parse_list::<BeatClass>("class", classes)?;
    let cfg = SynthConfig { classes, beats_per_class: beats, period, noise_amp: noise, variability, seed };
    let a = signal::synth_ecg(&cfg)?;
    std::fs::create_dir_all(out).map_err(dblstm_core::Error::from)?;
    signal::write_csv_series(&out.join("series.csv"), &a.series)?;
    signal::write_annotations(&out.join("annotations.csv"), &a.annotations)?;
    println!("wrote {} samples and {} annotations to {}", a.series.len(), a.annotations.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Data

struct ForecastData {
    train: ForecastDataset,
    validation: Option<ForecastDataset>,
}

fn forecast_data(s: &Settings, raw: &Series) -> Result<ForecastData, CliError> {
    let prepared = prepare_series(raw, &s.series_prep())?;
    let k = s.run.k;
    let train = signal::make_forecast_pairs(&prepared, s.delay, k)?;
    let validation = signal::make_forecast_pairs_at(&prepared, k, s.delay, k).ok();
    Ok(ForecastData { train, validation })
}

struct ClassifyData {
    train: ClassifyDataset,
    validation: ClassifyDataset,
}

fn classify_data(s: &Settings, a: &AnnotatedSeries) -> Result<ClassifyData, CliError> {
    let cap = s.train_per_class + s.val_per_class;
    let (ds, report) = window_dataset(a, s.run.k, cap, &s.window_prep())?;
    if report.out_of_bounds > 0 {
        eprintln!("note: skipped {} beats whose window leaves the series", report.out_of_bounds);
    }
    let (train, validation) = ds.split_per_class(s.train_per_class);
    if train.is_empty() || validation.is_empty() {
        return Err(CliError::Usage(format!(
            "need more beats: {} training and {} validation windows",
            train.len(),
            validation.len()
        )));
    }
    Ok(ClassifyData { train, validation })
}

fn task_data(s: &Settings) -> Result<TaskData, CliError> {
    let series = required(&s.series, "series path")?;
    match s.run.task {
        Task::Forecast => {
            let d = forecast_data(s, &load_series(series)?)?;
            Ok(TaskData::Forecast { train: d.train, validation: d.validation })
        }
        Task::Classify => {
            let anns = required(&s.annotations, "annotations path")?;
            let d = classify_data(s, &load_annotated(series, anns)?)?;
            Ok(TaskData::Classify { train: d.train, validation: d.validation })
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics documents

#[derive(Serialize)]
struct DataEcho {
    #[serde(skip_serializing_if = "Option::is_none")]
    delay: Option<usize>,
    train_windows: usize,
    validation_windows: usize,
}

#[derive(Serialize)]
struct QuantBlock {
    bits: u32,
    inplace: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    matrices: Vec<NamedSpec>,
}

#[derive(Serialize)]
struct NamedSpec {
    name: String,
    #[serde(flatten)]
    spec: QuantSpec,
}

#[derive(Serialize)]
struct FinalMetrics {
    loss: f64,
    /// Validation accuracy (classification) or surrogate training accuracy (forecasting);
    /// `null` when the forecast target is constant.
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation: Option<ForecastMetrics>,
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    command: &'a str,
    cell: CellKind,
    config: &'a RunConfig,
    data: DataEcho,
    param_count: usize,
    quant: Option<QuantBlock>,
    #[serde(rename = "final")]
    final_metrics: FinalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    confusion_matrix: Option<Vec<Vec<u64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
}

fn quant_block(cfg: &RunConfig, file: Option<&persist::WeightFile>) -> Option<QuantBlock> {
    let bits = cfg.bits?;
    let matrices = file
        .map(|f| {
            f.matrices.iter().filter_map(|m| m.quant.map(|spec| NamedSpec { name: m.name.clone(), spec })).collect()
        })
        .unwrap_or_default();
    Some(QuantBlock { bits, inplace: cfg.inplace_quant, matrices })
}

fn forecast_line(m: &ForecastMetrics) -> String {
    let undefined = || "undefined".to_string();
    format!(
        "rmse {:.6e} nmse {} accuracy {} (surrogate)",
        m.rmse,
        m.nmse.map_or_else(undefined, |v| format!("{v:.6e}")),
        m.accuracy.map_or_else(undefined, |v| format!("{v:.2}%")),
    )
}

fn forecast_final(train: ForecastMetrics, validation: Option<ForecastMetrics>) -> FinalMetrics {
    FinalMetrics { loss: train.loss, accuracy: train.accuracy, rmse: Some(train.rmse), nmse: train.nmse, validation }
}

fn classify_final(loss: f64, cm: &ConfusionMatrix) -> FinalMetrics {
    FinalMetrics { loss, accuracy: Some(cm.accuracy()), rmse: None, nmse: None, validation: None }
}

fn param_count_for(cell: CellKind, dims: dblstm_core::ModelDims) -> usize {
    let n = dims.n;
    let shared = 4 * n * (dims.m + 1) + dims.num_classes * n;
    match cell {
        CellKind::Dblstm => shared + 8 * n * n,
        CellKind::Lstm => shared + 4 * n * n,
    }
}

fn save_weights(dir: &Path, model: &Model, cfg: &RunConfig) -> Result<persist::WeightFile, CliError> {
    let meta = WeightMeta { seed: cfg.seed, init_scale: cfg.init_scale };
    let file = persist::to_file(model, meta, cfg.bits)?;
    persist::save(&dir.join("weights.json"), &file)?;
    Ok(file)
}

// ---------------------------------------------------------------------------
// train-forecast

pub fn train_forecast(s: &Settings) -> Result<(), CliError> {
    let started = Instant::now();
    let series = required(&s.series, "series path")?;
    let data = forecast_data(s, &load_series(series)?)?;
    let dir = out_dir(s)?;
    let cfg = &s.run;
    let (model, history, train, validation) = match s.cell {
        CellKind::Dblstm => {
            let r = train::train_forecast::<DbLstmWeights>(cfg, &data.train, data.validation.as_ref())?;
            (Model::DbLstm(r.weights), r.history, r.train, r.validation)
        }
        CellKind::Lstm => {
            let r = train::train_forecast::<LstmWeights>(cfg, &data.train, data.validation.as_ref())?;
            (Model::Lstm(r.weights), r.history, r.train, r.validation)
        }
    };
    write(&dir.join("history.csv"), &history_csv(&history))?;
    let file = save_weights(dir, &model, cfg)?;
    let doc = MetricsDoc {
        command: "train-forecast",
        cell: s.cell,
        config: cfg,
        data: DataEcho {
            delay: Some(s.delay),
            train_windows: 1,
            validation_windows: usize::from(data.validation.is_some()),
        },
        param_count: model.param_count(),
        quant: quant_block(cfg, Some(&file)),
        final_metrics: forecast_final(train, validation),
        confusion_matrix: None,
        note: Some(ACCURACY_NOTE),
    };
    write_json(&dir.join("metrics.json"), &doc)?;
    write_run_meta(dir, "train-forecast", started)?;
    println!("final {}", forecast_line(&train));
    Ok(())
}

// ---------------------------------------------------------------------------
// train-classify

pub fn train_classify(s: &Settings) -> Result<(), CliError> {
    let started = Instant::now();
    let series = required(&s.series, "series path")?;
    let anns = required(&s.annotations, "annotations path")?;
    let data = classify_data(s, &load_annotated(series, anns)?)?;
    let dir = out_dir(s)?;
    let cfg = &s.run;
    let (model, history, confusion, final_loss) = match s.cell {
        CellKind::Dblstm => {
            let r = train::train_classify::<DbLstmWeights>(cfg, &data.train, &data.validation)?;
            (Model::DbLstm(r.weights), r.history, r.confusion, r.final_loss)
        }
        CellKind::Lstm => {
            let r = train::train_classify::<LstmWeights>(cfg, &data.train, &data.validation)?;
            (Model::Lstm(r.weights), r.history, r.confusion, r.final_loss)
        }
    };
    write(&dir.join("history.csv"), &history_csv(&history))?;
    let file = save_weights(dir, &model, cfg)?;
    let doc = MetricsDoc {
        command: "train-classify",
        cell: s.cell,
        config: cfg,
        data: DataEcho { delay: None, train_windows: data.train.len(), validation_windows: data.validation.len() },
        param_count: model.param_count(),
        quant: quant_block(cfg, Some(&file)),
        final_metrics: classify_final(final_loss, &confusion),
        confusion_matrix: Some(confusion.counts.clone()),
        note: None,
    };
    write_json(&dir.join("metrics.json"), &doc)?;
    write_run_meta(dir, "train-classify", started)?;
    println!("final loss {:.6e} validation accuracy {:.2}%", final_loss, confusion.accuracy());
    Ok(())
}

// ---------------------------------------------------------------------------
// quantize-sweep

fn summary_final(summary: &RunSummary) -> FinalMetrics {
    match (&summary.forecast, &summary.confusion) {
        (Some(f), _) => forecast_final(*f, None),
        (None, Some(cm)) => classify_final(summary.final_loss, cm),
        (None, None) => FinalMetrics {
            loss: summary.final_loss,
            accuracy: Some(summary.final_accuracy),
            rmse: None,
            nmse: None,
            validation: None,
        },
    }
}

fn data_echo(s: &Settings, data: &TaskData) -> DataEcho {
    match data {
        TaskData::Forecast { validation, .. } => {
            DataEcho { delay: Some(s.delay), train_windows: 1, validation_windows: usize::from(validation.is_some()) }
        }
        TaskData::Classify { train, validation } => {
            DataEcho { delay: None, train_windows: train.len(), validation_windows: validation.len() }
        }
    }
}

fn dims_for(s: &Settings, data: &TaskData) -> dblstm_core::ModelDims {
    match data {
        TaskData::Forecast { train, .. } => {
            dblstm_core::ModelDims { m: 1, n: s.run.hidden, k: train.k(), num_classes: 0 }
        }
        TaskData::Classify { train, .. } => dblstm_core::ModelDims { k: train.k, ..s.run.dims(NUM_CLASSES) },
    }
}

pub fn quantize_sweep(s: &Settings, bits: &[u32]) -> Result<(), CliError> {
    let started = Instant::now();
    let data = task_data(s)?;
    let dir = out_dir(s)?;
    let entries = train::quantize_sweep(&s.run, &data, bits)?;
    let dims = dims_for(s, &data);
    let mut summary = String::from("bits,final_loss,final_accuracy\n");
    for e in &entries {
        let cfg = RunConfig { bits: train::parse_sweep_bits(e.bits), ..s.run.clone() };
        let doc = MetricsDoc {
            command: "quantize-sweep",
            cell: CellKind::Dblstm,
            config: &cfg,
            data: data_echo(s, &data),
            param_count: param_count_for(CellKind::Dblstm, dims),
            quant: quant_block(&cfg, None),
            final_metrics: summary_final(&e.summary),
            confusion_matrix: e.summary.confusion.as_ref().map(|c| c.counts.clone()),
            note: (s.run.task == Task::Forecast).then_some(ACCURACY_NOTE),
        };
        write_json(&dir.join(format!("metrics_bits{}.json", e.bits)), &doc)?;
        write(&dir.join(format!("history_bits{}.csv", e.bits)), &history_csv(&e.summary.history))?;
        writeln!(summary, "{},{:.10e},{:.10e}", e.bits, e.summary.final_loss, e.summary.final_accuracy)
            .expect("writing to a String");
        println!(
            "bits {:>2}: final loss {:.6e} accuracy {:.2}%",
            e.bits, e.summary.final_loss, e.summary.final_accuracy
        );
    }
    write(&dir.join("sweep_summary.csv"), &summary)?;
    write_run_meta(dir, "quantize-sweep", started)
}

// ---------------------------------------------------------------------------
// compare-baseline

#[derive(Serialize)]
struct CompareDoc<'a> {
    config: &'a RunConfig,
    #[serde(flatten)]
    summary: &'a train::CompareSummary,
}

pub fn compare_baseline(s: &Settings, seeds: &[u64]) -> Result<(), CliError> {
    let started = Instant::now();
    let data = task_data(s)?;
    let dir = out_dir(s)?;
    let threshold = s.threshold.unwrap_or_else(|| default_threshold(s.run.task));
    let summary = train::compare_models(&s.run, &data, seeds, threshold)?;
    for run in &summary.runs {
        let name = format!("history_{}_seed{}.csv", run.cell.name(), run.seed);
        write(&dir.join(name), &history_csv(&run.summary.history))?;
    }
    write_json(&dir.join("compare_summary.json"), &CompareDoc { config: &s.run, summary: &summary })?;
    write_run_meta(dir, "compare-baseline", started)?;
    for (cell, block) in [("dblstm", &summary.dblstm), ("lstm", &summary.lstm)] {
        println!(
            "{cell:>6}: mean final loss {:.6e} mean initial loss {:.6e} mean accuracy {:.2}% reached threshold in {}/{} runs",
            block.mean_final_loss,
            block.mean_initial_loss,
            block.mean_final_accuracy,
            block.runs_reaching_threshold,
            seeds.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub struct EvalRequest {
    pub weights: PathBuf,
    pub series: PathBuf,
    pub annotations: Option<PathBuf>,
    pub start: usize,
    pub validation_only: bool,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct EvalDoc {
    task: Task,
    cell: CellKind,
    dims: dblstm_core::ModelDims,
    windows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast: Option<ForecastMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    confusion_matrix: Option<Vec<Vec<u64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
}

/// Consecutive non-overlapping windows with a placeholder label.
fn window_stream(s: &Settings, raw: &Series, k: usize) -> Result<ClassifyDataset, CliError> {
    if raw.len() < k {
        return Err(dblstm_core::Error::Length { needed: k, got: raw.len() }.into());
    }
    let windows = (0..raw.len() / k)
        .map(|i| {
            let mut values = raw.samples[i * k..(i + 1) * k].to_vec();
            if let Some(cfg) = &s.window_prep().denoise {
                values = signal::dwt_denoise_with(&Series::new(values, raw.sample_rate)?, cfg)?.samples;
            }
            if s.zscore {
                values = signal::zscore_slice(&values);
            }
            Ok(LabeledWindow { input: Matrix::row(&values), label: BeatClass::N, centre: i * k + k / 2 })
        })
        .collect::<dblstm_core::Result<Vec<_>>>()?;
    Ok(ClassifyDataset { k, windows })
}

pub fn evaluate(s: &Settings, req: &EvalRequest) -> Result<(), CliError> {
    let started = Instant::now();
    let (model, _) = input(persist::load(&req.weights), &req.weights)?;
    if model.head() != s.run.task {
        return Err(CliError::Usage(format!(
            "weight file {} has a {:?} head but --task is {:?}",
            req.weights.display(),
            model.head(),
            s.run.task
        )));
    }
    let dims = model.dims();
    let raw = load_series(&req.series)?;
    std::fs::create_dir_all(&req.out_dir).map_err(dblstm_core::Error::from)?;
    let dir = req.out_dir.as_path();
    let doc = match s.run.task {
        Task::Forecast => {
            let prepared = prepare_series(&raw, &s.series_prep())?;
            let pair = signal::make_forecast_pairs_at(&prepared, req.start, s.delay, dims.k);
            let (inputs, truth) = match pair {
                Ok(p) => (p.inputs, Some(p.targets)),
                Err(_) => {
                    let end = req.start + dims.k;
                    if end > prepared.len() {
                        return Err(dblstm_core::Error::Length { needed: end, got: prepared.len() }.into());
                    }
                    (Matrix::row(&prepared.samples[req.start..end]), None)
                }
            };
            let pred = model.forecast(&inputs)?;
            let mut csv = String::from("index,prediction\n");
            for (t, v) in pred.data().iter().enumerate() {
                writeln!(csv, "{},{:.10e}", req.start + s.delay + t, v).expect("writing to a String");
            }
            write(&dir.join("predictions.csv"), &csv)?;
            let metrics = truth.map(|t| forecast_metrics(&pred, &t)).transpose()?;
            if let Some(m) = &metrics {
                println!("{}", forecast_line(m));
            }
            EvalDoc {
                task: Task::Forecast,
                cell: model.cell_type(),
                dims,
                windows: 1,
                forecast: metrics,
                accuracy: None,
                confusion_matrix: None,
                note: Some(ACCURACY_NOTE),
            }
        }
        Task::Classify => {
            let eval_settings = Settings { run: RunConfig { k: dims.k, ..s.run.clone() }, ..s.clone() };
            let (data, labeled) = match &req.annotations {
                Some(anns) => {
                    let anns = input(signal::load_annotations(anns), anns)?;
                    let a = AnnotatedSeries::new(raw, anns)?;
                    let data = if req.validation_only {
                        classify_data(&eval_settings, &a)?.validation
                    } else {
                        window_dataset(&a, dims.k, usize::MAX, &eval_settings.window_prep())?.0
                    };
                    (data, true)
                }
                None => (window_stream(&eval_settings, &raw, dims.k)?, false),
            };
            let predicted = model.predict_labels(&data)?;
            let mut csv = String::from(if labeled { "centre,actual,predicted\n" } else { "centre,predicted\n" });
            let mut cm = ConfusionMatrix::new(dims.num_classes);
            for (w, &p) in data.windows.iter().zip(&predicted) {
                let label = BeatClass::from_index(p).map_or_else(|| p.to_string(), |c| c.to_string());
                if labeled {
                    cm.record(w.label.index(), p);
                    writeln!(csv, "{},{},{}", w.centre, w.label, label).expect("writing to a String");
                } else {
                    writeln!(csv, "{},{}", w.centre, label).expect("writing to a String");
                }
            }
            write(&dir.join("labels.csv"), &csv)?;
            if labeled {
                println!("accuracy {:.2}% over {} windows", cm.accuracy(), cm.total());
            } else {
                println!("labelled {} windows", data.len());
            }
            EvalDoc {
                task: Task::Classify,
                cell: model.cell_type(),
                dims,
                windows: data.len(),
                forecast: None,
                accuracy: labeled.then(|| cm.accuracy()),
                confusion_matrix: labeled.then(|| cm.counts.clone()),
                note: None,
            }
        }
    };
    write_json(&dir.join("metrics.json"), &doc)?;
    write_run_meta(dir, "evaluate", started)
}
