//! Training loops, metrics, quantization sweeps and cell comparisons.
//!
//! Forecasting accumulates gradients over the whole window and updates once
//! per epoch. Classification updates after every window, visiting training
//! windows in a seeded shuffled order.
//!
//! When `bits` is set the trainer keeps full-precision shadow weights: each
//! forward/backward runs on the quantized view and the update lands on the
//! shadow. With `inplace_quant` the weights themselves are re-quantized after
//! every update instead.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{self, ClipMode, Gradients, UpdateRule};
use crate::baseline::{self, Head, LstmGradients, LstmOutput, LstmTarget, LstmWeights};
use crate::dblstm::{self, argmax, DbLstmWeights, ModelDims};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quantize::{self, MAX_BITS};
use crate::signal::{BeatClass, ClassifyDataset, ForecastDataset};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Forecast,
    Classify,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "forecast" => Ok(Task::Forecast),
            "classify" => Ok(Task::Classify),
            other => Err(format!("unknown task `{other}` (expected forecast or classify)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Dblstm,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Dblstm => "dblstm",
            CellKind::Lstm => "lstm",
        }
    }
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.is_finite().then_some(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub eta: f64,
    pub weight_penalty: f64,
    /// Gradient threshold; infinite disables clipping and serializes as `null`.
    #[serde(with = "unbounded")]
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub epochs: usize,
    /// Window length (classification) or training length (forecasting).
    pub k: usize,
    pub hidden: usize,
    /// Fixed-point bits; `None` trains in full precision.
    pub bits: Option<u32>,
    pub inplace_quant: bool,
    pub seed: u64,
    pub init_scale: f64,
    /// Pins the shared bias scalar instead of drawing it from the seed.
    pub bias_value: Option<f64>,
}

impl RunConfig {
    /// 0.1 learning rate, 0.01 weight penalty, 100 epochs, one hidden unit.
    pub fn forecast_defaults() -> Self {
        RunConfig {
            task: Task::Forecast,
            eta: 0.1,
            weight_penalty: 0.01,
            clip: f64::INFINITY,
            clip_mode: ClipMode::Element,
            epochs: 100,
            k: 280,
            hidden: 1,
            bits: None,
            inplace_quant: false,
            seed: 0,
            init_scale: 0.1,
            bias_value: None,
        }
    }

    /// 0.01 learning rate, 0.05 gradient clip, 0.01 weight penalty, 32 hidden units, 180-sample windows.
    pub fn classify_defaults() -> Self {
        RunConfig {
            task: Task::Classify,
            eta: 0.01,
            weight_penalty: 0.01,
            clip: 0.05,
            clip_mode: ClipMode::Element,
            epochs: 100,
            k: 180,
            hidden: 32,
            bits: None,
            inplace_quant: false,
            seed: 0,
            init_scale: 0.1,
            bias_value: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.weight_penalty >= 0.0 && self.weight_penalty.is_finite()) {
            return fail(format!("weight_penalty must be non-negative, got {}", self.weight_penalty));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return fail(format!("clip must be positive, got {}", self.clip));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.k == 0 || self.hidden == 0 {
            return fail("k and hidden must be positive".into());
        }
        if let Some(b) = self.bits {
            if b == 0 || b > MAX_BITS {
                return fail(format!("bits must be in 1..={MAX_BITS}, got {b}"));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return fail(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if self.bias_value.is_some_and(|b| !b.is_finite()) {
            return fail("bias_value must be finite".into());
        }
        Ok(())
    }

    pub fn update_rule(&self) -> UpdateRule {
        UpdateRule { eta: self.eta, weight_penalty: self.weight_penalty, clip: self.clip, clip_mode: self.clip_mode }
    }

    pub fn dims(&self, num_classes: usize) -> ModelDims {
        ModelDims { m: 1, n: self.hidden, k: self.k, num_classes }
    }
}

// ---------------------------------------------------------------------------
// Models

/// What the training loops need from a recurrent cell.
pub trait Recurrent: Clone + Send + Sync + Sized {
    type Grad;

    const KIND: CellKind;

    fn init(dims: ModelDims, cfg: &RunConfig) -> Result<Self>;
    fn dims(&self) -> ModelDims;
    /// `n x k` per-step outputs.
    fn forecast(&self, inputs: &Matrix) -> Result<Matrix>;
    /// Gradient, loss and outputs of the forecasting head.
    fn forecast_grad(&self, inputs: &Matrix, targets: &Matrix) -> Result<(Self::Grad, f64, Matrix)>;
    fn probs(&self, inputs: &Matrix) -> Result<Vec<f64>>;
    /// Gradient, loss and probabilities of the classification head.
    fn classify_grad(&self, inputs: &Matrix, label: usize) -> Result<(Self::Grad, f64, Vec<f64>)>;
    fn update(&mut self, g: &Self::Grad, rule: &UpdateRule);
    fn quantized(&self, bits: u32) -> Result<Self>;
}

impl Recurrent for DbLstmWeights {
    type Grad = Gradients;

    const KIND: CellKind = CellKind::Dblstm;

    fn init(dims: ModelDims, cfg: &RunConfig) -> Result<Self> {
        let w = dblstm::init_weights(dims, cfg.seed, cfg.init_scale)?;
        Ok(match cfg.bias_value {
            Some(b) => w.with_bias(b),
            None => w,
        })
    }

    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn forecast(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(dblstm::forward_forecast(self, inputs)?.0)
    }

    fn forecast_grad(&self, inputs: &Matrix, targets: &Matrix) -> Result<(Gradients, f64, Matrix)> {
        let (out, trace) = dblstm::forward_forecast(self, inputs)?;
        let (g, loss) = backprop::backward_forecast(&trace, targets, self)?;
        Ok((g, loss, out))
    }

    fn probs(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        Ok(dblstm::forward_classify(self, inputs)?.probs.into_vec())
    }

    fn classify_grad(&self, inputs: &Matrix, label: usize) -> Result<(Gradients, f64, Vec<f64>)> {
        let out = dblstm::forward_classify(self, inputs)?;
        let (g, loss) = backprop::backward_classify(&out.trace, &out.probs, label, self)?;
        Ok((g, loss, out.probs.into_vec()))
    }

    fn update(&mut self, g: &Gradients, rule: &UpdateRule) {
        rule.apply(self.matrices_mut(), g.matrices());
    }

    fn quantized(&self, bits: u32) -> Result<Self> {
        quantize::quantize_weights(self, bits)
    }
}

impl Recurrent for LstmWeights {
    type Grad = LstmGradients;

    const KIND: CellKind = CellKind::Lstm;

    fn init(dims: ModelDims, cfg: &RunConfig) -> Result<Self> {
        baseline::init_lstm_weights(dims, cfg.seed, cfg.init_scale)
    }

    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn forecast(&self, inputs: &Matrix) -> Result<Matrix> {
        match baseline::lstm_forward(self, inputs, Head::Forecast)?.0 {
            LstmOutput::Forecast(out) => Ok(out),
            LstmOutput::Classify { .. } => unreachable!("forecast head"),
        }
    }

    fn forecast_grad(&self, inputs: &Matrix, targets: &Matrix) -> Result<(LstmGradients, f64, Matrix)> {
        let (out, trace) = baseline::lstm_forward(self, inputs, Head::Forecast)?;
        let LstmOutput::Forecast(out) = out else { unreachable!("forecast head") };
        let (g, loss) = baseline::lstm_backward(&trace, LstmTarget::Series(targets), self)?;
        Ok((g, loss, out))
    }

    fn probs(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        match baseline::lstm_forward(self, inputs, Head::Classify)?.0 {
            LstmOutput::Classify { probs, .. } => Ok(probs.into_vec()),
            LstmOutput::Forecast(_) => unreachable!("classify head"),
        }
    }

    fn classify_grad(&self, inputs: &Matrix, label: usize) -> Result<(LstmGradients, f64, Vec<f64>)> {
        let (out, trace) = baseline::lstm_forward(self, inputs, Head::Classify)?;
        let LstmOutput::Classify { probs, .. } = out else { unreachable!("classify head") };
        let (g, loss) = baseline::lstm_backward(&trace, LstmTarget::Label(label), self)?;
        Ok((g, loss, probs.into_vec()))
    }

    fn update(&mut self, g: &LstmGradients, rule: &UpdateRule) {
        rule.apply(self.matrices_mut(), g.matrices());
    }

    fn quantized(&self, bits: u32) -> Result<Self> {
        let mut q = self.clone();
        for m in q.matrices_mut() {
            quantize::quantize_in_place(m, bits)?;
        }
        Ok(q)
    }
}

/// Shadow/quantized weight bookkeeping shared by both loops.
struct QuantTrainer<M> {
    weights: M,
    bits: Option<u32>,
    inplace: bool,
}

impl<M: Recurrent> QuantTrainer<M> {
    fn new(init: M, cfg: &RunConfig) -> Result<Self> {
        let weights = match (cfg.bits, cfg.inplace_quant) {
            (Some(b), true) => init.quantized(b)?,
            _ => init,
        };
        Ok(QuantTrainer { weights, bits: cfg.bits, inplace: cfg.inplace_quant })
    }

    /// Weights the forward and backward passes run on.
    fn view(&self) -> Result<M> {
        match (self.bits, self.inplace) {
            (Some(b), false) => self.weights.quantized(b),
            _ => Ok(self.weights.clone()),
        }
    }

    fn update(&mut self, g: &M::Grad, rule: &UpdateRule) -> Result<()> {
        self.weights.update(g, rule);
        if let (Some(b), true) = (self.bits, self.inplace) {
            self.weights = self.weights.quantized(b)?;
        }
        Ok(())
    }
}

fn check_loss(epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { epoch, loss });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("metric", (1, pred.len()), (1, target.len())));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Squared error normalized by the target's centred sum of squares.
pub fn nmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let denom: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("nmse of a constant target"));
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(sse / denom)
}

/// Regression "accuracy" in percent: `100 * max(0, 1 - sum|y - p| / sum|y - mean(y)|)`.
///
/// This is a surrogate normalized-absolute-error score, not a canonical metric.
pub fn forecast_accuracy(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let denom: f64 = target.iter().map(|y| (y - mean).abs()).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("forecast accuracy of a constant target"));
    }
    let err: f64 = pred.iter().zip(target).map(|(p, y)| (y - p).abs()).sum();
    Ok(100.0 * (1.0 - err / denom).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub loss: f64,
    pub rmse: f64,
    /// Absent when the target is constant.
    pub nmse: Option<f64>,
    /// Surrogate percent score; absent when the target is constant.
    pub accuracy: Option<f64>,
}

pub fn forecast_metrics(pred: &Matrix, target: &Matrix) -> Result<ForecastMetrics> {
    Ok(ForecastMetrics {
        loss: backprop::mse_loss(pred, target)?,
        rmse: rmse(pred.data(), target.data())?,
        nmse: nmse(pred.data(), target.data()).ok(),
        accuracy: forecast_accuracy(pred.data(), target.data()).ok(),
    })
}

/// Rows are actual labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; classes]; classes] }
    }

    pub fn record(&mut self, actual: usize, predicted: usize) {
        self.counts[actual][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// `100 * trace / total`; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            100.0 * self.trace() as f64 / total as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Histories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Percent: surrogate forecast accuracy, or validation accuracy for classification.
    pub accuracy: f64,
    pub rmse: Option<f64>,
    pub nmse: Option<f64>,
}

fn fmt_num(v: f64) -> String {
    format!("{v:.10e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// `epoch,loss,accuracy,rmse,nmse`, one row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,accuracy,rmse,nmse\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            fmt_num(r.loss),
            fmt_num(r.accuracy),
            fmt_opt(r.rmse),
            fmt_opt(r.nmse)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Forecasting

#[derive(Debug, Clone)]
pub struct ForecastRun<M> {
    /// Published weights: the quantized view when `bits` is set.
    pub weights: M,
    pub history: Vec<EpochRecord>,
    pub train: ForecastMetrics,
    pub validation: Option<ForecastMetrics>,
}

pub fn train_forecast<M: Recurrent>(
    cfg: &RunConfig,
    data: &ForecastDataset,
    validation: Option<&ForecastDataset>,
) -> Result<ForecastRun<M>> {
    cfg.validate()?;
    if cfg.task != Task::Forecast {
        return Err(Error::Config("train_forecast needs task = forecast".into()));
    }
    let dims = ModelDims { m: data.inputs.rows(), n: cfg.hidden, k: data.k(), num_classes: 0 };
    if data.targets.rows() != cfg.hidden {
        return Err(Error::Config(format!(
            "forecast targets have {} rows but the hidden size is {}",
            data.targets.rows(),
            cfg.hidden
        )));
    }
    let rule = cfg.update_rule();
    let mut trainer = QuantTrainer::new(M::init(dims, cfg)?, cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let view = trainer.view()?;
        let (g, loss, out) = view.forecast_grad(&data.inputs, &data.targets)?;
        check_loss(epoch, loss)?;
        history.push(EpochRecord {
            epoch,
            loss,
            accuracy: forecast_accuracy(out.data(), data.targets.data()).unwrap_or(0.0),
            rmse: rmse(out.data(), data.targets.data()).ok(),
            nmse: nmse(out.data(), data.targets.data()).ok(),
        });
        trainer.update(&g, &rule)?;
    }
    let weights = trainer.view()?;
    let train = forecast_metrics(&weights.forecast(&data.inputs)?, &data.targets)?;
    check_loss(cfg.epochs, train.loss)?;
    let validation = validation.map(|v| forecast_metrics(&weights.forecast(&v.inputs)?, &v.targets)).transpose()?;
    Ok(ForecastRun { weights, history, train, validation })
}

// ---------------------------------------------------------------------------
// Classification

#[derive(Debug, Clone)]
pub struct ClassifyRun<M> {
    pub weights: M,
    pub history: Vec<EpochRecord>,
    /// Validation confusion matrix of the published weights.
    pub confusion: ConfusionMatrix,
    /// Mean training cross-entropy of the last epoch.
    pub final_loss: f64,
}

impl<M> ClassifyRun<M> {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

pub const NUM_CLASSES: usize = BeatClass::ALL.len();

/// Predicted class per window (argmax, ties to the lowest index).
pub fn predict_labels<M: Recurrent>(model: &M, data: &ClassifyDataset) -> Result<Vec<usize>> {
    data.windows.iter().map(|w| Ok(argmax(&model.probs(&w.input)?))).collect()
}

pub fn evaluate_classifier<M: Recurrent>(model: &M, data: &ClassifyDataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.dims().num_classes);
    for (w, pred) in data.windows.iter().zip(predict_labels(model, data)?) {
        cm.record(w.label.index(), pred);
    }
    Ok(cm)
}

pub fn train_classify<M: Recurrent>(
    cfg: &RunConfig,
    train: &ClassifyDataset,
    validation: &ClassifyDataset,
) -> Result<ClassifyRun<M>> {
    cfg.validate()?;
    if cfg.task != Task::Classify {
        return Err(Error::Config("train_classify needs task = classify".into()));
    }
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("training and validation sets must both be nonempty".into()));
    }
    let dims = ModelDims { m: 1, n: cfg.hidden, k: train.k, num_classes: NUM_CLASSES };
    let rule = cfg.update_rule();
    let mut trainer = QuantTrainer::new(M::init(dims, cfg)?, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_5417);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let w = &train.windows[idx];
            let view = trainer.view()?;
            let (g, loss, _) = view.classify_grad(&w.input, w.label.index())?;
            check_loss(epoch, loss)?;
            total += loss;
            trainer.update(&g, &rule)?;
        }
        let mean = total / train.len() as f64;
        check_loss(epoch, mean)?;
        let cm = evaluate_classifier(&trainer.view()?, validation)?;
        history.push(EpochRecord { epoch, loss: mean, accuracy: cm.accuracy(), rmse: None, nmse: None });
        final_loss = mean;
    }
    let weights = trainer.view()?;
    let confusion = evaluate_classifier(&weights, validation)?;
    Ok(ClassifyRun { weights, history, confusion, final_loss })
}

// ---------------------------------------------------------------------------
// Sweeps and comparisons

/// Training data for either task.
#[derive(Debug, Clone)]
pub enum TaskData {
    Forecast { train: ForecastDataset, validation: Option<ForecastDataset> },
    Classify { train: ClassifyDataset, validation: ClassifyDataset },
}

/// Summary of one finished run, independent of the cell type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_loss: f64,
    /// Percent; validation accuracy for classification, surrogate accuracy for forecasting.
    pub final_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub confusion: Option<ConfusionMatrix>,
    pub forecast: Option<ForecastMetrics>,
}

pub fn run_task<M: Recurrent>(cfg: &RunConfig, data: &TaskData) -> Result<RunSummary> {
    match data {
        TaskData::Forecast { train, validation } => {
            let run = train_forecast::<M>(cfg, train, validation.as_ref())?;
            Ok(RunSummary {
                final_loss: run.train.loss,
                final_accuracy: run.train.accuracy.unwrap_or(0.0),
                history: run.history,
                confusion: None,
                forecast: Some(run.train),
            })
        }
        TaskData::Classify { train, validation } => {
            let run = train_classify::<M>(cfg, train, validation)?;
            Ok(RunSummary {
                final_loss: run.final_loss,
                final_accuracy: run.accuracy(),
                history: run.history,
                confusion: Some(run.confusion),
                forecast: None,
            })
        }
    }
}

/// Bits label used in sweep outputs; `0` marks full precision.
pub fn bits_label(bits: Option<u32>) -> u32 {
    bits.unwrap_or(0)
}

/// Requested resolution: values of 0 or 32 and above mean full precision.
pub fn parse_sweep_bits(b: u32) -> Option<u32> {
    (b != 0 && b < 32).then_some(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    /// `0` for the full-precision run.
    pub bits: u32,
    pub summary: RunSummary,
}

/// One run per resolution with a shared seed, always including full precision,
/// sorted ascending by bits label.
pub fn quantize_sweep(cfg: &RunConfig, data: &TaskData, bits_list: &[u32]) -> Result<Vec<SweepEntry>> {
    if bits_list.is_empty() {
        return Err(Error::Config("bits list must not be empty".into()));
    }
    let mut resolutions: Vec<Option<u32>> = bits_list.iter().map(|&b| parse_sweep_bits(b)).collect();
    resolutions.push(None);
    resolutions.sort_by_key(|b| bits_label(*b));
    resolutions.dedup();
    resolutions
        .into_iter()
        .map(|bits| {
            let run_cfg = RunConfig { bits, ..cfg.clone() };
            Ok(SweepEntry { bits: bits_label(bits), summary: run_task::<DbLstmWeights>(&run_cfg, data)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRun {
    pub cell: CellKind,
    pub seed: u64,
    pub summary: RunSummary,
    /// First epoch whose record meets the threshold, if any.
    pub epochs_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mean_final_loss: f64,
    pub mean_final_accuracy: f64,
    pub mean_initial_loss: f64,
    /// Mean over the runs that reached the threshold.
    pub mean_epochs_to_threshold: Option<f64>,
    pub runs_reaching_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub task: Task,
    /// NMSE ceiling (forecasting) or accuracy floor in percent (classification).
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub dblstm: CellSummary,
    pub lstm: CellSummary,
    pub runs: Vec<CompareRun>,
}

/// Default threshold for epochs-to-threshold: NMSE 1e-2 or 90% accuracy.
pub fn default_threshold(task: Task) -> f64 {
    match task {
        Task::Forecast => 1e-2,
        Task::Classify => 90.0,
    }
}

fn epochs_to_threshold(task: Task, history: &[EpochRecord], threshold: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| match task {
            Task::Forecast => r.nmse.is_some_and(|v| v <= threshold),
            Task::Classify => r.accuracy >= threshold,
        })
        .map(|r| r.epoch)
}

fn summarize(runs: &[&CompareRun]) -> CellSummary {
    let n = runs.len() as f64;
    let reached: Vec<f64> = runs.iter().filter_map(|r| r.epochs_to_threshold).map(|e| e as f64).collect();
    CellSummary {
        mean_final_loss: runs.iter().map(|r| r.summary.final_loss).sum::<f64>() / n,
        mean_final_accuracy: runs.iter().map(|r| r.summary.final_accuracy).sum::<f64>() / n,
        mean_initial_loss: runs.iter().map(|r| r.summary.history.first().map_or(f64::NAN, |h| h.loss)).sum::<f64>() / n,
        mean_epochs_to_threshold: (!reached.is_empty()).then(|| reached.iter().sum::<f64>() / reached.len() as f64),
        runs_reaching_threshold: reached.len(),
    }
}

/// Trains both cells with identical hyperparameters for every seed.
pub fn compare_models(cfg: &RunConfig, data: &TaskData, seeds: &[u64], threshold: f64) -> Result<CompareSummary> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("comparison needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        let run_cfg = RunConfig { seed, ..cfg.clone() };
        for cell in [CellKind::Dblstm, CellKind::Lstm] {
            let summary = match cell {
                CellKind::Dblstm => run_task::<DbLstmWeights>(&run_cfg, data)?,
                CellKind::Lstm => run_task::<LstmWeights>(&run_cfg, data)?,
            };
            let epochs_to_threshold = epochs_to_threshold(cfg.task, &summary.history, threshold);
            runs.push(CompareRun { cell, seed, summary, epochs_to_threshold });
        }
    }
    let pick = |cell| runs.iter().filter(|r| r.cell == cell).collect::<Vec<_>>();
    Ok(CompareSummary {
        task: cfg.task,
        threshold,
        seeds: seeds.to_vec(),
        dblstm: summarize(&pick(CellKind::Dblstm)),
        lstm: summarize(&pick(CellKind::Lstm)),
        runs,
    })
}
