//! The dynamically-biased LSTM cell.
//!
//! Every gate sees the input with a shared scalar bias appended (`[x_t; b]`),
//! the previous hidden state, and a cell state through its own `C` matrix.
//! The forget, generate and input gates read `c_{t-1}`; the output gate reads
//! the freshly updated `c_t`, so it has to be evaluated after the cell update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemv_acc, sigmoid, softmax, Matrix};

/// Gate index into the `[Matrix; 4]` weight groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Generate = 1,
    Input = 2,
    Output = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Generate, Gate::Input, Gate::Output];

    pub fn suffix(self) -> &'static str {
        match self {
            Gate::Forget => "f",
            Gate::Generate => "g",
            Gate::Input => "i",
            Gate::Output => "o",
        }
    }

    pub(crate) fn activate(self, x: f64) -> f64 {
        match self {
            Gate::Generate => x.tanh(),
            _ => sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input features per time step.
    pub m: usize,
    /// Hidden size.
    pub n: usize,
    /// Window length in time steps.
    pub k: usize,
    /// Output classes; zero for the forecasting head.
    pub num_classes: usize,
}

impl ModelDims {
    pub fn forecast(k: usize) -> Self {
        ModelDims { m: 1, n: 1, k, num_classes: 0 }
    }

    pub fn classify(n: usize, k: usize, num_classes: usize) -> Self {
        ModelDims { m: 1, n, k, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive (m={}, n={}, k={})",
                self.m, self.n, self.k
            )));
        }
        Ok(())
    }
}

/// Number of trainable scalars: four `n x (m+1)` input matrices (bias column
/// included), eight `n x n` recurrent and cell matrices, and the FC layer.
pub fn param_count(dims: &ModelDims) -> usize {
    let ModelDims { m, n, num_classes, .. } = *dims;
    4 * n * (m + 1) + 8 * n * n + num_classes * n
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbLstmWeights {
    pub dims: ModelDims,
    /// Input weights, `n x (m+1)`; the last column multiplies the shared bias.
    pub w: [Matrix; 4],
    /// Recurrent weights, `n x n`.
    pub r: [Matrix; 4],
    /// Cell-state weights, `n x n`.
    pub c: [Matrix; 4],
    /// Shared dynamic bias appended to every input column.
    pub b: f64,
    /// Fully connected head, `num_classes x n`; absent for forecasting.
    pub w_oh: Option<Matrix>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite uniform draws")
}

/// Seeded uniform initialization in `[-scale, scale]`; `b` is drawn from `[0, 1)`.
pub fn init_weights(dims: ModelDims, seed: u64, scale: f64) -> Result<DbLstmWeights> {
    dims.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("init scale must be positive, got {scale}")));
    }
    let ModelDims { m, n, num_classes, .. } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = std::array::from_fn(|_| uniform_matrix(&mut rng, n, m + 1, scale));
    let r = std::array::from_fn(|_| uniform_matrix(&mut rng, n, n, scale));
    let c = std::array::from_fn(|_| uniform_matrix(&mut rng, n, n, scale));
    let b = rng.gen_range(0.0..1.0);
    let w_oh = (num_classes > 0).then(|| uniform_matrix(&mut rng, num_classes, n, scale));
    Ok(DbLstmWeights { dims, w, r, c, b, w_oh })
}

impl DbLstmWeights {
    /// All-zero weights with the given bias.
    pub fn zeros(dims: ModelDims, b: f64) -> Self {
        let ModelDims { m, n, num_classes, .. } = dims;
        DbLstmWeights {
            dims,
            w: std::array::from_fn(|_| Matrix::zeros(n, m + 1)),
            r: std::array::from_fn(|_| Matrix::zeros(n, n)),
            c: std::array::from_fn(|_| Matrix::zeros(n, n)),
            b,
            w_oh: (num_classes > 0).then(|| Matrix::zeros(num_classes, n)),
        }
    }

    pub fn with_bias(mut self, b: f64) -> Self {
        self.b = b;
        self
    }

    /// Named matrices in serialization order.
    pub fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(13);
        for (prefix, group) in [("W", &self.w), ("R", &self.r), ("C", &self.c)] {
            for g in Gate::ALL {
                out.push((format!("{prefix}_{}", g.suffix()), &group[g as usize]));
            }
        }
        if let Some(w_oh) = &self.w_oh {
            out.push(("W_oh".to_string(), w_oh));
        }
        out
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.w.iter().chain(&self.r).chain(&self.c).chain(self.w_oh.as_ref()).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.w.iter_mut().chain(&mut self.r).chain(&mut self.c).chain(self.w_oh.as_mut()).collect()
    }

    /// Checks every matrix against `dims`.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let ModelDims { m, n, num_classes, .. } = self.dims;
        for mat in &self.w {
            check_shape(mat, (n, m + 1))?;
        }
        for mat in self.r.iter().chain(&self.c) {
            check_shape(mat, (n, n))?;
        }
        match (&self.w_oh, num_classes) {
            (None, 0) => {}
            (Some(w_oh), k) if k > 0 => check_shape(w_oh, (k, n))?,
            (None, _) => return Err(Error::Config("classification head requires W_oh".into())),
            (Some(_), _) => return Err(Error::Config("W_oh present but num_classes is 0".into())),
        }
        if !self.b.is_finite() || self.matrices().iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("weights contain non-finite entries".into()));
        }
        Ok(())
    }
}

fn check_shape(m: &Matrix, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(Error::shape("weights", m.shape(), want));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub c: Matrix,
    pub h: Matrix,
}

impl StepState {
    pub fn zeros(n: usize) -> Self {
        StepState { c: Matrix::zeros(n, 1), h: Matrix::zeros(n, 1) }
    }
}

/// Everything one time step leaves behind for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// `[x_t; b]`, `(m+1) x 1`.
    pub x: Matrix,
    /// Gate pre-activation sums, indexed by [`Gate`].
    pub sums: [Matrix; 4],
    /// Gate activations, indexed by [`Gate`].
    pub acts: [Matrix; 4],
    pub c_prev: Matrix,
    pub h_prev: Matrix,
    pub c: Matrix,
    pub h: Matrix,
}

impl StepTrace {
    pub fn act(&self, g: Gate) -> &[f64] {
        self.acts[g as usize].data()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub c0: Matrix,
    pub h0: Matrix,
    pub steps: Vec<StepTrace>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_hidden(&self) -> &Matrix {
        self.steps.last().map_or(&self.h0, |s| &s.h)
    }
}

pub fn step_forward(w: &DbLstmWeights, x: &Matrix, prev: &StepState) -> Result<(StepTrace, StepState)> {
    let ModelDims { m, n, .. } = w.dims;
    if x.shape() != (m, 1) {
        return Err(Error::shape("step_forward input", x.shape(), (m, 1)));
    }
    if prev.c.shape() != (n, 1) || prev.h.shape() != (n, 1) {
        return Err(Error::shape("step_forward state", prev.c.shape(), (n, 1)));
    }
    let mut xb = Vec::with_capacity(m + 1);
    xb.extend_from_slice(x.data());
    xb.push(w.b);

    let c_prev = prev.c.data();
    let h_prev = prev.h.data();
    let gate_sum = |g: Gate, cell: &[f64]| {
        let mut s = vec![0.0; n];
        gemv_acc(&mut s, &w.w[g as usize], &xb);
        gemv_acc(&mut s, &w.r[g as usize], h_prev);
        gemv_acc(&mut s, &w.c[g as usize], cell);
        s
    };

    let f_s = gate_sum(Gate::Forget, c_prev);
    let g_s = gate_sum(Gate::Generate, c_prev);
    let i_s = gate_sum(Gate::Input, c_prev);
    let f: Vec<f64> = f_s.iter().map(|&v| Gate::Forget.activate(v)).collect();
    let g: Vec<f64> = g_s.iter().map(|&v| Gate::Generate.activate(v)).collect();
    let i: Vec<f64> = i_s.iter().map(|&v| Gate::Input.activate(v)).collect();

    let c: Vec<f64> = (0..n).map(|j| f[j] * c_prev[j] + g[j] * i[j]).collect();
    let o_s = gate_sum(Gate::Output, &c);
    let o: Vec<f64> = o_s.iter().map(|&v| Gate::Output.activate(v)).collect();
    let h: Vec<f64> = c.iter().zip(&o).map(|(&cv, &ov)| cv.tanh() * ov).collect();

    let c = Matrix::column(&c);
    let h = Matrix::column(&h);
    let trace = StepTrace {
        x: Matrix::column(&xb),
        sums: [f_s, g_s, i_s, o_s].map(|v| Matrix::column(&v)),
        acts: [f, g, i, o].map(|v| Matrix::column(&v)),
        c_prev: prev.c.clone(),
        h_prev: prev.h.clone(),
        c: c.clone(),
        h: h.clone(),
    };
    Ok((trace, StepState { c, h }))
}

fn run_sequence(w: &DbLstmWeights, inputs: &Matrix) -> Result<ForwardTrace> {
    let ModelDims { m, n, .. } = w.dims;
    if inputs.rows() != m || inputs.cols() == 0 {
        return Err(Error::shape("forward inputs", inputs.shape(), (m, w.dims.k)));
    }
    let mut state = StepState::zeros(n);
    let mut steps = Vec::with_capacity(inputs.cols());
    for t in 0..inputs.cols() {
        let x = Matrix::column(&inputs.col_vec(t));
        let (trace, next) = step_forward(w, &x, &state)?;
        steps.push(trace);
        state = next;
    }
    Ok(ForwardTrace { c0: Matrix::zeros(n, 1), h0: Matrix::zeros(n, 1), steps })
}

/// Runs the recurrence over an `m x k` input; output column `t` is `h_t`.
pub fn forward_forecast(w: &DbLstmWeights, inputs: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    let trace = run_sequence(w, inputs)?;
    let n = w.dims.n;
    let mut out = Matrix::zeros(n, trace.len());
    for (t, step) in trace.steps.iter().enumerate() {
        for j in 0..n {
            out.set(j, t, step.h.data()[j]);
        }
    }
    Ok((out, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    pub trace: ForwardTrace,
}

/// Runs the recurrence, then `W_oh * h_end` through SoftMax.
pub fn forward_classify(w: &DbLstmWeights, inputs: &Matrix) -> Result<ClassifyOutput> {
    let w_oh = w.w_oh.as_ref().ok_or_else(|| Error::Config("classification head requires W_oh".into()))?;
    if w_oh.rows() < 2 {
        return Err(Error::Config("classification needs at least two classes".into()));
    }
    let trace = run_sequence(w, inputs)?;
    let (logits, probs) = fc_softmax(w_oh, trace.last_hidden().data());
    Ok(ClassifyOutput { logits, probs, trace })
}

pub(crate) fn fc_softmax(w_oh: &Matrix, h_end: &[f64]) -> (Matrix, Matrix) {
    let mut logits = vec![0.0; w_oh.rows()];
    gemv_acc(&mut logits, w_oh, h_end);
    let probs = softmax(&logits);
    (Matrix::column(&logits), Matrix::column(&probs))
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
