//! Backpropagation through time for both DB-LSTM heads.
//!
//! The per-step recursion follows the cell structure directly:
//!
//! * `dh = dh_local + dh_next`
//! * output gate: `do_s = dh * tanh(c_t) * o(1-o)`
//! * cell: `dc = dh * o * (1 - tanh^2 c_t) + C_o^T do_s + dc_next`
//! * `df_s = dc * c_{t-1} * f(1-f)`, `dg_s = dc * i * (1-g^2)`, `di_s = dc * g * i(1-i)`
//! * `dh_{t-1} = sum_gates R^T d*_s`
//! * `dc_{t-1} = dc * f + C_f^T df_s + C_g^T dg_s + C_i^T di_s`
//!
//! Weight gradients are outer products of the gate-sum gradients with
//! `[x_t; b]`, `h_{t-1}`, and `c_{t-1}` (or `c_t` for `C_o`).

use serde::{Deserialize, Serialize};

use crate::dblstm::{forward_classify, forward_forecast, DbLstmWeights, ForwardTrace, Gate, StepTrace};
use crate::error::{Error, Result};
use crate::numerics::{dsigmoid_from_output, dtanh_from_output, gemv_t_acc, ger_acc, Matrix};

/// Gradient of the loss with respect to every trainable matrix of a [`DbLstmWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: [Matrix; 4],
    pub r: [Matrix; 4],
    pub c: [Matrix; 4],
    pub w_oh: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(w: &DbLstmWeights) -> Self {
        Gradients {
            w: w.w.clone().map(|m| Matrix::zeros(m.rows(), m.cols())),
            r: w.r.clone().map(|m| Matrix::zeros(m.rows(), m.cols())),
            c: w.c.clone().map(|m| Matrix::zeros(m.rows(), m.cols())),
            w_oh: w.w_oh.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    /// Same order as [`DbLstmWeights::matrices`].
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.w.iter().chain(&self.r).chain(&self.c).chain(self.w_oh.as_ref()).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.w.iter_mut().chain(&mut self.r).chain(&mut self.c).chain(self.w_oh.as_mut()).collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

/// Upstream gradients arriving at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradIn {
    pub dh_next: Matrix,
    pub dc_next: Matrix,
    /// Gradient injected by the task head at this step (zero when absent).
    pub dh_local: Matrix,
}

impl StepGradIn {
    pub fn zeros(n: usize) -> Self {
        StepGradIn { dh_next: Matrix::zeros(n, 1), dc_next: Matrix::zeros(n, 1), dh_local: Matrix::zeros(n, 1) }
    }
}

/// Half the summed squared error over every entry.
pub fn mse_loss(out: &Matrix, target: &Matrix) -> Result<f64> {
    if out.shape() != target.shape() {
        return Err(Error::shape("mse_loss", out.shape(), target.shape()));
    }
    Ok(0.5 * out.data().iter().zip(target.data()).map(|(o, y)| (y - o) * (y - o)).sum::<f64>())
}

/// Cross-entropy `-ln p_label`.
pub fn ce_loss(probs: &Matrix, label: usize) -> Result<f64> {
    let classes = probs.len();
    if label >= classes {
        return Err(Error::Label { label, classes });
    }
    Ok(-probs.data()[label].ln())
}

/// Backward through one step, accumulating weight gradients into `grads`.
/// Returns `(dh_prev, dc_prev)`.
fn backward_step_acc(
    step: &StepTrace,
    w: &DbLstmWeights,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut Gradients,
) -> (Vec<f64>, Vec<f64>) {
    let n = dh.len();
    let f = step.act(Gate::Forget);
    let g = step.act(Gate::Generate);
    let i = step.act(Gate::Input);
    let o = step.act(Gate::Output);
    let c = step.c.data();
    let c_prev = step.c_prev.data();

    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let do_s: Vec<f64> = (0..n).map(|j| dh[j] * tanh_c[j] * dsigmoid_from_output(o[j])).collect();

    // dc gathers the direct tanh path, the output gate's C_o path, and the next step.
    let mut dc: Vec<f64> = (0..n).map(|j| dh[j] * o[j] * dtanh_from_output(tanh_c[j]) + dc_next[j]).collect();
    gemv_t_acc(&mut dc, &w.c[Gate::Output as usize], &do_s);

    let df_s: Vec<f64> = (0..n).map(|j| dc[j] * c_prev[j] * dsigmoid_from_output(f[j])).collect();
    let dg_s: Vec<f64> = (0..n).map(|j| dc[j] * i[j] * dtanh_from_output(g[j])).collect();
    let di_s: Vec<f64> = (0..n).map(|j| dc[j] * g[j] * dsigmoid_from_output(i[j])).collect();
    let d_sums = [&df_s, &dg_s, &di_s, &do_s];

    let mut dh_prev = vec![0.0; n];
    for gate in Gate::ALL {
        gemv_t_acc(&mut dh_prev, &w.r[gate as usize], d_sums[gate as usize]);
    }

    let mut dc_prev: Vec<f64> = (0..n).map(|j| dc[j] * f[j]).collect();
    for gate in [Gate::Forget, Gate::Generate, Gate::Input] {
        gemv_t_acc(&mut dc_prev, &w.c[gate as usize], d_sums[gate as usize]);
    }

    let x = step.x.data();
    let h_prev = step.h_prev.data();
    for gate in Gate::ALL {
        let ds = d_sums[gate as usize];
        let gi = gate as usize;
        ger_acc(&mut grads.w[gi], ds, x);
        ger_acc(&mut grads.r[gi], ds, h_prev);
        let cell = if gate == Gate::Output { c } else { c_prev };
        ger_acc(&mut grads.c[gi], ds, cell);
    }
    (dh_prev, dc_prev)
}

/// One backward step in isolation: the step's weight gradients and the
/// gradients flowing into the previous hidden and cell states.
pub fn backward_step(step: &StepTrace, w: &DbLstmWeights, grad_in: &StepGradIn) -> Result<(Gradients, Matrix, Matrix)> {
    let n = w.dims.n;
    for m in [&grad_in.dh_next, &grad_in.dc_next, &grad_in.dh_local] {
        if m.shape() != (n, 1) {
            return Err(Error::shape("backward_step", m.shape(), (n, 1)));
        }
    }
    if step.c.shape() != (n, 1) || step.x.shape() != (w.dims.m + 1, 1) {
        return Err(Error::shape("backward_step trace", step.c.shape(), (n, 1)));
    }
    let dh: Vec<f64> = grad_in.dh_local.data().iter().zip(grad_in.dh_next.data()).map(|(a, b)| a + b).collect();
    let mut grads = Gradients::zeros_like(w);
    let (dh_prev, dc_prev) = backward_step_acc(step, w, &dh, grad_in.dc_next.data(), &mut grads);
    Ok((grads, Matrix::column(&dh_prev), Matrix::column(&dc_prev)))
}

/// BPTT over a full trace with an optional injection per step.
fn backward_sequence(trace: &ForwardTrace, w: &DbLstmWeights, local: impl Fn(usize) -> Option<Vec<f64>>) -> Gradients {
    let n = w.dims.n;
    let mut grads = Gradients::zeros_like(w);
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    for (t, step) in trace.steps.iter().enumerate().rev() {
        let mut dh = dh_next;
        if let Some(inj) = local(t) {
            for (d, v) in dh.iter_mut().zip(inj) {
                *d += v;
            }
        }
        let (dh_prev, dc_prev) = backward_step_acc(step, w, &dh, &dc_next, &mut grads);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    grads
}

/// Forecasting gradients: every step injects `Out_t - y_t`; gradients are summed over the window.
pub fn backward_forecast(trace: &ForwardTrace, targets: &Matrix, w: &DbLstmWeights) -> Result<(Gradients, f64)> {
    let n = w.dims.n;
    if targets.shape() != (n, trace.len()) {
        return Err(Error::shape("backward_forecast targets", targets.shape(), (n, trace.len())));
    }
    let mut loss = 0.0;
    for (t, step) in trace.steps.iter().enumerate() {
        for j in 0..n {
            let e = step.h.data()[j] - targets.get(j, t);
            loss += 0.5 * e * e;
        }
    }
    let grads = backward_sequence(trace, w, |t| {
        let h = trace.steps[t].h.data();
        Some((0..n).map(|j| h[j] - targets.get(j, t)).collect())
    });
    Ok((grads, loss))
}

/// Classification gradients: `dOut = p - onehot(label)` enters only at the last step.
pub fn backward_classify(
    trace: &ForwardTrace,
    probs: &Matrix,
    label: usize,
    w: &DbLstmWeights,
) -> Result<(Gradients, f64)> {
    let w_oh = w.w_oh.as_ref().ok_or_else(|| Error::Config("classification head requires W_oh".into()))?;
    let loss = ce_loss(probs, label)?;
    if probs.len() != w_oh.rows() {
        return Err(Error::shape("backward_classify probs", probs.shape(), (w_oh.rows(), 1)));
    }
    let d_out = softmax_ce_grad(probs.data(), label);
    let h_end = trace.last_hidden().data().to_vec();
    let mut dh_end = vec![0.0; w.dims.n];
    gemv_t_acc(&mut dh_end, w_oh, &d_out);

    let last = trace.len().saturating_sub(1);
    let mut grads = backward_sequence(trace, w, |t| (t == last).then(|| dh_end.clone()));
    let mut dw_oh = Matrix::zeros(w_oh.rows(), w_oh.cols());
    ger_acc(&mut dw_oh, &d_out, &h_end);
    grads.w_oh = Some(dw_oh);
    Ok((grads, loss))
}

/// `p - onehot(label)`.
pub fn softmax_ce_grad(probs: &[f64], label: usize) -> Vec<f64> {
    probs.iter().enumerate().map(|(j, &p)| if j == label { p - 1.0 } else { p }).collect()
}

/// Jacobian of SoftMax, `dp_i/dOut_j`.
pub fn softmax_jacobian(probs: &[f64]) -> Matrix {
    let c = probs.len();
    let mut jac = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let v = if i == j { probs[i] * (1.0 - probs[j]) } else { -probs[i] * probs[j] };
            jac.set(i, j, v);
        }
    }
    jac
}

/// How the gradient threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Each entry is clamped to `[-clip, clip]`.
    #[default]
    Element,
    /// Each matrix is rescaled so its Frobenius norm is at most `clip`.
    Norm,
}

impl std::str::FromStr for ClipMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "element" => Ok(ClipMode::Element),
            "norm" => Ok(ClipMode::Norm),
            other => Err(format!("unknown clip mode `{other}` (expected element or norm)")),
        }
    }
}

/// Plain gradient-descent step parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRule {
    pub eta: f64,
    /// L2 coefficient added to the gradient as `penalty * w`.
    pub weight_penalty: f64,
    /// Gradient threshold; `f64::INFINITY` disables it.
    pub clip: f64,
    pub clip_mode: ClipMode,
}

impl UpdateRule {
    pub fn plain(eta: f64) -> Self {
        UpdateRule { eta, weight_penalty: 0.0, clip: f64::INFINITY, clip_mode: ClipMode::Element }
    }

    /// `w - eta * (clip(g) + penalty * w)` for one entry under element-wise clipping.
    pub fn step(&self, weight: f64, grad: f64) -> f64 {
        let g = grad.clamp(-self.clip, self.clip);
        weight - self.eta * (g + self.weight_penalty * weight)
    }

    pub(crate) fn apply(&self, weights: Vec<&mut Matrix>, grads: Vec<&Matrix>) {
        for (wm, gm) in weights.into_iter().zip(grads) {
            debug_assert_eq!(wm.shape(), gm.shape());
            match self.clip_mode {
                ClipMode::Element => {
                    for (w, &g) in wm.data_mut().iter_mut().zip(gm.data()) {
                        *w = self.step(*w, g);
                    }
                }
                ClipMode::Norm => {
                    let norm = gm.data().iter().map(|g| g * g).sum::<f64>().sqrt();
                    let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
                    for (w, &g) in wm.data_mut().iter_mut().zip(gm.data()) {
                        *w -= self.eta * (g * scale + self.weight_penalty * *w);
                    }
                }
            }
        }
    }
}

/// Returns the updated weights; `b` is left unchanged.
pub fn apply_update(w: &DbLstmWeights, g: &Gradients, rule: &UpdateRule) -> Result<DbLstmWeights> {
    let mut next = w.clone();
    apply_update_in_place(&mut next, g, rule)?;
    Ok(next)
}

pub fn apply_update_in_place(w: &mut DbLstmWeights, g: &Gradients, rule: &UpdateRule) -> Result<()> {
    let shapes_ok = w.matrices().len() == g.matrices().len()
        && w.matrices().iter().zip(g.matrices()).all(|(a, b)| a.shape() == b.shape());
    if !shapes_ok {
        return Err(Error::Config("gradient layout does not match weights".into()));
    }
    rule.apply(w.matrices_mut(), g.matrices());
    Ok(())
}

/// Supervision target for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Per-step regression targets, `n x k`.
    Series(Matrix),
    /// Class index for the classification head.
    Label(usize),
}

/// Total loss of one sequence under the given head.
pub fn sequence_loss(w: &DbLstmWeights, inputs: &Matrix, target: &Target) -> Result<f64> {
    match target {
        Target::Series(y) => {
            let (out, _) = forward_forecast(w, inputs)?;
            mse_loss(&out, y)
        }
        Target::Label(label) => {
            let out = forward_classify(w, inputs)?;
            ce_loss(&out.probs, *label)
        }
    }
}

/// Analytic gradient of [`sequence_loss`].
pub fn sequence_gradient(w: &DbLstmWeights, inputs: &Matrix, target: &Target) -> Result<(Gradients, f64)> {
    match target {
        Target::Series(y) => {
            let (_, trace) = forward_forecast(w, inputs)?;
            backward_forecast(&trace, y, w)
        }
        Target::Label(label) => {
            let out = forward_classify(w, inputs)?;
            backward_classify(&out.trace, &out.probs, *label, w)
        }
    }
}

/// Central differences of `f` at `params`, one coordinate at a time.
pub fn central_differences(params: &[f64], epsilon: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|idx| {
            let orig = p[idx];
            p[idx] = orig + epsilon;
            let up = f(&p);
            p[idx] = orig - epsilon;
            let down = f(&p);
            p[idx] = orig;
            (up - down) / (2.0 * epsilon)
        })
        .collect()
}

pub(crate) fn flatten_matrices(ms: &[&Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.data().iter().copied()).collect()
}

pub(crate) fn unflatten_into(ms: Vec<&mut Matrix>, flat: &[f64]) {
    let mut off = 0;
    for m in ms {
        let len = m.len();
        m.data_mut().copy_from_slice(&flat[off..off + len]);
        off += len;
    }
}

/// Finite-difference estimate of every weight gradient, re-running the full forward each time.
pub fn finite_diff_gradient(w: &DbLstmWeights, inputs: &Matrix, target: &Target, epsilon: f64) -> Result<Gradients> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    // surface shape errors before the perturbation loop swallows them
    sequence_loss(w, inputs, target)?;
    let base = flatten_matrices(&w.matrices());
    let mut probe = w.clone();
    let fd = central_differences(&base, epsilon, |p| {
        unflatten_into(probe.matrices_mut(), p);
        sequence_loss(&probe, inputs, target).unwrap_or(f64::NAN)
    });
    let mut grads = Gradients::zeros_like(w);
    unflatten_into(grads.matrices_mut(), &fd);
    Ok(grads)
}
