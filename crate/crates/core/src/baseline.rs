//! Conventional LSTM used as the comparison baseline.
//!
//! Gates see only `x_t` and `h_{t-1}` plus per-gate bias vectors; there are no
//! cell-state weights. Heads mirror the DB-LSTM ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backprop::{ce_loss, softmax_ce_grad};
use crate::dblstm::{fc_softmax, DbLstmWeights, Gate, ModelDims};
use crate::error::{Error, Result};
use crate::numerics::{dsigmoid_from_output, dtanh_from_output, gemv_acc, gemv_t_acc, ger_acc, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub dims: ModelDims,
    /// Input weights, `n x m`.
    pub w: [Matrix; 4],
    /// Recurrent weights, `n x n`.
    pub r: [Matrix; 4],
    /// Gate biases, `n x 1`.
    pub bias: [Matrix; 4],
    pub w_oh: Option<Matrix>,
}

/// Gradients laid out like [`LstmWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGradients {
    pub w: [Matrix; 4],
    pub r: [Matrix; 4],
    pub bias: [Matrix; 4],
    pub w_oh: Option<Matrix>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect())
        .expect("finite draws")
}

fn zeros4(rows: usize, cols: usize) -> [Matrix; 4] {
    std::array::from_fn(|_| Matrix::zeros(rows, cols))
}

pub fn init_lstm_weights(dims: ModelDims, seed: u64, scale: f64) -> Result<LstmWeights> {
    dims.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("init scale must be positive, got {scale}")));
    }
    let ModelDims { m, n, num_classes, .. } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = std::array::from_fn(|_| uniform(&mut rng, n, m, scale));
    let r = std::array::from_fn(|_| uniform(&mut rng, n, n, scale));
    let bias = std::array::from_fn(|_| uniform(&mut rng, n, 1, scale));
    let w_oh = (num_classes > 0).then(|| uniform(&mut rng, num_classes, n, scale));
    Ok(LstmWeights { dims, w, r, bias, w_oh })
}

impl LstmWeights {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims { m, n, num_classes, .. } = dims;
        LstmWeights {
            dims,
            w: zeros4(n, m),
            r: zeros4(n, n),
            bias: zeros4(n, 1),
            w_oh: (num_classes > 0).then(|| Matrix::zeros(num_classes, n)),
        }
    }

    pub fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(13);
        for (prefix, group) in [("W", &self.w), ("R", &self.r), ("b", &self.bias)] {
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
        self.w.iter().chain(&self.r).chain(&self.bias).chain(self.w_oh.as_ref()).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.w.iter_mut().chain(&mut self.r).chain(&mut self.bias).chain(self.w_oh.as_mut()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let ModelDims { m, n, num_classes, .. } = self.dims;
        let expect = |mat: &Matrix, want: (usize, usize)| {
            if mat.shape() == want {
                Ok(())
            } else {
                Err(Error::shape("lstm weights", mat.shape(), want))
            }
        };
        for g in 0..4 {
            expect(&self.w[g], (n, m))?;
            expect(&self.r[g], (n, n))?;
            expect(&self.bias[g], (n, 1))?;
        }
        match (&self.w_oh, num_classes) {
            (None, 0) => Ok(()),
            (Some(w_oh), c) if c > 0 => expect(w_oh, (c, n)),
            _ => Err(Error::Config("W_oh presence does not match num_classes".into())),
        }
    }

    /// The equivalent DB-LSTM: bias vectors become the bias column (divided
    /// by `b`) and every cell-state matrix is zero.
    pub fn to_dblstm(&self, b: f64) -> Result<DbLstmWeights> {
        if b == 0.0 || !b.is_finite() {
            return Err(Error::Config("embedding needs a nonzero finite bias scalar".into()));
        }
        let ModelDims { m, n, .. } = self.dims;
        let mut db = DbLstmWeights::zeros(self.dims, b);
        for g in 0..4 {
            for row in 0..n {
                for col in 0..m {
                    db.w[g].set(row, col, self.w[g].get(row, col));
                }
                db.w[g].set(row, m, self.bias[g].get(row, 0) / b);
            }
            db.r[g] = self.r[g].clone();
        }
        db.w_oh = self.w_oh.clone();
        Ok(db)
    }
}

impl LstmGradients {
    pub fn zeros_like(w: &LstmWeights) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        LstmGradients {
            w: std::array::from_fn(|g| z(&w.w[g])),
            r: std::array::from_fn(|g| z(&w.r[g])),
            bias: std::array::from_fn(|g| z(&w.bias[g])),
            w_oh: w.w_oh.as_ref().map(z),
        }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.w.iter().chain(&self.r).chain(&self.bias).chain(self.w_oh.as_ref()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub x: Vec<f64>,
    pub acts: [Vec<f64>; 4],
    pub c_prev: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmTrace {
    pub steps: Vec<LstmStep>,
}

impl LstmTrace {
    pub fn last_hidden(&self) -> &[f64] {
        self.steps.last().map_or(&[], |s| &s.h)
    }
}

/// Which output head the baseline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Forecast,
    Classify,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LstmOutput {
    /// `n x k` hidden states.
    Forecast(Matrix),
    Classify {
        logits: Matrix,
        probs: Matrix,
    },
}

fn run(w: &LstmWeights, inputs: &Matrix) -> Result<LstmTrace> {
    let ModelDims { m, n, .. } = w.dims;
    if inputs.rows() != m || inputs.cols() == 0 {
        return Err(Error::shape("lstm inputs", inputs.shape(), (m, w.dims.k)));
    }
    let mut c_prev = vec![0.0; n];
    let mut h_prev = vec![0.0; n];
    let mut steps = Vec::with_capacity(inputs.cols());
    for t in 0..inputs.cols() {
        let x = inputs.col_vec(t);
        let acts: [Vec<f64>; 4] = Gate::ALL.map(|g| {
            let gi = g as usize;
            let mut s = w.bias[gi].data().to_vec();
            gemv_acc(&mut s, &w.w[gi], &x);
            gemv_acc(&mut s, &w.r[gi], &h_prev);
            s.into_iter().map(|v| g.activate(v)).collect()
        });
        let [f, g, i, o] = &acts;
        let c: Vec<f64> = (0..n).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let h: Vec<f64> = (0..n).map(|j| o[j] * c[j].tanh()).collect();
        steps.push(LstmStep {
            x,
            acts: acts.clone(),
            c_prev: std::mem::replace(&mut c_prev, c.clone()),
            h_prev: std::mem::replace(&mut h_prev, h.clone()),
            c,
            h,
        });
    }
    Ok(LstmTrace { steps })
}

pub fn lstm_forward(w: &LstmWeights, inputs: &Matrix, head: Head) -> Result<(LstmOutput, LstmTrace)> {
    let trace = run(w, inputs)?;
    let out = match head {
        Head::Forecast => {
            let n = w.dims.n;
            let mut out = Matrix::zeros(n, trace.steps.len());
            for (t, s) in trace.steps.iter().enumerate() {
                for j in 0..n {
                    out.set(j, t, s.h[j]);
                }
            }
            LstmOutput::Forecast(out)
        }
        Head::Classify => {
            let w_oh = w.w_oh.as_ref().ok_or_else(|| Error::Config("classification head requires W_oh".into()))?;
            let (logits, probs) = fc_softmax(w_oh, trace.last_hidden());
            LstmOutput::Classify { logits, probs }
        }
    };
    Ok((out, trace))
}

fn backward(trace: &LstmTrace, w: &LstmWeights, local: impl Fn(usize) -> Option<Vec<f64>>) -> LstmGradients {
    let n = w.dims.n;
    let mut grads = LstmGradients::zeros_like(w);
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    for (t, s) in trace.steps.iter().enumerate().rev() {
        let mut dh = dh_next;
        if let Some(inj) = local(t) {
            for (d, v) in dh.iter_mut().zip(inj) {
                *d += v;
            }
        }
        let [f, g, i, o] = &s.acts;
        let tanh_c: Vec<f64> = s.c.iter().map(|v| v.tanh()).collect();
        let dc: Vec<f64> = (0..n).map(|j| dh[j] * o[j] * dtanh_from_output(tanh_c[j]) + dc_next[j]).collect();
        let d_sums = [
            (0..n).map(|j| dc[j] * s.c_prev[j] * dsigmoid_from_output(f[j])).collect::<Vec<_>>(),
            (0..n).map(|j| dc[j] * i[j] * dtanh_from_output(g[j])).collect(),
            (0..n).map(|j| dc[j] * g[j] * dsigmoid_from_output(i[j])).collect(),
            (0..n).map(|j| dh[j] * tanh_c[j] * dsigmoid_from_output(o[j])).collect(),
        ];
        let mut dh_prev = vec![0.0; n];
        for (gi, ds) in d_sums.iter().enumerate() {
            gemv_t_acc(&mut dh_prev, &w.r[gi], ds);
            ger_acc(&mut grads.w[gi], ds, &s.x);
            ger_acc(&mut grads.r[gi], ds, &s.h_prev);
            for (b, d) in grads.bias[gi].data_mut().iter_mut().zip(ds) {
                *b += d;
            }
        }
        dc_next = (0..n).map(|j| dc[j] * f[j]).collect();
        dh_next = dh_prev;
    }
    grads
}

/// Target for one baseline sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum LstmTarget<'a> {
    Series(&'a Matrix),
    Label(usize),
}

/// Loss and gradients for a trace, with the same loss conventions as the DB-LSTM heads.
pub fn lstm_backward(trace: &LstmTrace, target: LstmTarget<'_>, w: &LstmWeights) -> Result<(LstmGradients, f64)> {
    let n = w.dims.n;
    match target {
        LstmTarget::Series(y) => {
            if y.shape() != (n, trace.steps.len()) {
                return Err(Error::shape("lstm_backward targets", y.shape(), (n, trace.steps.len())));
            }
            let mut loss = 0.0;
            for (t, s) in trace.steps.iter().enumerate() {
                for j in 0..n {
                    let e = s.h[j] - y.get(j, t);
                    loss += 0.5 * e * e;
                }
            }
            let grads = backward(trace, w, |t| Some((0..n).map(|j| trace.steps[t].h[j] - y.get(j, t)).collect()));
            Ok((grads, loss))
        }
        LstmTarget::Label(label) => {
            let w_oh = w.w_oh.as_ref().ok_or_else(|| Error::Config("classification head requires W_oh".into()))?;
            let (_, probs) = fc_softmax(w_oh, trace.last_hidden());
            let loss = ce_loss(&probs, label)?;
            let d_out = softmax_ce_grad(probs.data(), label);
            let mut dh_end = vec![0.0; n];
            gemv_t_acc(&mut dh_end, w_oh, &d_out);
            let last = trace.steps.len() - 1;
            let mut grads = backward(trace, w, |t| (t == last).then(|| dh_end.clone()));
            let mut dw_oh = Matrix::zeros(w_oh.rows(), w_oh.cols());
            ger_acc(&mut dw_oh, &d_out, trace.last_hidden());
            grads.w_oh = Some(dw_oh);
            Ok((grads, loss))
        }
    }
}
