//! Analytic BPTT gradients against central finite differences.

use crate::backprop::{
    backward_forecast, backward_step, central_differences, finite_diff_gradient, sequence_gradient, sequence_loss,
    softmax_jacobian, Gradients, StepGradIn, Target,
};
use crate::baseline::{init_lstm_weights, lstm_backward, lstm_forward, Head, LstmOutput, LstmTarget, LstmWeights};
use crate::dblstm::{forward_forecast, init_weights, step_forward, ModelDims, StepState};
use crate::numerics::softmax;
use crate::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-6;
const ABS_FLOOR: f64 = 1e-8;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= (REL_TOL * a.abs().max(b.abs())).max(ABS_FLOOR)
}

fn assert_grads_close(analytic: &[f64], numeric: &[f64], ctx: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (idx, (a, f)) in analytic.iter().zip(numeric).enumerate() {
        assert!(close(*a, *f), "{ctx}: param {idx}: analytic {a:e} vs fd {f:e}");
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Matrix {
    Matrix::from_vec(m, k, (0..m * k).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn single_step_scalar_gradients() {
    let dims = ModelDims::forecast(1);
    for seed in 0..10 {
        let w = init_weights(dims, seed, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let inputs = random_inputs(&mut rng, 1, 1);
        let y = Matrix::row(&[rng.gen_range(-0.5..0.5)]);
        let (out, trace) = forward_forecast(&w, &inputs).unwrap();
        let mut gi = StepGradIn::zeros(1);
        gi.dh_local = out.sub(&y).unwrap();
        let (g, _, _) = backward_step(&trace.steps[0], &w, &gi).unwrap();
        assert_eq!(g.flatten().len(), 16);
        let fd = finite_diff_gradient(&w, &inputs, &Target::Series(y), 1e-6).unwrap();
        assert_grads_close(&g.flatten(), &fd.flatten(), &format!("seed {seed}"));
    }
}

#[test]
fn backward_step_propagates_state_gradients() {
    // d(loss)/d(h_prev), d(loss)/d(c_prev) for loss = <u, h_t> + <v, c_t>
    let dims = ModelDims { m: 2, n: 3, k: 1, num_classes: 0 };
    let w = init_weights(dims, 77, 0.6).unwrap();
    let x = Matrix::column(&[0.4, -0.9]);
    let u = [0.3, -0.7, 1.1];
    let v = [-0.5, 0.2, 0.8];
    let loss = |state: &[f64]| {
        let prev = StepState { h: Matrix::column(&state[..3]), c: Matrix::column(&state[3..]) };
        let (_, next) = step_forward(&w, &x, &prev).unwrap();
        let h: f64 = next.h.data().iter().zip(&u).map(|(a, b)| a * b).sum();
        let c: f64 = next.c.data().iter().zip(&v).map(|(a, b)| a * b).sum();
        h + c
    };
    let state0 = [0.1, -0.3, 0.25, 0.6, -0.2, 0.4];
    let prev = StepState { h: Matrix::column(&state0[..3]), c: Matrix::column(&state0[3..]) };
    let (step, _) = step_forward(&w, &x, &prev).unwrap();
    let gi = StepGradIn { dh_next: Matrix::zeros(3, 1), dc_next: Matrix::column(&v), dh_local: Matrix::column(&u) };
    let (_, dh_prev, dc_prev) = backward_step(&step, &w, &gi).unwrap();
    let fd = central_differences(&state0, 1e-6, loss);
    let analytic: Vec<f64> = dh_prev.data().iter().chain(dc_prev.data()).copied().collect();
    assert_grads_close(&analytic, &fd, "state gradients");
}

fn check_dblstm(n: usize, k: usize, seed: u64, classify: bool) {
    let dims =
        if classify { ModelDims { m: 1, n, k, num_classes: 3 } } else { ModelDims { m: 1, n, k, num_classes: 0 } };
    let w = init_weights(dims, seed, 0.7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let inputs = random_inputs(&mut rng, 1, k);
    let target = if classify {
        Target::Label(rng.gen_range(0..3))
    } else {
        Target::Series(random_inputs(&mut rng, n, k).scale(0.5))
    };
    let (g, loss) = sequence_gradient(&w, &inputs, &target).unwrap();
    assert!((loss - sequence_loss(&w, &inputs, &target).unwrap()).abs() < 1e-12);
    let fd = finite_diff_gradient(&w, &inputs, &target, 1e-6).unwrap();
    let ctx = format!("dblstm classify={classify} n={n} k={k} seed={seed}");
    assert_grads_close(&g.flatten(), &fd.flatten(), &ctx);
}

#[test]
fn dblstm_forecast_gradients_match_finite_differences() {
    for n in [1, 2, 3] {
        for k in [1, 2, 5] {
            for seed in 0..20 {
                check_dblstm(n, k, seed, false);
            }
        }
    }
}

#[test]
fn dblstm_classify_gradients_match_finite_differences() {
    for n in [1, 2, 3] {
        for k in [1, 2, 5] {
            for seed in 0..20 {
                check_dblstm(n, k, seed, true);
            }
        }
    }
}

#[test]
fn forecast_k4_full_sequence() {
    let w = init_weights(ModelDims::forecast(4), 2024, 0.5).unwrap();
    let inputs = Matrix::row(&[0.3, -0.6, 1.2, 0.05]);
    let y = Matrix::row(&[0.1, 0.2, -0.3, 0.4]);
    let (_, trace) = forward_forecast(&w, &inputs).unwrap();
    let (g, _) = backward_forecast(&trace, &y, &w).unwrap();
    let fd = finite_diff_gradient(&w, &inputs, &Target::Series(y.clone()), 1e-6).unwrap();
    assert_grads_close(&g.flatten(), &fd.flatten(), "k=4");

    // halving epsilon moves the estimate by O(eps^2), far below the tolerance
    let fd_half = finite_diff_gradient(&w, &inputs, &Target::Series(y), 5e-7).unwrap();
    let coarse = finite_diff_gradient(&w, &inputs, &Target::Series(Matrix::row(&[0.1, 0.2, -0.3, 0.4])), 1e-3).unwrap();
    let fine = finite_diff_gradient(&w, &inputs, &Target::Series(Matrix::row(&[0.1, 0.2, -0.3, 0.4])), 5e-4).unwrap();
    for ((c, f), a) in coarse.flatten().iter().zip(fine.flatten()).zip(g.flatten()) {
        // Richardson: error ratio ~4 when eps halves
        let e_c = (c - a).abs();
        let e_f = (f - a).abs();
        if e_c > 1e-10 {
            assert!(e_f < 0.5 * e_c, "coarse {e_c:e} fine {e_f:e}");
        }
    }
    for (a, b) in fd_half.flatten().iter().zip(g.flatten()) {
        assert!(close(*a, b));
    }
}

#[test]
fn targets_equal_to_outputs_give_zero_gradient() {
    let w = init_weights(ModelDims { m: 1, n: 2, k: 5, num_classes: 0 }, 5, 0.5).unwrap();
    let inputs = Matrix::row(&[0.1, 0.5, -0.2, 0.3, 0.9]);
    let (out, trace) = forward_forecast(&w, &inputs).unwrap();
    let (g, loss) = backward_forecast(&trace, &out, &w).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn forecast_k1_equals_single_backward_step() {
    let w = init_weights(ModelDims::forecast(1), 8, 0.5).unwrap();
    let inputs = Matrix::row(&[0.7]);
    let y = Matrix::row(&[-0.2]);
    let (out, trace) = forward_forecast(&w, &inputs).unwrap();
    let (g, _) = backward_forecast(&trace, &y, &w).unwrap();
    let mut gi = StepGradIn::zeros(1);
    gi.dh_local = out.sub(&y).unwrap();
    let (g_step, _, _) = backward_step(&trace.steps[0], &w, &gi).unwrap();
    assert_eq!(g, g_step);
}

#[test]
fn accumulation_is_linear_in_step_injections() {
    let w = init_weights(ModelDims { m: 1, n: 2, k: 4, num_classes: 0 }, 31, 0.6).unwrap();
    let inputs = Matrix::row(&[0.2, -0.4, 0.8, 0.1]);
    let (out, trace) = forward_forecast(&w, &inputs).unwrap();
    let y = Matrix::from_vec(2, 4, vec![0.1, 0.0, -0.3, 0.2, 0.5, -0.1, 0.05, 0.3]).unwrap();
    let (full, _) = backward_forecast(&trace, &y, &w).unwrap();

    let mut summed: Option<Gradients> = None;
    for t in 0..4 {
        // targets equal to outputs everywhere except step t
        let mut yt = out.clone();
        for j in 0..2 {
            yt.set(j, t, y.get(j, t));
        }
        let (g, _) = backward_forecast(&trace, &yt, &w).unwrap();
        match summed.as_mut() {
            Some(s) => s.add_assign(&g),
            None => summed = Some(g),
        }
    }
    for (a, b) in full.flatten().iter().zip(summed.unwrap().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn classify_gradient_cases() {
    let dims = ModelDims::classify(3, 5, 5);
    let mut w = init_weights(dims, 3, 0.5).unwrap();
    w.w_oh = Some(Matrix::zeros(5, 3));
    let inputs = Matrix::row(&[0.1, 0.4, -0.3, 0.2, 0.0]);
    let (g, loss) = sequence_gradient(&w, &inputs, &Target::Label(0)).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    let cell: Vec<f64> = g.w.iter().chain(&g.r).chain(&g.c).flat_map(|m| m.data().to_vec()).collect();
    assert!(cell.iter().all(|&v| v == 0.0));
    assert!(g.w_oh.unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let logits = [0.3, -1.2, 2.0, 0.5];
    let p = softmax(&logits);
    let jac = softmax_jacobian(&p);
    for j in 0..4 {
        let fd = central_differences(&logits, 1e-6, |l| softmax(l)[j]);
        for (i, d) in fd.iter().enumerate() {
            // fd[i] = dp_j / dOut_i
            assert!((jac.get(j, i) - d).abs() < 1e-9);
        }
    }
    for i in 0..4 {
        let row: f64 = (0..4).map(|j| jac.get(i, j)).sum();
        assert!(row.abs() < 1e-15);
    }
}

fn lstm_flat(w: &LstmWeights) -> Vec<f64> {
    w.matrices().iter().flat_map(|m| m.data().to_vec()).collect()
}

fn lstm_with(w: &LstmWeights, flat: &[f64]) -> LstmWeights {
    let mut out = w.clone();
    let mut off = 0;
    for m in out.matrices_mut() {
        let len = m.len();
        m.data_mut().copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    out
}

fn lstm_loss(w: &LstmWeights, inputs: &Matrix, target: &LstmTarget<'_>) -> f64 {
    let head = match target {
        LstmTarget::Series(_) => Head::Forecast,
        LstmTarget::Label(_) => Head::Classify,
    };
    let (_, trace) = lstm_forward(w, inputs, head).unwrap();
    lstm_backward(&trace, target.clone(), w).unwrap().1
}

fn check_lstm(n: usize, k: usize, seed: u64, classify: bool) {
    let dims = ModelDims { m: 1, n, k, num_classes: if classify { 3 } else { 0 } };
    let w = init_lstm_weights(dims, seed, 0.7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
    let inputs = random_inputs(&mut rng, 1, k);
    let y = random_inputs(&mut rng, n, k).scale(0.5);
    let target = if classify { LstmTarget::Label(rng.gen_range(0..3)) } else { LstmTarget::Series(&y) };
    let head = if classify { Head::Classify } else { Head::Forecast };
    let (_, trace) = lstm_forward(&w, &inputs, head).unwrap();
    let (g, _) = lstm_backward(&trace, target.clone(), &w).unwrap();
    let fd = central_differences(&lstm_flat(&w), 1e-6, |p| lstm_loss(&lstm_with(&w, p), &inputs, &target));
    assert_grads_close(&g.flatten(), &fd, &format!("lstm classify={classify} n={n} k={k} seed={seed}"));
}

#[test]
fn baseline_gradients_match_finite_differences() {
    for n in [1, 2, 3] {
        for k in [1, 2, 5] {
            for seed in 0..20 {
                check_lstm(n, k, seed, false);
                check_lstm(n, k, seed, true);
            }
        }
    }
}

#[test]
fn baseline_zero_upstream_gives_zero() {
    let w = init_lstm_weights(ModelDims { m: 1, n: 2, k: 3, num_classes: 0 }, 1, 0.5).unwrap();
    let inputs = Matrix::row(&[0.1, 0.2, 0.3]);
    let (out, trace) = lstm_forward(&w, &inputs, Head::Forecast).unwrap();
    let LstmOutput::Forecast(y) = out else { unreachable!() };
    let (g, _) = lstm_backward(&trace, LstmTarget::Series(&y), &w).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}
