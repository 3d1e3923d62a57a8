//! Forward-pass oracles, embedding equivalence and quantizer properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backprop::{apply_update, sequence_gradient, sequence_loss, Target, UpdateRule};
use crate::baseline::{init_lstm_weights, lstm_forward, Head, LstmOutput};
use crate::dblstm::{forward_classify, forward_forecast, init_weights, step_forward, DbLstmWeights, Gate, StepState};
use crate::numerics::softmax;
use crate::quantize::{derive_spec, quantize_matrix};
use crate::{Matrix, ModelDims};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hand-written scalar cell: returns `(c, h)`.
fn scalar_step(w: &DbLstmWeights, x: f64, c_prev: f64, h_prev: f64) -> (f64, f64) {
    let pre = |g: Gate, c: f64| {
        let i = g as usize;
        w.w[i].get(0, 0) * x + w.w[i].get(0, 1) * w.b + w.r[i].get(0, 0) * h_prev + w.c[i].get(0, 0) * c
    };
    let f = sig(pre(Gate::Forget, c_prev));
    let g = pre(Gate::Generate, c_prev).tanh();
    let i = sig(pre(Gate::Input, c_prev));
    let c = f * c_prev + g * i;
    let o = sig(pre(Gate::Output, c));
    (c, c.tanh() * o)
}

fn random_row(rng: &mut ChaCha8Rng, k: usize, amp: f64) -> Matrix {
    Matrix::row(&(0..k).map(|_| rng.gen_range(-amp..amp)).collect::<Vec<_>>())
}

#[test]
fn scalar_step_oracle() {
    for seed in 0..50 {
        let w = init_weights(ModelDims::forecast(1), seed, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let (x, c0, h0) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let prev = StepState { c: Matrix::column(&[c0]), h: Matrix::column(&[h0]) };
        let (_, st) = step_forward(&w, &Matrix::column(&[x]), &prev).unwrap();
        let (c, h) = scalar_step(&w, x, c0, h0);
        assert!((st.c.get(0, 0) - c).abs() < 1e-14, "seed {seed}");
        assert!((st.h.get(0, 0) - h).abs() < 1e-14, "seed {seed}");
    }
}

#[test]
fn three_steps_chain_the_scalar_oracle() {
    for seed in 0..20 {
        let w = init_weights(ModelDims::forecast(3), seed, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = random_row(&mut rng, 3, 2.0);
        let (out, _) = forward_forecast(&w, &inputs).unwrap();
        let (mut c, mut h) = (0.0, 0.0);
        for t in 0..3 {
            (c, h) = scalar_step(&w, inputs.get(0, t), c, h);
            assert!((out.get(0, t) - h).abs() < 1e-14, "seed {seed} step {t}");
        }
    }
}

#[test]
fn softmax_shift_invariance_and_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.0).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        for (a, v) in p.iter().zip(&logits) {
            assert!((a - v.exp() / denom).abs() < 1e-14);
        }
    }
}

proptest! {
    #[test]
    fn gates_and_hidden_stay_in_range(seed in 0u64..10_000, n in 1usize..5, k in 1usize..6, scale in 0.1f64..4.0) {
        let w = init_weights(ModelDims { m: 1, n, k, num_classes: 0 }, seed, scale).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = random_row(&mut rng, k, 10.0);
        let (_, trace) = forward_forecast(&w, &inputs).unwrap();
        let (_, again) = forward_forecast(&w, &inputs).unwrap();
        prop_assert_eq!(&trace, &again);
        for step in &trace.steps {
            for g in [Gate::Forget, Gate::Input, Gate::Output] {
                prop_assert!(step.act(g).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            prop_assert!(step.act(Gate::Generate).iter().all(|&v| (-1.0..=1.0).contains(&v)));
            prop_assert!(step.h.data().iter().all(|&v| v.abs() <= 1.0));
        }
    }
}

#[test]
fn zeroed_peepholes_reproduce_the_baseline() {
    for n in [1, 3, 8] {
        for seed in 0..10 {
            let k = 7;
            let dims = ModelDims { m: 1, n, k, num_classes: 5 };
            let lstm = init_lstm_weights(dims, seed, 0.8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = rng.gen_range(0.05..1.0);
            let db = lstm.to_dblstm(b).unwrap();
            let inputs = random_row(&mut rng, k, 2.0);

            let (_, ltrace) = lstm_forward(&lstm, &inputs, Head::Forecast).unwrap();
            let (_, dtrace) = forward_forecast(&db, &inputs).unwrap();
            for (ls, ds) in ltrace.steps.iter().zip(&dtrace.steps) {
                for (a, e) in ls.h.iter().zip(ds.h.data()) {
                    assert!((a - e).abs() <= 1e-12, "n={n} seed={seed}");
                }
                for (a, e) in ls.c.iter().zip(ds.c.data()) {
                    assert!((a - e).abs() <= 1e-12, "n={n} seed={seed}");
                }
            }

            let (LstmOutput::Classify { probs, .. }, _) = lstm_forward(&lstm, &inputs, Head::Classify).unwrap() else {
                panic!("classify head");
            };
            let out = forward_classify(&db, &inputs).unwrap();
            assert!(out.probs.max_abs_diff(&probs).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn small_plain_steps_reduce_the_loss() {
    for seed in 0..5 {
        for classify in [false, true] {
            let dims = ModelDims { m: 1, n: 3, k: 6, num_classes: if classify { 5 } else { 0 } };
            let w = init_weights(dims, seed, 0.5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 9);
            let inputs = random_row(&mut rng, 6, 1.0);
            let target = if classify {
                Target::Label(rng.gen_range(0..5))
            } else {
                Target::Series(Matrix::from_vec(3, 6, (0..18).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap())
            };
            let (g, before) = sequence_gradient(&w, &inputs, &target).unwrap();
            for eta in [1e-3, 1e-4] {
                let next = apply_update(&w, &g, &UpdateRule::plain(eta)).unwrap();
                let after = sequence_loss(&next, &inputs, &target).unwrap();
                assert!(after < before, "seed {seed} classify={classify} eta {eta}: {after} !< {before}");
            }
        }
    }
}

fn matrix_strategy() -> impl Strategy<Value = (Matrix, u32)> {
    (1usize..6, 1usize..6, 1u32..=8).prop_flat_map(|(r, c, bits)| {
        (prop::collection::vec(-3.0f64..3.0, r * c), Just(r), Just(c), Just(bits))
            .prop_map(|(data, r, c, bits)| (Matrix::from_vec(r, c, data).unwrap(), bits))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn quantizer_properties((m, bits) in matrix_strategy()) {
        let spec = derive_spec(&m, bits).unwrap();
        let q = quantize_matrix(&m, &spec);
        prop_assert_eq!(quantize_matrix(&q, &spec), q.clone());

        let mut distinct: Vec<f64> = q.data().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assert!(distinct.len() <= 2 << bits);

        for (&x, &y) in m.data().iter().zip(q.data()) {
            prop_assert!((x.abs() - y.abs()).abs() <= spec.delta / 2.0 + 1e-12);
            if x != 0.0 {
                prop_assert_eq!(x.signum(), y.signum());
            }
        }
        for (&a, &qa) in m.data().iter().zip(q.data()) {
            for (&b, &qb) in m.data().iter().zip(q.data()) {
                if a.abs() <= b.abs() {
                    prop_assert!(qa.abs() <= qb.abs());
                }
            }
        }
    }

    #[test]
    fn equal_magnitudes_collapse_to_the_minimum(mag in 0.01f64..3.0, signs in prop::collection::vec(any::<bool>(), 1..12), bits in 1u32..=8) {
        let data: Vec<f64> = signs.iter().map(|&s| if s { mag } else { -mag }).collect();
        let m = Matrix::row(&data);
        let spec = derive_spec(&m, bits).unwrap();
        prop_assert_eq!(spec.delta, 0.0);
        prop_assert_eq!(quantize_matrix(&m, &spec), m);
    }
}
