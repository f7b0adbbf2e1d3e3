use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samba_core::agc::{build_adjacency, chebyshev_basis, GraphParams};
use samba_core::bimamba::{bimamba_layer, reverse_time, BiMambaLayerParams};
use samba_core::data::{split_chronological, window_dataset, MinMaxScaler, SplitSpec};
use samba_core::mamba::{mamba, MambaParams};
use samba_core::metrics::{average_ranks, evaluate};
use samba_core::ssm::{discretize, scan_states, SsmInputs};
use samba_core::synthetic::desk_frame;
use samba_core::{Hyper, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn graph(rng: &mut ChaCha8Rng, n: usize, d_e: usize, log_scale: f64) -> GraphParams {
    GraphParams {
        psi: random(rng, vec![n, d_e], 2.0),
        log_scale: Tensor::scalar(log_scale),
    }
}

fn sq_dist(psi: &Tensor, m: usize, n: usize) -> f64 {
    psi.row(m).iter().zip(psi.row(n)).map(|(a, b)| (a - b) * (a - b)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjacency_rows_are_stochastic(seed in any::<u64>(), n in 2usize..12, d_e in 1usize..4, log_scale in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = graph(&mut rng, n, d_e, log_scale);
        let a = build_adjacency(&g).unwrap();
        for m in 0..n {
            let row = a.row(m);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            for k in 0..n {
                // Symmetric distances: a larger distance never gets more weight.
                if sq_dist(&g.psi, m, k) > sq_dist(&g.psi, m, m) {
                    prop_assert!(row[k] <= row[m] + 1e-15);
                }
            }
        }
        for m in 0..n {
            prop_assert_eq!(sq_dist(&g.psi, m, m), 0.0);
            for k in 0..n {
                prop_assert_eq!(sq_dist(&g.psi, m, k), sq_dist(&g.psi, k, m));
            }
        }
    }

    #[test]
    fn chebyshev_recurrence_and_cubic(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, vec![n, n], 1.0);
        let basis = chebyshev_basis(&a, 5).unwrap();
        prop_assert_eq!(basis.len(), 6);
        prop_assert_eq!(&basis[0], &Tensor::eye(n));
        prop_assert_eq!(&basis[1], &a);
        for k in 2..=5 {
            let two_a_prev = a.matmul(&basis[k - 1]).unwrap();
            for i in 0..n * n {
                let residual = basis[k].data()[i] - 2.0 * two_a_prev.data()[i] + basis[k - 2].data()[i];
                prop_assert!(residual.abs() < 1e-12);
            }
        }
        let a2 = a.matmul(&a).unwrap();
        let a3 = a2.matmul(&a).unwrap();
        for i in 0..n * n {
            let closed = 4.0 * a3.data()[i] - 3.0 * a.data()[i];
            prop_assert!((basis[3].data()[i] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_time_is_an_involution(seed in any::<u64>(), l in 1usize..10, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, vec![l, n], 5.0);
        let r = reverse_time(&x);
        prop_assert_eq!(&reverse_time(&r), &x);
        for i in 0..l {
            prop_assert_eq!(r.row(i), x.row(l - 1 - i));
        }
    }

    #[test]
    fn window_count_and_alignment(t in 2usize..80, l in 1usize..8) {
        let frame = desk_frame(t, 5);
        match window_dataset(&frame, l) {
            Ok(samples) => {
                prop_assert_eq!(samples.len(), t - l);
                for s in &samples {
                    let first = s.target_index - l;
                    for row in 0..l {
                        prop_assert_eq!(s.x.row(row), frame.features.row(first + row));
                    }
                    prop_assert!(frame.dates[first + l - 1] < s.target_date);
                    let c = &frame.close;
                    let expected = (c[s.target_index] - c[s.target_index - 1]) / c[s.target_index - 1];
                    prop_assert_eq!(s.target, expected);
                }
            }
            Err(_) => prop_assert!(t < l + 1),
        }
    }

    #[test]
    fn split_is_an_ordered_partition(n in 1usize..400, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (train_f, val_f) = (a.min(b), (a.max(b) - a.min(b)));
        let spec = SplitSpec::new(train_f, val_f, 1.0 - train_f - val_f).unwrap();
        let samples = window_dataset(&desk_frame(n + 1, 2), 1).unwrap();
        let split = split_chronological(samples.clone(), &spec).unwrap();
        let (tr, va, te) = spec.sizes(n);
        prop_assert_eq!((split.train.len(), split.val.len(), split.test.len()), (tr, va, te));
        prop_assert_eq!(tr, ((train_f * n as f64 + 1e-9).floor() as usize).min(n));
        let joined: Vec<_> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
        prop_assert_eq!(joined, samples);
    }

    #[test]
    fn scaler_round_trip_and_leakage_guard(seed in any::<u64>(), bump in 1.0f64..100.0) {
        let frame = desk_frame(60, seed);
        let samples = window_dataset(&frame, 4).unwrap();
        let split = split_chronological(samples, &SplitSpec::default()).unwrap();
        let scaler = MinMaxScaler::fit(&split.train).unwrap();
        let scaled = scaler.apply(&split.train).unwrap();
        let n = frame.feature_count();
        for j in 0..n {
            let column = scaled.iter().flat_map(|s| s.x.data().iter().skip(j).step_by(n).copied());
            let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            prop_assert_eq!((lo, hi), (0.0, 1.0));
        }
        // Statistics are a function of the training split alone.
        let mut tampered = split.clone();
        for s in tampered.val.iter_mut().chain(tampered.test.iter_mut()) {
            s.x.data_mut().iter_mut().for_each(|v| *v = *v * bump + bump);
        }
        prop_assert_eq!(MinMaxScaler::fit(&tampered.train).unwrap(), scaler.clone());
        let direct_min: Vec<f64> = (0..n)
            .map(|j| split.train.iter().flat_map(|s| s.x.data().iter().skip(j).step_by(n).copied()).fold(f64::INFINITY, f64::min))
            .collect();
        prop_assert_eq!(scaler.min(), &direct_min[..]);
    }

    #[test]
    fn metric_invariances(seed in any::<u64>(), len in 3usize..40, scale in 0.01f64..50.0, shift in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = evaluate(&pred, &target).unwrap();
        prop_assert!(base.rmse >= 0.0 && base.ic.abs() <= 1.0 && base.ric.abs() <= 1.0);

        let sp: Vec<f64> = pred.iter().map(|v| v * scale).collect();
        let st: Vec<f64> = target.iter().map(|v| v * scale).collect();
        let scaled = evaluate(&sp, &st).unwrap();
        prop_assert!((scaled.rmse - scale * base.rmse).abs() <= 1e-12 * scale.max(1.0));

        let affine: Vec<f64> = pred.iter().map(|v| scale * v + shift).collect();
        let m = evaluate(&affine, &target).unwrap();
        prop_assert!((m.ic - base.ic).abs() < 1e-10);

        let monotone: Vec<f64> = pred.iter().map(|v| (3.0 * v).exp() + v).collect();
        let m = evaluate(&monotone, &target).unwrap();
        prop_assert_eq!(m.ric, base.ric);
    }

    #[test]
    fn average_ranks_preserve_total(values in prop::collection::vec(-3i32..3, 1..30)) {
        let x: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let ranks = average_ranks(&x);
        let n = x.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn macs_scale_linearly_in_window(l in 1usize..40, n in 2usize..100, k in 0usize..5) {
        let mut h = Hyper::default_for(n.max(11));
        h.k = k;
        h.l = l;
        let base = h.macs();
        h.l = 2 * l;
        let doubled = h.macs();
        prop_assert_eq!(doubled.sequence, 2 * base.sequence);
        prop_assert_eq!(doubled.head, base.head);
        // The graph part is affine in L through the filter factorization only.
        let mut h3 = h;
        h3.l = 3 * l;
        let tripled = h3.macs();
        prop_assert_eq!(tripled.total() - doubled.total(), doubled.total() - base.total());
    }

    #[test]
    fn decay_is_monotone_in_step(a in -20.0f64..-0.01, d1 in 1e-4f64..5.0, factor in 1.01f64..4.0) {
        let at = |delta: f64| {
            discretize(&SsmInputs {
                a: Tensor::full(vec![1, 1], a),
                b: Tensor::ones(vec![1, 1]),
                c: Tensor::ones(vec![1, 1]),
                delta: Tensor::full(vec![1, 1], delta),
            })
            .unwrap()
            .a_bar
            .data()[0]
        };
        prop_assert!(at(d1 * factor) < at(d1));
    }

    #[test]
    fn hidden_state_obeys_stability_bound(seed in any::<u64>(), l in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, h) = (2, 3);
        let inputs = SsmInputs {
            a: Tensor::from_fn(vec![e, h], |_| -rng.random_range(0.1..3.0)),
            b: random(&mut rng, vec![l, h], 1.0),
            c: random(&mut rng, vec![l, h], 1.0),
            delta: Tensor::from_fn(vec![l, e], |_| rng.random_range(0.05..1.0)),
        };
        let d = discretize(&inputs).unwrap();
        let x = random(&mut rng, vec![l, e], 2.0);
        let states = scan_states(&d, &inputs.c, &x).unwrap();
        let inf = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_a = d.a_bar.data().iter().fold(0.0f64, |m, &v| m.max(v));
        let bound = inf(&d.b_bar) * inf(&x) / (1.0 - max_a);
        prop_assert!(inf(&states) <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn mamba_is_causal(seed in any::<u64>(), step in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MambaParams::init(&mut rng, 3, 4, 2);
        let x = random(&mut rng, vec![6, 3], 1.0);
        let mut changed = x.clone();
        changed.data_mut()[step * 3 + 1] += 0.75;
        let (y0, y1) = (mamba(&x, &p).unwrap(), mamba(&changed, &p).unwrap());
        prop_assert_eq!(&y0.data()[..step * 3], &y1.data()[..step * 3]);
        prop_assert!(y0.row(step) != y1.row(step));
    }

    #[test]
    fn layer_commutes_with_time_reversal(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, n) = (4, 3);
        let mut p = BiMambaLayerParams::init(&mut rng, n, l, 4, 2, 5);
        // Time-symmetric FFN: input rows and output columns mirrored over L.
        let u = 5;
        let w_in = p.ffn_in.weight.clone();
        p.ffn_in.weight = Tensor::from_fn(vec![l, u], |i| w_in.data()[(i / u).min(l - 1 - i / u) * u + i % u]);
        let w_out = p.ffn_out.weight.clone();
        p.ffn_out.weight = Tensor::from_fn(vec![u, l], |i| {
            let (r, c) = (i / l, i % l);
            w_out.data()[r * l + c.min(l - 1 - c)]
        });
        let b_out = p.ffn_out.bias.clone().unwrap();
        p.ffn_out.bias = Some(Tensor::from_fn(vec![l], |c| b_out.data()[c.min(l - 1 - c)]));
        let x = random(&mut rng, vec![l, n], 1.5);
        let y = bimamba_layer(&x, &p).unwrap();
        let mut swapped = p.clone();
        std::mem::swap(&mut swapped.fwd, &mut swapped.bwd);
        let y_rev = bimamba_layer(&reverse_time(&x), &swapped).unwrap();
        prop_assert!(y_rev.max_abs_diff(&reverse_time(&y)) < 1e-12);
    }

    #[test]
    fn softmax_and_layer_norm_row_properties(seed in any::<u64>(), rows in 1usize..6, cols in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, vec![rows, cols], 30.0);
        let s = x.softmax_rows().unwrap();
        for r in 0..rows {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let y = x.layer_norm(&Tensor::ones(vec![cols]), &Tensor::zeros(vec![cols])).unwrap();
        for r in 0..rows {
            let var_in = {
                let m = x.row(r).iter().sum::<f64>() / cols as f64;
                x.row(r).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64
            };
            prop_assume!(var_in > 1.0);
            let mean = y.row(r).iter().sum::<f64>() / cols as f64;
            let var = y.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-4 / var_in.max(1.0) + 1e-6);
        }
    }
}

#[test]
fn identical_embeddings_give_exact_uniform_rows() {
    for n in [2, 3, 7, 82] {
        let g = GraphParams {
            psi: Tensor::full(vec![n, 4], 0.37),
            log_scale: Tensor::scalar(1.3),
        };
        let a = build_adjacency(&g).unwrap();
        let uniform = 1.0 / n as f64;
        assert!(a.data().iter().all(|&v| (v - uniform).abs() <= f64::EPSILON * uniform));
    }
}

#[test]
fn large_scale_gives_diagonal_dominant_rows() {
    let g = GraphParams {
        psi: Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap(),
        log_scale: Tensor::scalar(50.0f64.ln()),
    };
    let a = build_adjacency(&g).unwrap();
    // exp(−50·D) is 1 on the diagonal and ~0 elsewhere, so each row tends to
    // softmax([1, 0, 0]) = [e, 1, 1]/(e + 2).
    let e = std::f64::consts::E;
    for m in 0..3 {
        for k in 0..3 {
            let expected = if m == k { e / (e + 2.0) } else { 1.0 / (e + 2.0) };
            assert!((a.at2(m, k) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_parameter_mamba_is_exactly_zero() {
    let p = MambaParams::zeros(5, 8, 4);
    let x = Tensor::from_fn(vec![6, 5], |i| (i as f64).sin() * 3.0);
    let y = mamba(&x, &p).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn default_split_of_one_hundred() {
    let samples = window_dataset(&desk_frame(105, 1), 5).unwrap();
    assert_eq!(samples.len(), 100);
    let s = split_chronological(samples, &SplitSpec::default()).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 5, 15));
}
