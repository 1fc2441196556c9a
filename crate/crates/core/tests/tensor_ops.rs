//! Tensor-core operations against naive loop oracles and finite differences.

use proptest::prelude::*;
use stnlab::{numeric_grad_check, numeric_grad_check_many, rng, Error, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "tensor-ops-test");
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut r)
}

fn naive_conv(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [b, cin, h, w] = x.dims4("t").unwrap();
    let [cout, _, kh, kw] = k.dims4("t").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([b, cout, oh, ow]);
    for n in 0..b {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.data()[o];
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += k.at(&[o, c, u, v]) * x.at(&[n, c, y as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[n, o, i, j], acc);
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let [b, c, h, w] = x.dims4("t").unwrap();
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for n in 0..b {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for u in 0..window {
                        for v in 0..window {
                            m = m.max(x.at(&[n, ch, i * stride + u, j * stride + v]));
                        }
                    }
                    out.set(&[n, ch, i, j], m);
                }
            }
        }
    }
    out
}

fn naive_dense(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let [b, n] = x.dims2("t").unwrap();
    let [m, _] = w.dims2("t").unwrap();
    let mut out = Tensor::zeros([b, m]);
    for r in 0..b {
        for o in 0..m {
            let mut acc = bias.data()[o];
            for i in 0..n {
                acc += x.at(&[r, i]) * w.at(&[o, i]);
            }
            out.set(&[r, o], acc);
        }
    }
    out
}

fn conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> stnlab::Result<Tensor> {
    let mut tape = Tape::new();
    let (x, k, b) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
    let y = tape.conv2d(x, k, b, stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv_of_ones_sums_window() {
    let out = conv(
        &Tensor::full([1, 1, 3, 3], 1.0),
        &Tensor::full([1, 1, 2, 2], 1.0),
        &Tensor::zeros([1]),
        1,
        0,
    )
    .unwrap();
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert!(out.data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
    let out = conv(&x, &Tensor::full([1, 1, 1, 1], 1.0), &Tensor::zeros([1]), 1, 0).unwrap();
    assert_eq!(out, x);
}

#[test]
fn conv_strided_padded_matches_loops() {
    let x = random(&[2, 3, 8, 8], 1);
    let k = random(&[4, 3, 3, 3], 2);
    let b = random(&[4], 3);
    let out = conv(&x, &k, &b, 2, 1).unwrap();
    let want = naive_conv(&x, &k, &b, 2, 1);
    assert_eq!(out.shape(), want.shape());
    assert!(out.max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let err = conv(
        &Tensor::zeros([1, 2, 4, 4]),
        &Tensor::zeros([1, 3, 3, 3]),
        &Tensor::zeros([1]),
        1,
        0,
    )
    .unwrap_err();
    match err {
        Error::Shape { dim, .. } => assert_eq!(dim, "input channels"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn pool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap(), true);
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    // Ties route the gradient to the first element of each window.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full([1, 1, 4, 4], 0.5), true);
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    let mut expect = Tensor::zeros([1, 1, 4, 4]);
    for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        expect.set(&[0, 0, i, j], 1.0);
    }
    assert_eq!(g, expect);
}

#[test]
fn pool_matches_loops() {
    let x = random(&[1, 2, 6, 6], 4);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.max_pool2d(v, 2, 2).unwrap();
    assert_eq!(tape.value(y), &naive_pool(&x, 2, 2));
}

#[test]
fn pool_window_too_large() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros([1, 1, 2, 3]));
    assert!(matches!(tape.max_pool2d(v, 3, 1), Err(Error::InvalidInput { .. })));
}

fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> stnlab::Result<Tensor> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.dense(x, w, b)?;
    Ok(tape.value(y).clone())
}

#[test]
fn dense_examples() {
    let x = random(&[3, 4], 5);
    let mut eye = Tensor::zeros([4, 4]);
    for i in 0..4 {
        eye.set(&[i, i], 1.0);
    }
    assert_eq!(dense(&x, &eye, &Tensor::zeros([4])).unwrap(), x);

    let b = Tensor::new([2], vec![0.25, -3.0]).unwrap();
    let out = dense(&x, &Tensor::zeros([2, 4]), &b).unwrap();
    for row in out.data().chunks(2) {
        assert_eq!(row, b.data());
    }

    let (x, w, b) = (random(&[3, 5], 6), random(&[4, 5], 7), random(&[4], 8));
    assert!(dense(&x, &w, &b).unwrap().max_abs_diff(&naive_dense(&x, &w, &b)) < 1e-12);

    assert!(matches!(
        dense(&random(&[3, 5], 1), &random(&[4, 6], 1), &Tensor::zeros([4])),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> stnlab::Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(l, labels)?;
    Ok(tape.value(loss).data()[0])
}

#[test]
fn cross_entropy_examples() {
    let uniform = cross_entropy(&Tensor::full([2, 10], 0.3), &[1, 7]).unwrap();
    assert!((uniform - 10f64.ln()).abs() < 1e-12);

    // Direct formula: explicit normalization, no max shift.
    let logits = random(&[4, 10], 9);
    let labels = [0, 3, 9, 5];
    let mut want = 0.0;
    for (r, &lab) in labels.iter().enumerate() {
        let z: f64 = (0..10).map(|k| logits.at(&[r, k]).exp()).sum();
        want += -(logits.at(&[r, lab]).exp() / z).ln();
    }
    want /= 4.0;
    assert!((cross_entropy(&logits, &labels).unwrap() - want).abs() < 1e-10);

    assert!(matches!(
        cross_entropy(&logits, &[0, 1, 10, 2]),
        Err(Error::InvalidInput { .. })
    ));
}

#[test]
fn cross_entropy_stable_for_large_logits() {
    let logits = Tensor::new([1, 3], vec![1000.0, 0.0, -1000.0]).unwrap();
    let l = cross_entropy(&logits, &[0]).unwrap();
    assert!(l.is_finite() && l.abs() < 1e-12);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let t = tape.leaf(random(&[2, 3], 10), true);
    let s = tape.sum(t);
    tape.backward(s).unwrap();
    assert!(tape.grad(t).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_half_square_is_identity() {
    let x = random(&[3, 4], 11);
    let mut tape = Tape::new();
    let t = tape.leaf(x.clone(), true);
    let sq = tape.mul(t, t).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    tape.backward(half).unwrap();
    assert!(tape.grad(t).unwrap().max_abs_diff(&x) < 1e-15);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let t = tape.leaf(Tensor::zeros([2]), true);
    assert!(matches!(tape.backward(t), Err(Error::InvalidInput { .. })));
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2, 1, 5, 5], 12), true);
    let k = tape.leaf(random(&[3, 1, 3, 3], 13), true);
    let b = tape.leaf(random(&[3], 14), true);
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    let r = tape.relu(y);
    let p = tape.max_pool2d(r, 2, 2).unwrap();
    let f = tape.flatten(p).unwrap();
    let w = tape.leaf(random(&[4, 12], 15), true);
    let wb = tape.leaf(random(&[4], 16), true);
    let logits = tape.dense(f, w, wb).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &[1, 3]).unwrap();
    tape.backward(loss).unwrap();
    let once: Vec<Tensor> = [x, k, b, w, wb].iter().map(|&v| tape.grad(v).unwrap()).collect();
    tape.backward(loss).unwrap();
    for (v, g1) in [x, k, b, w, wb].iter().zip(&once) {
        let g2 = tape.grad(*v).unwrap();
        for (a, b) in g2.data().iter().zip(g1.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn grad_check_linear_is_exact() {
    let w = random(&[3, 4], 17);
    let err = numeric_grad_check(
        |tape, x| {
            let c = tape.constant(w.clone());
            let p = tape.mul(x, c)?;
            Ok(tape.sum(p))
        },
        &random(&[3, 4], 18),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_rejects_bad_epsilon() {
    let r = numeric_grad_check(|t, x| Ok(t.sum(x)), &Tensor::zeros([1]), 0.1);
    assert!(r.is_err());
}

/// Points whose relu inputs and pooling windows sit at least `gap` away from
/// a kink. Resamples until the condition holds.
fn away_from_kinks(shape: &[usize], seed: u64, check: impl Fn(&Tensor) -> bool) -> Tensor {
    for s in 0..1000 {
        let t = random(shape, seed * 1000 + s);
        if check(&t) {
            return t;
        }
    }
    panic!("no kink-free point found");
}

#[test]
fn composite_network_gradients() {
    // conv -> relu -> pool -> dense -> loss, checked w.r.t. every input.
    for point in 0..10u64 {
        let x = random(&[2, 2, 6, 6], 100 + point);
        let k = random(&[3, 2, 3, 3], 200 + point);
        let b = random(&[3], 300 + point);
        let w = random(&[5, 12], 400 + point);
        let wb = random(&[5], 500 + point);
        let graph = |tape: &mut Tape, v: &[stnlab::Var]| {
            let y = tape.conv2d(v[0], v[1], v[2], 1, 0)?;
            let r = tape.relu(y);
            let p = tape.max_pool2d(r, 2, 2)?;
            let f = tape.flatten(p)?;
            let logits = tape.dense(f, v[3], v[4])?;
            tape.softmax_cross_entropy(logits, &[4, 1])
        };
        let err = numeric_grad_check_many(graph, &[x, k, b, w, wb], 1e-4).unwrap();
        assert!(err < 1e-4, "point {point}: {err}");
    }
}

#[test]
fn per_op_gradients_at_ten_points() {
    let eps = 1e-4;
    for point in 0..10u64 {
        let seed = 1_000 + point;
        // conv2d w.r.t. input, kernel, bias (stride 2, padding 1)
        let err = numeric_grad_check_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                let w = t.constant(random(t.value(y).shape(), 7));
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &[random(&[2, 3, 5, 5], seed), random(&[2, 3, 3, 3], seed + 50), random(&[2], seed + 60)],
            eps,
        )
        .unwrap();
        assert!(err < 1e-4, "conv {err}");

        // relu away from zero
        let x = away_from_kinks(&[3, 4], seed, |t| t.data().iter().all(|v| v.abs() > 2.0 * eps));
        let err = numeric_grad_check(
            |t, v| {
                let r = t.relu(v);
                let w = t.constant(random(&[3, 4], 8));
                let p = t.mul(r, w)?;
                Ok(t.sum(p))
            },
            &x,
            eps,
        )
        .unwrap();
        assert!(err < 1e-4, "relu {err}");

        // max pool with distinct window maxima
        let x = away_from_kinks(&[1, 2, 4, 4], seed, |t| {
            (0..2).all(|c| {
                    (0..2).all(|i| {
                        (0..2).all(|j| {
                            let mut vals: Vec<f64> = (0..4)
                                .map(|q| t.at(&[0, c, 2 * i + q / 2, 2 * j + q % 2]))
                                .collect();
                            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            vals[0] - vals[1] > 4.0 * eps
                        })
                    })
                })
        });
        let err = numeric_grad_check(
            |t, v| {
                let p = t.max_pool2d(v, 2, 2)?;
                let w = t.constant(random(&[1, 2, 2, 2], 9));
                let m = t.mul(p, w)?;
                Ok(t.sum(m))
            },
            &x,
            eps,
        )
        .unwrap();
        assert!(err < 1e-4, "pool {err}");

        // dense w.r.t. all inputs, then cross-entropy
        let err = numeric_grad_check_many(
            |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                t.softmax_cross_entropy(y, &[0, 2, 1])
            },
            &[random(&[3, 4], seed), random(&[3, 4], seed + 1), random(&[3], seed + 2)],
            eps,
        )
        .unwrap();
        assert!(err < 1e-4, "dense {err}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 3, 9, 9], 20));
        let k = tape.constant(random(&[4, 3, 3, 3], 21));
        let b = tape.constant(random(&[4], 22));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let p = tape.max_pool2d(y, 2, 2).unwrap();
        tape.value(p).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_pool_dense_match_loop_oracles(
        b in 1usize..=2, cin in 1usize..=4, cout in 1usize..=4,
        h in 3usize..=16, w in 3usize..=16, k in 1usize..=3,
        stride in 1usize..=2, pad in 0usize..=1, seed in 0u64..1000,
    ) {
        let x = random(&[b, cin, h, w], seed);
        let kern = random(&[cout, cin, k, k], seed + 1);
        let bias = random(&[cout], seed + 2);
        let got = conv(&x, &kern, &bias, stride, pad).unwrap();
        prop_assert!(got.max_abs_diff(&naive_conv(&x, &kern, &bias, stride, pad)) < 1e-12);

        let window = 2.min(h).min(w);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.max_pool2d(v, window, stride).unwrap();
        prop_assert_eq!(tape.value(p), &naive_pool(&x, window, stride));

        let flat = x.clone().reshape(vec![b, cin * h * w]).unwrap();
        let wt = random(&[cout, cin * h * w], seed + 3);
        let got = dense(&flat, &wt, &bias).unwrap();
        prop_assert!(got.max_abs_diff(&naive_dense(&flat, &wt, &bias)) < 1e-12);
    }
}

#[test]
fn uniform_sampler_range() {
    let mut r = rng::stream(1, "x");
    let t = Tensor::uniform([1000], -0.5, 0.5, &mut r);
    assert!(t.data().iter().all(|v| (-0.5..0.5).contains(v)));
}
