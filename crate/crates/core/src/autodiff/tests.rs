use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::c(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

fn naive_matmul(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (m, p, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for k in 0..p {
                out[i * n + j] += a.at2(i, k) * b.at2(k, j);
            }
        }
    }
    out
}

/// Same-padding strided cross-correlation by direct summation.
fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize) -> Tensor<f32> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + stride - 1) / stride;
    let wo = (wd + stride - 1) / stride;
    let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
    let pad_w = ((wo - 1) * stride + kw).saturating_sub(wd);
    let (top, left) = ((pad_h / 2) as isize, (pad_w / 2) as isize);
    let mut out = vec![0.0f32; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - top;
                            let ix = (ox * stride + kx) as isize - left;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = s;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

/// Dense softmax attention with -inf fill for forbidden keys.
fn dense_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &[bool]) -> Vec<f64> {
    let (s, d) = (q.shape()[0], q.shape()[1]);
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        let scores: Vec<f64> = (0..s)
            .map(|j| {
                if mask[i * s + j] {
                    (0..d).map(|c| q.at2(i, c) * k.at2(j, c)).sum::<f64>() / (d as f64).sqrt()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..s {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v.at2(j, c);
            }
        }
    }
    out
}

/// Builds `sum(w ⊙ f(params))` so every output element carries a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, x: Var, rng: &mut impl Rng) -> Var {
    let w = g.constant(rand_tensor(g.shape(x), rng));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

/// Finite-difference check of a closure building a scalar from parameters.
fn fd_check(store: &ParamStore<f64>, build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss, store).unwrap();
    let probes: Vec<_> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let report = finite_diff_check(
        |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s);
            Ok(g.value(l).data()[0])
        },
        store,
        &grads,
        &probes,
        1e-6,
    )
    .unwrap();
    assert!(report.kinks.is_empty(), "unexpected kinks {:?}", report.kinks);
    report.max_rel_err
}

#[test]
fn matmul_identity_and_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = rand_tensor::<f32>(&[3, 2], &mut rng);
    let mut g = Graph::new();
    let (ia, ib) = (g.constant(Tensor::eye(3)), g.constant(b.clone()));
    let c = g.matmul(ia, ib).unwrap();
    assert_eq!(g.value(c), &b);

    let a = g.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let b = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor::<f32>(&[4, 5], &mut rng);
    let b = rand_tensor::<f32>(&[5, 3], &mut rng);
    let got = a.matmul(&b).unwrap();
    for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

proptest! {
    #[test]
    fn matmul_oracle_random_shapes(m in 1usize..9, p in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor::<f32>(&[m, p], &mut rng);
        let b = rand_tensor::<f32>(&[p, n], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 4], 3.5));
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::full(&[2], 5.0));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 6.0).abs() < 1e-9 && (v[1] - 4.0).abs() < 1e-9);

    let bad = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.layer_norm(x, bad, bias, 1e-5), Err(Error::Dimension(_))));
    assert!(matches!(g.layer_norm(x, gain, bias, 0.0), Err(Error::Contract(_))));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.insert("x", rand_tensor(&[2, 4], &mut rng), false);
    let gn = store.insert("g", rand_tensor(&[4], &mut rng), false);
    let bs = store.insert("b", rand_tensor(&[4], &mut rng), false);
    let weights = rand_tensor::<f64>(&[2, 4], &mut rng);
    let err = fd_check(&store, |g, s| {
        let (xv, gv, bv) = (g.param(s, x), g.param(s, gn), g.param(s, bs));
        let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn sum_of_layer_norm_has_zero_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.insert("x", rand_tensor::<f64>(&[1, 6], &mut rng), false);
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let gain = g.constant(Tensor::full(&[6], 1.0));
    let bias = g.constant(Tensor::zeros(&[6]));
    let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l, &store).unwrap();
    assert!(grads.get(x).sum().abs() < 1e-12);
}

#[test]
fn backward_of_product() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::scalar(3.0f64), false);
    let y = store.insert("y", Tensor::scalar(2.0f64), false);
    let unused = store.insert("unused", Tensor::full(&[3], 1.0), false);
    let mut g = Graph::new();
    let (xv, yv) = (g.param(&store, x), g.param(&store, y));
    let p = g.mul(xv, yv).unwrap();
    let grads = g.backward(p, &store).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0]);
    assert_eq!(grads.get(y).data(), &[3.0]);
    assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(v, &store), Err(Error::Contract(_))));
}

#[test]
fn attention_one_hot_and_symmetric_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (q, k, v) = (
        rand_tensor::<f64>(&[3, 4], &mut rng),
        rand_tensor::<f64>(&[3, 4], &mut rng),
        rand_tensor::<f64>(&[3, 4], &mut rng),
    );
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k.clone()), g.constant(v.clone()));
    // query 0 sees only key 2
    let mut mask = vec![true; 9];
    mask[0] = false;
    mask[1] = false;
    let out = masked_attention(&mut g, qv, kv, vv, &mask).unwrap();
    assert_eq!(g.value(out).row(0), v.row(2));

    // identical keys give identical scores
    let kk = Tensor::new(&[2, 4], [k.row(0), k.row(0)].concat()).unwrap();
    let v2 = Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0]).unwrap();
    let q2 = g.constant(Tensor::new(&[2, 4], [k.row(1), k.row(2)].concat()).unwrap());
    let (k2, vv2) = (g.constant(kk), g.constant(v2));
    let out = masked_attention(&mut g, q2, k2, vv2, &[true; 4]).unwrap();
    for (a, b) in g.value(out).row(0).iter().zip([2.0, 2.0, 2.0, 2.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (q, k, v) = (
        rand_tensor::<f64>(&[6, 4], &mut rng),
        rand_tensor::<f64>(&[6, 4], &mut rng),
        rand_tensor::<f64>(&[6, 4], &mut rng),
    );
    let mut mask: Vec<bool> = (0..36).map(|_| rng.gen_bool(0.6)).collect();
    for i in 0..6 {
        mask[i * 6 + i] = true;
    }
    let expected = dense_attention(&q, &k, &v, &mask);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let out = masked_attention(&mut g, qv, kv, vv, &mask).unwrap();
    for (a, b) in g.value(out).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn attention_rejects_empty_row() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    let mask = [true, true, false, false];
    assert!(matches!(
        masked_attention(&mut g, x, x, x, &mask),
        Err(Error::DegenerateQuery { row: 1 })
    ));
}

#[test]
fn forbidden_value_rows_do_not_leak() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (q, k, mut v) = (
        rand_tensor::<f32>(&[5, 4], &mut rng),
        rand_tensor::<f32>(&[5, 4], &mut rng),
        rand_tensor::<f32>(&[5, 4], &mut rng),
    );
    let mask: Vec<bool> = (0..25).map(|e| (e % 5) <= (e / 5)).collect();
    let run = |v: &Tensor<f32>| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = masked_attention(&mut g, qv, kv, vv, &mask).unwrap();
        g.value(out).clone()
    };
    let before = run(&v);
    for x in &mut v.data_mut()[16..20] {
        *x += 1e3;
    }
    let after = run(&v);
    assert_eq!(before.data()[..16], after.data()[..16]);
    assert_ne!(before.data()[16..], after.data()[16..]);
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let q = store.insert("q", rand_tensor(&[5, 6], &mut rng), false);
    let k = store.insert("k", rand_tensor(&[5, 6], &mut rng), false);
    let v = store.insert("v", rand_tensor(&[5, 6], &mut rng), false);
    let keys = Arc::new(KeyLists::new(vec![vec![0], vec![0, 1], vec![2], vec![0, 2, 3], vec![1, 3, 4]]).unwrap());
    let weights = rand_tensor::<f64>(&[5, 6], &mut rng);
    let err = fd_check(&store, |g, s| {
        let (qv, kv, vv) = (g.param(s, q), g.param(s, k), g.param(s, v));
        let o = g.attention(qv, kv, vv, keys.clone(), 2).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(o, w).unwrap();
        g.sum(p)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn conv_identity_and_stride_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor::<f32>(&[3, 5, 7], &mut rng);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv2d(xv, wv, 1).unwrap();
    assert_eq!(g.value(y), &x);

    let big = g.constant(Tensor::zeros(&[3, 24, 24]));
    let k = g.constant(Tensor::zeros(&[8, 3, 3, 3]));
    let y = g.conv2d(big, k, 2).unwrap();
    assert_eq!(g.shape(y), &[8, 12, 12]);

    let empty = g.constant(Tensor::zeros(&[8, 3, 0, 3]));
    assert!(matches!(g.conv2d(big, empty, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor::<f32>(&[3, 8, 8], &mut rng);
    for (stride, kernel) in [(1, 3), (2, 3), (2, 4), (3, 2)] {
        let w = rand_tensor::<f32>(&[5, 3, kernel, kernel], &mut rng);
        let expected = naive_conv(&x, &w, stride);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w));
        let y = g.conv2d(xv, wv, stride).unwrap();
        assert_eq!(g.shape(y), expected.shape());
        assert!(g.value(y).max_abs_diff(&expected) < 1e-6);
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let x = store.insert("x", rand_tensor(&[2, 5, 6], &mut rng), false);
    let w = store.insert("w", rand_tensor(&[3, 2, 3, 3], &mut rng), false);
    let b = store.insert("b", rand_tensor(&[3], &mut rng), false);
    let err = fd_check(&store, |g, s| {
        let (xv, wv, bv) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.conv2d(xv, wv, 2).unwrap();
        let y = g.add_channel_bias(y, bv).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        weighted_sum(g, y, &mut r)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn film_and_elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = store.insert("x", rand_tensor(&[3, 2, 2], &mut rng), false);
    let gm = store.insert("gamma", rand_tensor(&[1, 3], &mut rng), false);
    let bt = store.insert("beta", rand_tensor(&[1, 3], &mut rng), false);
    let wp = store.insert("proj", rand_tensor(&[3, 5], &mut rng), false);
    let bias = store.insert("bias", rand_tensor(&[5], &mut rng), false);
    let err = fd_check(&store, |g, s| {
        let (xv, gv, bv) = (g.param(s, x), g.param(s, gm), g.param(s, bt));
        let y = g.film(xv, gv, bv).unwrap();
        let y = g.gelu(y);
        let y = g.reshape(y, &[3, 4]).unwrap();
        let y = g.transpose(y).unwrap();
        let p = g.param(s, wp);
        let y = g.matmul(y, p).unwrap();
        let bb = g.param(s, bias);
        let y = g.add_bias(y, bb).unwrap();
        let a = g.gather_rows(y, &[3, 0, 0]).unwrap();
        let a = g.scatter_rows(a, &[1, 4, 2], 6).unwrap();
        let c = g.concat_rows(&[y, a]).unwrap();
        let c = g.scale(c, 0.5);
        let mut r = ChaCha8Rng::seed_from_u64(98);
        weighted_sum(g, c, &mut r)
    });
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn film_arithmetic() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 1, 1], 2.0));
    let gamma = g.constant(Tensor::full(&[2], 0.5));
    let beta = g.constant(Tensor::full(&[2], 0.25));
    let y = g.film(x, gamma, beta).unwrap();
    assert_eq!(g.value(y).data(), &[3.25, 3.25]);
    let gamma = g.constant(Tensor::full(&[2], -1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let y = g.film(x, gamma, beta).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let short = g.constant(Tensor::zeros(&[3]));
    assert!(g.film(x, short, beta).is_err());
}

#[test]
fn masked_losses() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
    let t = Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap();
    let l1 = g.masked_l1(p, t.clone(), vec![true, true]).unwrap();
    assert_eq!(g.value(l1).data(), &[1.0]);
    let p = g.constant(Tensor::scalar(2.0));
    let mse = g.masked_mse(p, Tensor::scalar(0.0), vec![true]).unwrap();
    assert_eq!(g.value(mse).data(), &[4.0]);
}

#[test]
fn linear_objective_is_exact_under_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let x = store.insert("x", rand_tensor(&[7], &mut rng), false);
    let c = rand_tensor::<f64>(&[7], &mut rng);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.param(s, x);
        let cv = g.constant(c.clone());
        let p = g.mul(xv, cv).unwrap();
        g.sum(p)
    };
    let err = fd_check(&store, build);
    assert!(err < 1e-9, "rel err {err}");
}

#[test]
fn l1_kink_is_reported_not_scored() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::new(&[3], vec![0.5, 0.0, -0.3]).unwrap(), false);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.param(s, x);
        g.masked_l1(xv, Tensor::zeros(&[3]), vec![true; 3]).unwrap()
    };
    let mut g = Graph::new();
    let l = build(&mut g, &store);
    let grads = g.backward(l, &store).unwrap();
    assert_eq!(grads.get(x).data()[1], 0.0);
    let probes = [(x, 0), (x, 1), (x, 2)];
    let report = finite_diff_check(
        |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s);
            Ok(g.value(l).data()[0])
        },
        &store,
        &grads,
        &probes,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.kinks.len(), 1);
    assert_eq!(report.kinks[0].index, 1);
    assert!(report.max_rel_err < 1e-8);
}

#[test]
fn non_finite_objective_is_an_evaluation_error() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::scalar(1.0f64), false);
    let grads = Gradients::zeros(&store);
    let r = finite_diff_check(|_| Ok(f64::NAN), &store, &grads, &[(x, 0)], 1e-6);
    assert!(matches!(r, Err(Error::Evaluation(_))));
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor::<f32>(&[3, 9, 9], &mut rng);
    let w = rand_tensor::<f32>(&[4, 3, 3, 3], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, 2).unwrap();
        let y = g.gelu(y);
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}
