use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop grouped convolution oracle.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    k: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (ko, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cg = c / groups;
    let kg = ko / groups;
    let mut out = vec![0.0; n * ko * oh * ow];
    for b in 0..n {
        for o in 0..ko {
            let grp = o / kg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cg {
                        let ch = grp * cg + ci;
                        for a in 0..kh {
                            for e in 0..kw {
                                let ih = (i * stride + a) as isize - pad as isize;
                                let iw = (j * stride + e) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ch) * h + ih as usize) * w + iw as usize];
                                s += xv * k[((o * cg + ci) * kh + a) * kw + e];
                            }
                        }
                    }
                    out[((b * ko + o) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_of_ones_sums_to_nine() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, None, 1, 0, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn unit_pointwise_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let xt = random(&[2, 1, 4, 5], &mut rng);
    let x = g.constant(xt.clone());
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(x, k, None, 1, 0, 1).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let xt = random(&[1, 2, 5, 5], &mut rng);
        let kt = random(&[3, 2, 3, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.constant(xt.clone());
        let k = g.constant(kt.clone());
        let y = g.conv2d(x, k, None, stride, pad, 1).unwrap();
        let oracle = naive_conv(xt.data(), kt.data(), (1, 2, 5, 5), (3, 3, 3), stride, pad, 1);
        assert!(max_abs_diff(g.value(y).data(), &oracle) <= 1e-12);
    }
    // largest shape named in the contract
    let xt = random(&[2, 4, 8, 8], &mut rng);
    let kt = random(&[5, 4, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt.clone());
    let k = g.constant(kt.clone());
    let y = g.conv2d(x, k, None, 1, 1, 1).unwrap();
    let oracle = naive_conv(xt.data(), kt.data(), (2, 4, 8, 8), (5, 3, 3), 1, 1, 1);
    assert!(max_abs_diff(g.value(y).data(), &oracle) <= 1e-12);
}

#[test]
fn depthwise_matches_per_channel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(stride, pad) in &[(1, 1), (2, 1)] {
        let xt = random(&[2, 4, 8, 8], &mut rng);
        let kt = random(&[4, 1, 3, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.constant(xt.clone());
        let k = g.constant(kt.clone());
        let y = g.depthwise_conv2d(x, k, stride, pad).unwrap();
        let oracle = naive_conv(xt.data(), kt.data(), (2, 4, 8, 8), (4, 3, 3), stride, pad, 4);
        assert!(max_abs_diff(g.value(y).data(), &oracle) <= 1e-12);
    }
}

#[test]
fn depthwise_single_channel_equals_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = random(&[1, 1, 6, 6], &mut rng);
    let kt = random(&[1, 1, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt);
    let k = g.constant(kt);
    let a = g.depthwise_conv2d(x, k, 1, 1).unwrap();
    let b = g.conv2d(x, k, None, 1, 1, 1).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = random(&[2, 3, 5, 5], &mut rng);
    let kt = Tensor::from_fn(&[3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt.clone());
    let k = g.constant(kt);
    let y = g.depthwise_conv2d(x, k, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, k, None, 1, 0, 1).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
    let big = g.constant(Tensor::zeros(&[1, 2, 7, 3]));
    let err = g.conv2d(x, big, None, 1, 0, 1).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
    let dk = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let err = g.depthwise_conv2d(x, dk, 1, 1).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
}

#[test]
fn linear_identity_zero_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = random(&[3, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt.clone());
    let eye = g.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zb = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(g.value(y).data(), xt.data());

    let zw = g.constant(Tensor::zeros(&[5, 4]));
    let bias = Tensor::from_fn(&[5], |i| i as f64);
    let b = g.constant(bias.clone());
    let y = g.linear(x, zw, Some(b)).unwrap();
    for row in g.value(y).rows() {
        assert_eq!(row, bias.data());
    }

    let wt = random(&[5, 4], &mut rng);
    let w = g.constant(wt.clone());
    let y = g.linear(x, w, Some(b)).unwrap();
    let mut oracle = vec![0.0; 15];
    for i in 0..3 {
        for o in 0..5 {
            let mut s = bias.data()[o];
            for f in 0..4 {
                s += xt.data()[i * 4 + f] * wt.data()[o * 4 + f];
            }
            oracle[i * 5 + o] = s;
        }
    }
    assert!(max_abs_diff(g.value(y).data(), &oracle) <= 1e-12);

    let bad = g.constant(Tensor::zeros(&[5, 3]));
    assert!(g.linear(x, bad, None).is_err());
}

#[test]
fn batchnorm_normalizes_and_guards_zero_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.random_range(-10.0..12.0));
    let mut g = Graph::<f64>::new();
    let x = g.constant(xt);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.batch_norm_batch(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(stats.count, 100);
    let yd = g.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| yd[(n * 3 + ch) * 25..][..25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    let constant = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i / 4 % 3) as f64 + 0.5));
    let (y, _) = g.batch_norm_batch(constant, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9 && v.is_finite()));
}

#[test]
fn batchnorm_needs_two_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    assert!(g.batch_norm_batch(x, gamma, beta, 1e-5).is_err());
}

#[test]
fn batchnorm_running_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xt = random(&[2, 2, 3, 3], &mut rng);
    let run = |xt: &Tensor<f64>| {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(xt.clone());
        let gamma = g.constant(Tensor::new(&[2], vec![1.5, 0.5]).unwrap());
        let beta = g.constant(Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
        let y = g.batch_norm_running(x, gamma, beta, &[0.2, -0.1], &[2.0, 0.5], 1e-5).unwrap();
        g.value(y).clone()
    };
    assert!(run(&xt).bit_eq(&run(&xt)));
}

#[test]
fn backward_examples() {
    // loss = sum(w * x) through linear: grad(w) = x
    let mut g = Graph::<f64>::new();
    let xt = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let x = g.constant(xt.clone());
    let w = g.param(Tensor::new(&[1, 3], vec![0.3, 0.2, 0.1]).unwrap());
    let y = g.linear(x, w, None).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), xt.data());

    // loss = ||h||^2 for a single row: grad = 2h
    let mut g = Graph::<f64>::new();
    let h = g.param(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
    let loss = g.mean_squared_norm(h).unwrap();
    assert_eq!(g.value(loss).item(), 25.0);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(h).unwrap(), &[6.0, 8.0]);
}

#[test]
fn backward_twice_accumulates_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&[2, 3, 4, 4], &mut rng));
    let k = g.param(random(&[2, 3, 3, 3], &mut rng));
    let y = g.conv2d(x, k, None, 1, 1, 1).unwrap();
    let y = g.tanh(y);
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let once: Vec<f64> = g.grad(k).unwrap().to_vec();
    g.backward(loss).unwrap();
    let twice = g.grad(k).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    let err = g.backward(x).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn grl_is_identity_forward_and_flips_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ht = random(&[3, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let h = g.param(ht.clone());
    let r = g.grl(h, 1.0);
    assert!(g.value(r).bit_eq(&ht));
    let loss = g.sum(r);
    g.backward(loss).unwrap();
    assert!(g.grad(h).unwrap().iter().all(|&v| v == -1.0));

    let mut g = Graph::<f64>::new();
    let h = g.param(ht);
    let r = g.grl(h, 0.0);
    let loss = g.sum(r);
    g.backward(loss).unwrap();
    assert!(g.grad(h).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_is_stable_for_extreme_logits() {
    let mut g = Graph::<f64>::new();
    let logits = g.param(Tensor::new(&[1, 2], vec![800.0, -800.0]).unwrap());
    let loss = g.cross_entropy(logits, &[0]).unwrap();
    assert!(g.value(loss).item().is_finite());
    let probs: Vec<f64> = softmax_rows(&[800.0, -800.0], 2);
    assert_eq!(probs[0], 1.0);
    assert!(probs.iter().all(|p: &f64| p.is_finite()));
    g.backward(loss).unwrap();
    assert!(g.grad(logits).unwrap().iter().all(|v| v.is_finite()));
    assert!(g.cross_entropy(logits, &[2]).is_err());
}

#[test]
fn global_average_of_constant_planes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i / 16) as f64 * 0.25));
    let p = g.global_avg_pool(x).unwrap();
    let expected: Vec<f64> = (0..6).map(|i| i as f64 * 0.25).collect();
    assert_eq!(g.value(p).data(), expected.as_slice());
}

#[test]
fn no_grad_graph_tracks_nothing() {
    let mut g = Graph::<f64>::no_grad();
    let x = g.param(Tensor::full(&[1, 2], 1.0));
    let s = g.sum(x);
    assert!(!g.requires_grad(s));
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
}
