use facerel::diff::{Tape, Tensor};
use facerel::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct cross-correlation, one output value at a time.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, h, wd, cin) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (kh, kw, cout) = (w.dim(0), w.dim(1), w.dim(3));
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * cout];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((b * h + iy as usize) * wd + ix as usize) * cin + ci];
                                acc += xv * w.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((b * ho + oy) * wo + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, ho, wo, cout], out).unwrap()
}

fn conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv2d(a, b, None, stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn pointwise_identity_kernel_copies_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[2, 4, 5, 3]);
    let w = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(conv(&x, &w, 1, 0), x);
}

#[test]
fn ones_kernel_sums_the_window() {
    let x = Tensor::full(&[1, 5, 5, 1], 1.0);
    let w = Tensor::full(&[3, 3, 1, 1], 1.0);
    let y = conv(&x, &w, 1, 0);
    assert_eq!(y.shape(), &[1, 3, 3, 1]);
    assert!(y.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // (input shape, kernel shape, stride, pad): small and wide channel counts,
    // several row bands, strided, pointwise, rectangular
    let cases: [([usize; 4], [usize; 4], usize, usize); 7] = [
        ([1, 6, 6, 2], [3, 3, 2, 3], 1, 0),
        ([2, 7, 5, 8], [3, 3, 8, 5], 1, 1),
        ([1, 70, 30, 16], [3, 3, 16, 4], 1, 1),
        ([1, 40, 40, 3], [3, 3, 3, 2], 1, 1),
        ([2, 9, 8, 3], [3, 3, 3, 4], 2, 1),
        ([2, 4, 4, 5], [1, 1, 5, 3], 1, 0),
        ([1, 6, 9, 10], [2, 3, 10, 2], 1, 2),
    ];
    for (xs, ws, stride, pad) in cases {
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &ws);
        let got = conv(&x, &w, stride, pad);
        let want = conv_oracle(&x, &w, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-10, "{xs:?} {ws:?}");
    }
}

#[test]
fn conv_shape_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 4, 4, 2]));
    let wrong_cin = t.constant(Tensor::zeros(&[3, 3, 3, 1]));
    assert!(matches!(t.conv2d(x, wrong_cin, None, 1, 1), Err(Error::Dimension(_))));
    let too_big = t.constant(Tensor::zeros(&[7, 7, 2, 1]));
    assert!(matches!(t.conv2d(x, too_big, None, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn batchnorm_identity_in_eval_and_standardizes_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 4, 4, 2]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.batchnorm_eval(xv, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
    assert!(t.value(y).max_abs_diff(&x) < 1e-5);

    let (y, _, _) = t.batchnorm_train(xv, g, b, 1e-5).unwrap();
    let data = t.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = data.iter().skip(ch).step_by(2).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        // eps pulls the variance just below one
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
}

#[test]
fn single_element_channels_stay_finite() {
    let mut t = Tape::new();
    let x = t.input(Tensor::full(&[1, 1, 1, 3], 2.0));
    let g = t.input(Tensor::full(&[3], 1.0));
    let b = t.input(Tensor::zeros(&[3]));
    let (y, _, _) = t.batchnorm_train(x, g, b, 1e-5).unwrap();
    assert!(t.value(y).is_finite());
    let s = t.sum(y);
    let grads = t.backward(s).unwrap();
    assert!(grads.wrt(x).unwrap().is_finite());
}

#[test]
fn elementwise_and_shape_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[1]));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).item(), 0.5);

    let x = random(&mut rng, &[2, 3, 3, 5]);
    let xv = t.constant(x.clone());
    let parts = t.split(xv, &[2, 3]).unwrap();
    let back = t.concat(&parts).unwrap();
    assert_eq!(t.value(back), &x);
    assert!(matches!(t.split(xv, &[2, 2]), Err(Error::Dimension(_))));

    let c = t.constant(Tensor::full(&[1, 3, 4, 2], 0.7));
    let r = t.resize_bilinear(c, 9, 5).unwrap();
    assert_eq!(t.value(r).shape(), &[1, 9, 5, 2]);
    assert!(t.value(r).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
    assert!(matches!(t.mul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 4]);

    let mut t = Tape::new();
    let v = t.input(x.clone());
    let s = t.sum(v);
    let g = t.backward(s).unwrap();
    assert!(g.wrt(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut t = Tape::new();
    let v = t.input(x.clone());
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    for (d, xi) in g.wrt(v).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*d, 2.0 * xi);
    }

    // both uses of x contribute
    let mut t = Tape::new();
    let v = t.input(x.clone());
    let y = t.add(v, v).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(g.wrt(v).unwrap().data().iter().all(|&d| d == 2.0));
}

#[test]
fn non_scalar_loss_is_a_usage_error() {
    let mut t = Tape::new();
    let v = t.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.backward(v), Err(Error::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let a = t.input(Tensor::full(&[2], 3.0));
    let c = t.constant(Tensor::full(&[2], 4.0));
    let p = t.mul(a, c).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[4.0, 4.0]);
    assert!(g.wrt(c).is_none());
}

#[test]
fn relu_gates_replay_the_recorded_pattern() {
    let x = Tensor::new(&[4], vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
    let mut t = Tape::new();
    t.record_relu_gates();
    let v = t.constant(x.clone());
    t.relu(v);
    let gates = t.take_relu_gates();
    assert_eq!(gates, vec![vec![false, true, false, true]]);

    let mut t = Tape::new();
    t.replay_relu_gates(gates);
    let v = t.constant(Tensor::new(&[4], vec![5.0, -6.0, 7.0, 8.0]).unwrap());
    let y = t.relu(v);
    assert_eq!(t.value(y).data(), &[0.0, -6.0, 0.0, 8.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_and_backward_are_bit_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let x = t.input(random(&mut rng, &[2, 6, 6, 8]));
            let w = t.input(random(&mut rng, &[3, 3, 8, 4]));
            let y = t.conv2d(x, w, None, 1, 1).unwrap();
            let y = t.sigmoid(y);
            let p = t.avg_pool2(y).unwrap();
            let s = t.sum(p);
            let value = t.value(s).item();
            let g = t.backward(s).unwrap();
            (value, g.wrt(x).unwrap().clone(), g.wrt(w).unwrap().clone())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(a.2, b.2);
    }

    #[test]
    fn ops_stay_finite_on_their_domains(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.input(Tensor::from_fn(&[2, 4, 4, 3], |_| rng.random_range(-50.0..50.0)));
        let s = t.sigmoid(x);
        let l = t.ln(s);
        let z = t.constant(Tensor::zeros(&[2, 3, 8]));
        let n = t.l2_normalize(z, 1e-8).unwrap();
        let q = t.sqrt(z, 1e-8);
        let total = t.sum(l);
        prop_assert!(t.value(n).is_finite() && t.value(q).is_finite() && t.value(total).is_finite());
        let g = t.backward(total).unwrap();
        prop_assert!(g.wrt(x).unwrap().is_finite());
    }
}
