use fbseg::autograd::{BnStats, Tape, Var};
use fbseg::gradcheck::check_inputs;
use fbseg::tensor::{Shape, Tensor};
use fbseg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct summation over output pixel, output channel, input channel and
/// kernel taps.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (i * stride + ky) as isize - pad as isize;
                                let xx = (j * stride + kx) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    s += x.at(b, ci, y as usize, xx as usize) * w.at(o, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(b, o, i, j, s);
                }
            }
        }
    }
    out
}

fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape();
    let co = w.shape()[1];
    let mut out = Tensor::zeros([n, co, 2 * h, 2 * wd]);
    for b in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    for o in 0..co {
                        for a in 0..2 {
                            for e in 0..2 {
                                let prev = out.at(b, o, 2 * i + a, 2 * j + e);
                                out.set(b, o, 2 * i + a, 2 * j + e, prev + x.at(b, ci, i, j) * w.at(ci, o, a, e));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn eval(f: impl FnOnce(&mut Tape<f64>) -> fbseg::Result<Var>) -> fbseg::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v)?.clone())
}

#[test]
fn matmul_hand_computed() {
    let out = eval(|t| {
        let a = t.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])?);
        let b = t.constant(Tensor::from_f64([1, 1, 2, 2], &[5.0, 6.0, 7.0, 8.0])?);
        t.matmul(a, b)
    })
    .unwrap();
    assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_identity() {
    let x = random([1, 1, 2, 2], 1);
    let out = eval(|t| {
        let i = t.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0])?);
        let xv = t.constant(x.clone());
        t.matmul(i, xv)
    })
    .unwrap();
    assert_eq!(out, x);
}

#[test]
fn matmul_dimension_error_names_shapes() {
    let err = eval(|t| {
        let a = t.constant(Tensor::zeros([1, 1, 3, 5]));
        let b = t.constant(Tensor::zeros([1, 1, 4, 2]));
        t.matmul(a, b)
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("3x5") && msg.contains("4x2"), "{msg}");
}

#[test]
fn softmax_examples() {
    let out = eval(|t| {
        let x = t.constant(Tensor::from_f64(
            [1, 1, 3, 2],
            &[0.7, 0.7, 0.0, 2f64.ln(), 1000.0, 1000.0],
        )?);
        t.softmax_rows(x)
    })
    .unwrap();
    let d = out.data();
    assert_eq!(&d[0..2], &[0.5, 0.5]);
    assert!((d[2] - 1.0 / 3.0).abs() < 1e-15 && (d[3] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(&d[4..6], &[0.5, 0.5]);
}

#[test]
fn conv_identity_kernel() {
    let x = random([2, 3, 5, 5], 2);
    let mut delta = Tensor::zeros([3, 3, 1, 1]);
    for c in 0..3 {
        delta.set(c, c, 0, 0, 1.0);
    }
    let out = eval(|t| {
        let xv = t.constant(x.clone());
        let w = t.constant(delta.clone());
        t.conv2d(xv, w, 1, 0)
    })
    .unwrap();
    assert_eq!(out, x);
}

#[test]
fn conv_ones_kernel_on_one_hot() {
    let mut x = Tensor::zeros([1, 1, 5, 5]);
    x.set(0, 0, 2, 2, 1.0);
    let out = eval(|t| {
        let xv = t.constant(x.clone());
        let w = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
        t.conv2d(xv, w, 1, 1)
    })
    .unwrap();
    let expected = conv_oracle(&x, &Tensor::full([1, 1, 3, 3], 1.0), 1, 1);
    assert_eq!(out, expected);
    for i in 0..5 {
        for j in 0..5 {
            let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
            assert_eq!(out.at(0, 0, i, j), if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn conv_channel_mismatch() {
    let err = eval(|t| {
        let x = t.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros([4, 3, 3, 3]));
        t.conv2d(x, w, 1, 1)
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn conv_non_integral_output() {
    let err = eval(|t| {
        let x = t.constant(Tensor::zeros([1, 1, 4, 4]));
        let w = t.constant(Tensor::zeros([1, 1, 3, 3]));
        t.conv2d(x, w, 2, 0)
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn conv_transpose_examples() {
    let one = eval(|t| {
        let x = t.constant(Tensor::from_f64([1, 1, 1, 1], &[2.5])?);
        let w = t.constant(Tensor::full([1, 1, 2, 2], 1.0));
        t.conv_transpose2d(x, w, 2)
    })
    .unwrap();
    assert_eq!(one.data(), &[2.5; 4]);
    let zero = eval(|t| {
        let x = t.constant(Tensor::zeros([1, 2, 16, 16]));
        let w = t.constant(random([2, 3, 2, 2], 3));
        t.conv_transpose2d(x, w, 2)
    })
    .unwrap();
    assert_eq!(zero.shape(), [1, 3, 32, 32]);
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let bad = eval(|t| {
        let x = t.constant(Tensor::zeros([1, 1, 2, 2]));
        let w = t.constant(Tensor::zeros([1, 1, 3, 3]));
        t.conv_transpose2d(x, w, 2)
    });
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn maxpool_examples() {
    let out = eval(|t| {
        let x = t.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])?);
        t.maxpool2d(x)
    })
    .unwrap();
    assert_eq!(out.data(), &[4.0]);
    let big = eval(|t| {
        let x = t.constant(Tensor::zeros([1, 1, 256, 256]));
        t.maxpool2d(x)
    })
    .unwrap();
    assert_eq!(big.shape(), [1, 1, 128, 128]);
    assert!(matches!(
        eval(|t| {
            let x = t.constant(Tensor::zeros([1, 1, 5, 4]));
            t.maxpool2d(x)
        }),
        Err(Error::Config(_))
    ));
}

#[test]
fn maxpool_tie_break_routes_to_first() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full([1, 2, 4, 4], 3.0f64), true);
    let p = tape.maxpool2d(x).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    let gx = g.get(x).unwrap();
    for c in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i % 2 == 0 && j % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(gx.at(0, c, i, j), expect);
            }
        }
    }
}

fn bn_train(x: Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    eval(|t| {
        let xv = t.constant(x);
        let g = t.constant(Tensor::full([1, c, 1, 1], gamma));
        let b = t.constant(Tensor::full([1, c, 1, 1], beta));
        Ok(t.batch_norm(xv, g, b, BnStats::Batch)?.0)
    })
    .unwrap()
}

#[test]
fn batchnorm_examples() {
    let constant = bn_train(Tensor::full([2, 1, 3, 3], 4.2), 1.0, 0.0);
    assert!(constant.data().iter().all(|&v| v == 0.0));
    let annihilated = bn_train(random([2, 3, 4, 4], 5), 0.0, 1.5);
    assert!(annihilated.data().iter().all(|&v| v == 1.5));
    let two = bn_train(Tensor::from_f64([1, 1, 1, 2], &[-1.0, 1.0]).unwrap(), 1.0, 0.0);
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((two.data()[0] + expect).abs() < 1e-15 && (two.data()[1] - expect).abs() < 1e-15);
}

#[test]
fn batchnorm_running_stats_mode() {
    let x = Tensor::from_f64([1, 1, 1, 2], &[1.0, 3.0]).unwrap();
    let out = eval(|t| {
        let xv = t.constant(x);
        let g = t.constant(Tensor::full([1, 1, 1, 1], 2.0));
        let b = t.constant(Tensor::full([1, 1, 1, 1], 0.5));
        let (mean, var) = ([1.0], [4.0 - 1e-5]);
        Ok(t.batch_norm(xv, g, b, BnStats::Running { mean: &mean, var: &var })?.0)
    })
    .unwrap();
    assert!((out.data()[0] - 0.5).abs() < 1e-12);
    assert!((out.data()[1] - 2.5).abs() < 1e-12);
}

#[test]
fn scale_add_examples() {
    let x = random([1, 2, 3, 3], 6);
    let mut f = random([1, 2, 3, 3], 7);
    f.data_mut()[0] = -0.0;
    let zero = eval(|t| {
        let s = t.constant(Tensor::scalar(0.0));
        let (xv, fv) = (t.constant(x.clone()), t.constant(f.clone()));
        t.scale_add(s, xv, fv)
    })
    .unwrap();
    assert!(zero.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let ident = eval(|t| {
        let s = t.constant(Tensor::scalar(1.0));
        let (xv, fv) = (t.constant(x.clone()), t.constant(Tensor::zeros([1, 2, 3, 3])));
        t.scale_add(s, xv, fv)
    })
    .unwrap();
    assert_eq!(ident, x);
    let mismatch = eval(|t| {
        let s = t.constant(Tensor::scalar(1.0));
        let (xv, fv) = (t.constant(x.clone()), t.constant(Tensor::zeros([1, 2, 3, 4])));
        t.scale_add(s, xv, fv)
    });
    assert!(matches!(mismatch, Err(Error::Dimension(_))));
}

#[test]
fn scale_add_scalar_gradient() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::scalar(0.0f64), true);
    let x = tape.constant(Tensor::from_f64([1, 1, 1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let f = tape.constant(Tensor::zeros([1, 1, 1, 3]));
    let y = tape.scale_add(s, x, f).unwrap();
    let w = tape.constant(Tensor::from_f64([1, 1, 1, 3], &[0.5, -1.0, 2.0]).unwrap());
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let g = tape.backward(loss).unwrap();
    // sum(grad_out ⊙ x) = 0.5 - 2 + 6
    assert_eq!(g.get(s).unwrap().data()[0], 4.5);
}

#[test]
fn concat_shape() {
    let out = eval(|t| {
        let a = t.constant(Tensor::zeros([2, 4, 3, 3]));
        let b = t.constant(Tensor::zeros([2, 6, 3, 3]));
        t.concat_channels(a, b)
    })
    .unwrap();
    assert_eq!(out.shape(), [2, 10, 3, 3]);
}

#[test]
fn cross_entropy_examples() {
    let uniform = eval(|t| {
        let l = t.constant(Tensor::zeros([1, 4, 2, 2]));
        t.cross_entropy(l, &[0, 1, 2, 3])
    })
    .unwrap();
    assert!((uniform.data()[0] - 4f64.ln()).abs() < 1e-12);

    let labels = [2usize, 0, 3, 1];
    let mut logits = Tensor::zeros([1, 4, 2, 2]);
    for (p, &l) in labels.iter().enumerate() {
        logits.set(0, l, p / 2, p % 2, 20.0);
    }
    let saturated = eval(|t| {
        let l = t.constant(logits.clone());
        t.cross_entropy(l, &labels)
    })
    .unwrap();
    assert!(saturated.data()[0] < 1e-6);

    let v = [0.3, -1.2, 2.0, 0.5];
    let direct = {
        let z: f64 = v.iter().map(|x: &f64| x.exp()).sum();
        -(v[2].exp() / z).ln()
    };
    let computed = eval(|t| {
        let l = t.constant(Tensor::from_f64([1, 4, 1, 1], &v)?);
        t.cross_entropy(l, &[2])
    })
    .unwrap();
    assert!((computed.data()[0] - direct).abs() <= 1e-9);
}

#[test]
fn cross_entropy_label_out_of_range_reports_pixel() {
    let err = eval(|t| {
        let l = t.constant(Tensor::zeros([1, 4, 2, 3]));
        t.cross_entropy(l, &[0, 1, 2, 3, 4, 0])
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Data(_)));
    assert!(msg.contains("y=1") && msg.contains("x=1"), "{msg}");
}

#[test]
fn backward_usage_errors() {
    let mut other = Tape::<f64>::new();
    let foreign = other.leaf(Tensor::scalar(1.0), true);
    let mut tape = Tape::<f64>::new();
    assert!(matches!(tape.backward(foreign), Err(Error::Usage(_))));
    let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full([1, 1, 2, 2], 2.0f64), true);
    let d = tape.detach(x).unwrap();
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}

/// Weighted sum keeps gradients away from the trivial all-ones upstream.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> fbseg::Result<Var> {
    let w = t.constant(random(t.shape(y)?, seed));
    let p = t.mul(y, w)?;
    t.sum(p)
}

const GRAD_TOL: f64 = 1e-3;

#[test]
fn gradients_conv_transpose_pool_bn() {
    let x = random([2, 3, 4, 4], 11);
    let err = check_inputs(&[x.clone(), random([3, 2, 2, 2], 12)], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], 2)?;
        weighted_sum(t, y, 13)
    })
    .unwrap();
    assert!(err < GRAD_TOL, "conv_transpose {err}");

    let err = check_inputs(std::slice::from_ref(&x), |t, v| {
        let y = t.maxpool2d(v[0])?;
        weighted_sum(t, y, 14)
    })
    .unwrap();
    assert!(err < GRAD_TOL, "maxpool {err}");

    let err = check_inputs(
        &[x.clone(), random([1, 3, 1, 1], 15), random([1, 3, 1, 1], 16)],
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnStats::Batch)?;
            weighted_sum(t, y, 17)
        },
    )
    .unwrap();
    assert!(err < GRAD_TOL, "batch_norm {err}");

    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    let err = check_inputs(
        &[x, random([1, 3, 1, 1], 18), random([1, 3, 1, 1], 19)],
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnStats::Running { mean: &mean, var: &var })?;
            weighted_sum(t, y, 20)
        },
    )
    .unwrap();
    assert!(err < GRAD_TOL, "batch_norm eval {err}");
}

#[test]
fn gradients_attention_building_blocks() {
    let err = check_inputs(
        &[random([2, 1, 3, 4], 21), random([2, 1, 4, 5], 22)],
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let tr = t.transpose(m)?;
            let s = t.softmax_rows(tr)?;
            weighted_sum(t, s, 23)
        },
    )
    .unwrap();
    assert!(err < GRAD_TOL, "matmul/transpose/softmax {err}");

    let err = check_inputs(
        &[random([2, 3, 4, 4], 24), random([2, 3, 1, 1], 25), random([1, 1, 1, 1], 26)],
        |t, v| {
            let pooled = t.global_avg_pool(v[0])?;
            let gate = t.sigmoid(pooled)?;
            let g2 = t.mul(gate, v[1])?;
            let scaled = t.mul_channel(v[0], g2)?;
            let r = t.reshape(scaled, [2, 1, 3, 16])?;
            let back = t.reshape(r, [2, 3, 4, 4])?;
            let out = t.scale_add(v[2], back, v[0])?;
            weighted_sum(t, out, 27)
        },
    )
    .unwrap();
    assert!(err < GRAD_TOL, "gating {err}");

    let err = check_inputs(&[random([2, 4, 3, 3], 28), random([2, 2, 3, 3], 29)], |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        let r = t.relu(c)?;
        weighted_sum(t, r, 30)
    })
    .unwrap();
    assert!(err < GRAD_TOL, "concat/relu {err}");

    let labels: Vec<usize> = (0..18).map(|i| (i * 7) % 4).collect();
    let err = check_inputs(&[random([2, 4, 3, 3], 31)], |t, v| t.cross_entropy(v[0], &labels)).unwrap();
    assert!(err < GRAD_TOL, "cross_entropy {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn conv_matches_direct_summation(
        n in 1usize..=2, c in 1usize..=4, co in 1usize..=4, h in 3usize..=8, w in 3usize..=8,
        k3 in any::<bool>(), seed in any::<u64>(),
    ) {
        let k = if k3 { 3 } else { 1 };
        let x = random([n, c, h, w], seed);
        let kernel = random([co, c, k, k], seed ^ 1);
        for (stride, pad) in [(1, k / 2), (1, 0)] {
            let out = eval(|t| {
                let xv = t.constant(x.clone());
                let wv = t.constant(kernel.clone());
                t.conv2d(xv, wv, stride, pad)
            }).unwrap();
            let expect = conv_oracle(&x, &kernel, stride, pad);
            prop_assert!(out.max_abs_diff(&expect).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn conv_transpose_matches_scatter(
        n in 1usize..=2, c in 1usize..=4, co in 1usize..=4, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>(),
    ) {
        let x = random([n, c, h, w], seed);
        let kernel = random([c, co, 2, 2], seed ^ 2);
        let out = eval(|t| {
            let xv = t.constant(x.clone());
            let wv = t.constant(kernel.clone());
            t.conv_transpose2d(xv, wv, 2)
        }).unwrap();
        prop_assert!(out.max_abs_diff(&conv_transpose_oracle(&x, &kernel)).unwrap() <= 1e-12);
    }

    #[test]
    fn conv_gradients_match_central_differences(
        n in 1usize..=2, c in 1usize..=3, co in 1usize..=3, h in 3usize..=6, w in 3usize..=6,
        k3 in any::<bool>(), seed in any::<u64>(),
    ) {
        let k = if k3 { 3 } else { 1 };
        let err = check_inputs(&[random([n, c, h, w], seed), random([co, c, k, k], seed ^ 3)], |t, v| {
            let y = t.conv2d(v[0], v[1], 1, k / 2)?;
            weighted_sum(t, y, seed ^ 4)
        }).unwrap();
        prop_assert!(err < GRAD_TOL, "{}", err);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), width in 1usize..=64, scale in 1.0f64..1e3) {
        let x = random([1, 1, 3, width], seed).map(|v| v * scale);
        let out = eval(|t| { let xv = t.constant(x.clone()); t.softmax_rows(xv) }).unwrap();
        for row in out.data().chunks(width) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn maxpool_backward_one_nonzero_per_window(seed in any::<u64>(), h in 1usize..=4, w in 1usize..=4) {
        // quantized values make ties common
        let x = random([1, 2, 2 * h, 2 * w], seed).map(|v| (v * 2.0).round());
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let p = tape.maxpool2d(xv).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        let gx = g.get(xv).unwrap();
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let window = [(0, 0), (0, 1), (1, 0), (1, 1)];
                    let vals: Vec<f64> = window.iter().map(|&(a, b)| x.at(0, c, 2 * i + a, 2 * j + b)).collect();
                    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let first = vals.iter().position(|&v| v == max).unwrap();
                    for (q, &(a, b)) in window.iter().enumerate() {
                        let expect = if q == first { 1.0 } else { 0.0 };
                        prop_assert_eq!(gx.at(0, c, 2 * i + a, 2 * j + b), expect);
                    }
                }
            }
        }
    }
}

#[test]
fn transposed_matmul_matches_explicit_transpose() {
    // a stored 3×4 or 4×3, b stored 4×5 or 5×4; logical product is 3×5
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: Shape = if ta { [2, 1, 4, 3] } else { [2, 1, 3, 4] };
        let sb: Shape = if tb { [2, 1, 5, 4] } else { [2, 1, 4, 5] };
        let (a, b) = (random(sa, 40), random(sb, 41));
        let mut t = Tape::<f64>::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let fused = t.matmul_t(av, ta, bv, tb).unwrap();
        let ea = if ta { t.transpose(av).unwrap() } else { av };
        let eb = if tb { t.transpose(bv).unwrap() } else { bv };
        let explicit = t.matmul(ea, eb).unwrap();
        let d = t.value(fused).unwrap().max_abs_diff(t.value(explicit).unwrap()).unwrap();
        assert!(d < 1e-14, "ta={ta} tb={tb}: {d}");

        let err = check_inputs(&[random(sa, 42), random(sb, 43)], |t, v| {
            let m = t.matmul_t(v[0], ta, v[1], tb)?;
            weighted_sum(t, m, 44)
        })
        .unwrap();
        assert!(err < GRAD_TOL, "ta={ta} tb={tb}: {err}");
    }
}

#[test]
fn fused_attention_matches_composition() {
    let (n, cq, cv, p) = (2, 2, 3, 6);
    let inputs = [random([n, 1, cq, p], 50), random([n, 1, cq, p], 51), random([n, 1, cv, p], 52)];
    let run = |fused: bool| {
        let mut t = Tape::<f64>::new();
        let v: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let (agg, probs) = if fused {
            t.attention(v[0], v[1], v[2]).unwrap()
        } else {
            let qt = t.transpose(v[0]).unwrap();
            let s = t.matmul(qt, v[1]).unwrap();
            let a = t.softmax_rows(s).unwrap();
            let at = t.transpose(a).unwrap();
            (t.matmul(v[2], at).unwrap(), a)
        };
        let (agg_v, probs_v) = (t.value(agg).unwrap().clone(), t.value(probs).unwrap().clone());
        let loss = weighted_sum(&mut t, agg, 53).unwrap();
        let grads = t.backward(loss).unwrap();
        let g: Vec<Tensor<f64>> = v.iter().map(|&x| grads.get(x).unwrap().clone()).collect();
        (agg_v, probs_v, g)
    };
    let (fa, fp, fg) = run(true);
    let (ca, cp, cg) = run(false);
    assert!(fa.max_abs_diff(&ca).unwrap() < 1e-13);
    assert!(fp.max_abs_diff(&cp).unwrap() < 1e-13);
    for (a, b) in fg.iter().zip(&cg) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-12);
    }

    let err = check_inputs(&inputs, |t, v| {
        let (agg, _) = t.attention(v[0], v[1], v[2])?;
        weighted_sum(t, agg, 54)
    })
    .unwrap();
    assert!(err < GRAD_TOL, "fused attention {err}");
}
