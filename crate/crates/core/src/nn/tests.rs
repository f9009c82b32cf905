use rand::Rng;

use super::*;
use crate::error::Error;
use crate::seed;

fn random_tensor<T: Scalar>(shape: &[usize], s: u64) -> Tensor<T> {
    let mut rng = seed::rng(s, &[]);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect(),
    )
    .unwrap()
}

#[test]
fn softmax_of_zero_logits_is_uniform() {
    let net = Sequential::new("h", vec![LayerSpec::Softmax]);
    let w = ModelWeights::<f32>::new();
    let out = net.infer(&w, Tensor::zeros(&[1, 6])).unwrap();
    for &p in out.data() {
        assert!((p - 1.0 / 6.0).abs() < 1e-7);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let net = Sequential::new("h", vec![LayerSpec::Softmax]);
    let w = ModelWeights::<f32>::new();
    let mut x = random_tensor::<f32>(&[50, 6], 3);
    x.data_mut().iter_mut().for_each(|v| *v *= 40.0);
    let out = net.infer(&w, x).unwrap();
    for row in out.rows() {
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn dropout_zero_rate_and_eval_are_identity() {
    let x = random_tensor::<f32>(&[4, 10], 1);
    let w = ModelWeights::<f32>::new();
    let zero = Sequential::new("d", vec![LayerSpec::Dropout { rate: 0.0 }]);
    assert_eq!(
        zero.forward(&w, x.clone(), Mode::Train, 5)
            .unwrap()
            .output(),
        &x
    );
    let half = Sequential::new("d", vec![LayerSpec::Dropout { rate: 0.5 }]);
    assert_eq!(
        half.forward(&w, x.clone(), Mode::Eval, 5).unwrap().output(),
        &x
    );
    let a = half.forward(&w, x.clone(), Mode::Train, 5).unwrap();
    let b = half.forward(&w, x.clone(), Mode::Train, 5).unwrap();
    assert_eq!(a.output(), b.output());
    assert_ne!(
        a.output(),
        half.forward(&w, x, Mode::Train, 6).unwrap().output()
    );
}

#[test]
fn inverted_dropout_preserves_expectation() {
    // each unit's output mean over many masks should be its input, within 3 sigma
    let w = ModelWeights::<f64>::new();
    let net = Sequential::new("d", vec![LayerSpec::Dropout { rate: 0.3 }]);
    let x = Tensor::<f64>::from_vec(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let trials = 20_000;
    let mut sums = [0.0f64; 4];
    for s in 0..trials {
        let out = net.forward(&w, x.clone(), Mode::Train, s).unwrap();
        for (acc, v) in sums.iter_mut().zip(out.output().data()) {
            *acc += v;
        }
    }
    let p: f64 = 0.3;
    for (acc, &xi) in sums.iter().zip(x.data()) {
        let mean = acc / trials as f64;
        // per-sample variance of x*m/(1-p): x^2 p/(1-p)
        let sigma = (xi * xi * p / (1.0 - p) / trials as f64).sqrt();
        assert!((mean - xi).abs() < 3.0 * sigma, "mean {mean} vs {xi}");
    }
}

#[test]
fn delta_kernel_reproduces_input() {
    let net = Sequential::new(
        "c",
        vec![LayerSpec::Conv3x3 {
            in_channels: 3,
            out_channels: 3,
        }],
    );
    let mut w = init_weights::<f32>(&net, 1, false).unwrap();
    let k = w.tensor_mut("c.0.weight").unwrap();
    k.data_mut().fill(0.0);
    for c in 0..3 {
        k.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let x = random_tensor::<f32>(&[2, 3, 7, 5], 9);
    assert_eq!(net.infer(&w, x.clone()).unwrap(), x);
}

#[test]
fn conv_matches_direct_sum() {
    let net = Sequential::new(
        "c",
        vec![LayerSpec::Conv3x3 {
            in_channels: 2,
            out_channels: 3,
        }],
    );
    let mut w = init_weights::<f64>(&net, 4, false).unwrap();
    *w.tensor_mut("c.0.bias").unwrap() = random_tensor(&[3], 12);
    let x = random_tensor::<f64>(&[1, 2, 5, 6], 2);
    let out = net.infer(&w, x.clone()).unwrap();
    let (k, b) = (
        w.tensor("c.0.weight").unwrap().data(),
        w.tensor("c.0.bias").unwrap().data(),
    );
    for oc in 0..3 {
        for y in 0..5i64 {
            for xx in 0..6i64 {
                let mut s = b[oc];
                for ic in 0..2 {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if (0..5).contains(&sy) && (0..6).contains(&sx) {
                                s += k[(oc * 2 + ic) * 9 + (ky * 3 + kx) as usize]
                                    * x.data()[(ic * 5 + sy as usize) * 6 + sx as usize];
                            }
                        }
                    }
                }
                let got = out.data()[(oc * 5 + y as usize) * 6 + xx as usize];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pooling_shapes() {
    let net = Sequential::new("p", vec![LayerSpec::MaxPool2x2, LayerSpec::GlobalAvgPool]);
    let w = ModelWeights::<f32>::new();
    let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0]).unwrap();
    let acts = net.forward(&w, x, Mode::Eval, 0).unwrap();
    assert_eq!(acts.outputs[1].data(), &[5.0, 8.0]);
    assert_eq!(acts.output().shape(), &[1, 1]);
    assert_eq!(acts.output().data(), &[6.5]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let net = Sequential::new(
        "h",
        vec![LayerSpec::Dense {
            inputs: 4,
            units: 2,
        }],
    );
    let w = init_weights::<f32>(&net, 0, false).unwrap();
    assert!(matches!(
        net.infer(&w, Tensor::zeros(&[1, 5])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn logits_gradient_is_softmax_minus_onehot() {
    let logits = Tensor::<f64>::from_vec(&[1, 6], vec![0.3, -1.2, 2.0, 0.0, 0.7, -0.4]).unwrap();
    let net = Sequential::new("h", vec![LayerSpec::Softmax]);
    let w = ModelWeights::<f64>::new();
    let probs = net.infer(&w, logits.clone()).unwrap();
    let g = cross_entropy_grad(&probs, &[2]).unwrap();
    // centered differences of the loss in the logits
    let h = 1e-6;
    for j in 0..6 {
        let mut plus = logits.clone();
        plus.data_mut()[j] += h;
        let mut minus = logits.clone();
        minus.data_mut()[j] -= h;
        let lp = cross_entropy(&net.infer(&w, plus).unwrap(), &[2]).unwrap();
        let lm = cross_entropy(&net.infer(&w, minus).unwrap(), &[2]).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let expected = probs.data()[j] - if j == 2 { 1.0 } else { 0.0 };
        assert!((g.data()[j] - expected).abs() < 1e-12);
        assert!((fd - expected).abs() < 1e-7, "{fd} vs {expected}");
    }
}

#[test]
fn all_frozen_network_has_no_gradients() {
    let net = Sequential::new(
        "h",
        vec![
            LayerSpec::Dense {
                inputs: 3,
                units: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 4,
                units: 6,
            },
            LayerSpec::Softmax,
        ],
    );
    let w = init_weights::<f32>(&net, 2, true).unwrap();
    let acts = net
        .forward(&w, random_tensor(&[2, 3], 1), Mode::Train, 0)
        .unwrap();
    assert!(net.backward(&w, &acts, &[0, 5]).unwrap().is_empty());
}

#[test]
fn backward_requires_matching_activations() {
    let net = Sequential::new(
        "h",
        vec![
            LayerSpec::Dense {
                inputs: 3,
                units: 6,
            },
            LayerSpec::Softmax,
        ],
    );
    let other = Sequential::new("h", vec![LayerSpec::Softmax]);
    let w = init_weights::<f32>(&net, 2, false).unwrap();
    let acts = other
        .forward(&w, random_tensor(&[1, 6], 1), Mode::Train, 0)
        .unwrap();
    assert!(matches!(
        net.backward(&w, &acts, &[1]),
        Err(Error::State(_))
    ));
}

#[test]
fn sgd_step_rules() {
    let net = Sequential::new(
        "h",
        vec![LayerSpec::Dense {
            inputs: 2,
            units: 2,
        }],
    );
    let w0 = init_weights::<f64>(&net, 3, false).unwrap();
    let g: Gradients<f64> = vec![(
        "h.0.weight".into(),
        Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap(),
    )];

    let mut w = w0.clone();
    sgd_step(&mut w, &g, 0.0, 0.9, &mut SgdState::default()).unwrap();
    assert_eq!(w, w0);

    let mut w = w0.clone();
    sgd_step(&mut w, &g, 0.1, 0.0, &mut SgdState::default()).unwrap();
    for ((a, b), gv) in w
        .tensor("h.0.weight")
        .unwrap()
        .data()
        .iter()
        .zip(w0.tensor("h.0.weight").unwrap().data())
        .zip(g[0].1.data())
    {
        assert!((a - (b - 0.1 * gv)).abs() < 1e-15);
    }

    // hand-rolled two-step recurrence: v1 = g, v2 = 0.9 g + g
    let mut w = w0.clone();
    let mut state = SgdState::default();
    sgd_step(&mut w, &g, 0.1, 0.9, &mut state).unwrap();
    let after_one = w.clone();
    sgd_step(&mut w, &g, 0.1, 0.9, &mut state).unwrap();
    for ((a, b), gv) in w
        .tensor("h.0.weight")
        .unwrap()
        .data()
        .iter()
        .zip(after_one.tensor("h.0.weight").unwrap().data())
        .zip(g[0].1.data())
    {
        assert!(((b - a) - 0.1 * gv * 1.9).abs() < 1e-12);
    }
}

#[test]
fn sgd_rejects_frozen_gradients() {
    let net = Sequential::new(
        "h",
        vec![LayerSpec::Dense {
            inputs: 2,
            units: 2,
        }],
    );
    let mut w = init_weights::<f32>(&net, 3, true).unwrap();
    let g: Gradients = vec![("h.0.bias".into(), Tensor::zeros(&[2]))];
    assert!(sgd_step(&mut w, &g, 0.1, 0.9, &mut SgdState::default()).is_err());
}

#[test]
fn init_is_seeded_and_he_uniform() {
    let net = Sequential::new(
        "b",
        vec![
            LayerSpec::Conv3x3 {
                in_channels: 4,
                out_channels: 8,
            },
            LayerSpec::Dense {
                inputs: 16,
                units: 3,
            },
        ],
    );
    let a = init_weights::<f32>(&net, 11, true).unwrap();
    let b = init_weights::<f32>(&net, 11, true).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_weights::<f32>(&net, 12, true).unwrap());
    let limit = (6.0f32 / 36.0).sqrt();
    assert!(a
        .tensor("b.0.weight")
        .unwrap()
        .data()
        .iter()
        .all(|v| v.abs() <= limit));
    assert!(a
        .tensor("b.1.bias")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn weights_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.tswt");
    let net = Sequential::new(
        "b",
        vec![
            LayerSpec::Conv3x3 {
                in_channels: 2,
                out_channels: 3,
            },
            LayerSpec::Dense {
                inputs: 3,
                units: 6,
            },
        ],
    );
    let mut w = init_weights::<f32>(&net, 5, true).unwrap();
    w.set_frozen("b.1", false);
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back, w);
    for (p, q) in back.params().iter().zip(w.params()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.tensor), bits(&q.tensor));
    }
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_weights(&path), Err(Error::Format(_))));
    bytes[0] = b'T';
    std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(load_weights(&path), Err(Error::Format(_))));
}
