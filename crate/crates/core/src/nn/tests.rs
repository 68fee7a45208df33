use alloc::vec;
use alloc::vec::Vec;

use super::*;

fn dense(fan_in: usize, fan_out: usize) -> LayerSpec {
    LayerSpec::Dense { fan_in, fan_out }
}

/// Central finite difference of `f` at `x[i]`.
fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

fn assert_close_rel(analytic: f64, numeric: f64, rel: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        (analytic - numeric).abs() <= rel * scale + 1e-9,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

/// Checks every input coordinate and `k` random parameter coordinates.
fn gradient_check(net: &Network, x: &Tensor, labels: &[usize], dropout_seed: Option<u64>, k: usize) {
    let run = |n: &Network, xs: &Tensor| -> f64 {
        match dropout_seed {
            Some(s) => n.nll(xs, labels, DropoutMode::Shared(&mut Rng::new(s))).unwrap(),
            None => n.nll(xs, labels, DropoutMode::Scale).unwrap(),
        }
    };
    let g = match dropout_seed {
        Some(s) => net
            .nll_gradients(x, labels, DropoutMode::Shared(&mut Rng::new(s)))
            .unwrap(),
        None => net.nll_gradients(x, labels, DropoutMode::Scale).unwrap(),
    };
    let h = 1e-5;
    let f_params = |p: &[f64]| run(&net.with_params(p.to_vec()).unwrap(), x);
    let mut pick = Rng::new(99);
    for _ in 0..k {
        let i = pick.below(net.num_params());
        let num = central_diff(&f_params, net.params(), i, h);
        assert_close_rel(g.params[i], num, 1e-4, "param");
    }
    let f_input = |d: &[f64]| run(net, &Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap());
    for i in 0..x.data().len() {
        let num = central_diff(&f_input, x.data(), i, h);
        assert_close_rel(g.input[i], num, 1e-4, "input");
    }
}

#[test]
fn zero_weights_give_uniform_probabilities() {
    let net = Network::new(
        vec![3],
        vec![dense(3, 4), LayerSpec::Relu, dense(4, 5), LayerSpec::Softmax],
    )
    .unwrap();
    let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0]).unwrap();
    let p = net.forward(&x, DropoutMode::Scale).unwrap();
    for v in p.data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn identity_dense_layer() {
    let mut net = Network::new(vec![2], vec![dense(2, 2)]).unwrap();
    net.set_params(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let out = net
        .forward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), DropoutMode::Scale)
        .unwrap();
    assert_eq!(out.data(), &[1.0, 2.0]);
}

#[test]
fn two_layer_relu_matches_hand_evaluation() {
    let mut net = Network::new(vec![2], vec![dense(2, 3), LayerSpec::Relu, dense(3, 2)]).unwrap();
    #[rustfmt::skip]
    let params = vec![
        0.5, -1.0, 1.5, 0.25, -0.75, 2.0, // W1 (3x2)
        0.1, -0.2, 0.3,                   // b1
        1.0, -1.0, 0.5, 0.2, 0.3, -0.4,   // W2 (2x3)
        0.05, -0.05,                      // b2
    ];
    net.set_params(params).unwrap();
    let out = net
        .forward(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), DropoutMode::Scale)
        .unwrap();
    // h = relu([-1.4, 1.8, 3.55]) = [0, 1.8, 3.55]
    let expected = [0.025, -0.93];
    for (o, e) in out.data().iter().zip(expected) {
        assert!((o - e).abs() < 1e-12, "{o} vs {e}");
    }
}

#[test]
fn uniform_logits_nll_gradient() {
    let mut net = Network::new(vec![2], vec![dense(2, 2), LayerSpec::Softmax]).unwrap();
    net.set_params(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let x = Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap();
    let g = net.nll_gradients(&x, &[0], DropoutMode::Scale).unwrap();
    // identity weights: d/dx equals d/dlogits
    assert!((g.input[0] + 0.5).abs() < 1e-15);
    assert!((g.input[1] - 0.5).abs() < 1e-15);
    assert!((g.loss - core::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn saturated_softmax_has_no_learning_signal() {
    let mut net = Network::new(vec![2], vec![dense(2, 2), LayerSpec::Softmax]).unwrap();
    net.set_params(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let x = Tensor::matrix(1, 2, vec![50.0, 0.0]).unwrap();
    let g = net.nll_gradients(&x, &[0], DropoutMode::Scale).unwrap();
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
    assert!(norm(&g.params) < 1e-6);
    assert!(norm(&g.input) < 1e-6);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = Rng::new(11);
    let mut net = Network::new(
        vec![5],
        vec![
            dense(5, 7),
            LayerSpec::Relu,
            dense(7, 6),
            LayerSpec::Relu,
            dense(6, 3),
            LayerSpec::Softmax,
        ],
    )
    .unwrap();
    net.init(&mut rng);
    for b in net.params_mut().iter_mut() {
        *b += 0.05 * rng.normal();
    }
    let x = Tensor::matrix(3, 5, (0..15).map(|_| rng.normal()).collect()).unwrap();
    gradient_check(&net, &x, &[0, 2, 1], None, 40);
}

#[test]
fn dropout_gradients_match_finite_differences_under_frozen_masks() {
    let mut rng = Rng::new(12);
    let mut net = Network::new(
        vec![4],
        vec![
            dense(4, 8),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            dense(8, 3),
            LayerSpec::Softmax,
        ],
    )
    .unwrap();
    net.init(&mut rng);
    let x = Tensor::matrix(2, 4, (0..8).map(|_| rng.normal()).collect()).unwrap();
    gradient_check(&net, &x, &[1, 2], Some(5), 30);
    // Deterministic (scaled) dropout path as well.
    gradient_check(&net, &x, &[1, 2], None, 30);
}

#[test]
fn cnn_gradients_match_finite_differences() {
    let mut rng = Rng::new(13);
    let mut net = Network::new(
        vec![1, 8, 8],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 3,
                kernel_h: 3,
                kernel_w: 3,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 2,
                kernel_h: 2,
                kernel_w: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            dense(8, 4),
            LayerSpec::Softmax,
        ],
    )
    .unwrap();
    net.init(&mut rng);
    for b in net.params_mut().iter_mut() {
        *b += 0.05 * rng.normal();
    }
    let x = Tensor::matrix(2, 64, (0..128).map(|_| rng.uniform()).collect()).unwrap();
    gradient_check(&net, &x, &[3, 0], None, 60);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = Rng::new(14);
    let mut net = Network::new(vec![6], vec![dense(6, 10), LayerSpec::Softmax]).unwrap();
    net.init(&mut rng);
    for v in net.params_mut().iter_mut() {
        *v *= 30.0;
    }
    let x = Tensor::matrix(50, 6, (0..300).map(|_| 3.0 * rng.normal()).collect()).unwrap();
    let p = net.forward(&x, DropoutMode::Scale).unwrap();
    for i in 0..50 {
        let row = p.row(i);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_rate_matches_binomial_expectation() {
    let rate = 0.3;
    let net = Network::new(vec![100], vec![LayerSpec::Dropout { rate }]).unwrap();
    let x = Tensor::matrix(200, 100, vec![1.0; 20_000]).unwrap();
    let mut rng = Rng::new(15);
    let out = net.forward(&x, DropoutMode::PerExample(&mut rng)).unwrap();
    let n = out.data().len() as f64;
    let zeros = out.data().iter().filter(|&&v| v == 0.0).count() as f64;
    let sd = libm::sqrt(n * rate * (1.0 - rate));
    assert!((zeros - n * rate).abs() < 3.0 * sd, "{zeros} zeros of {n}");

    let scaled = net.forward(&x, DropoutMode::Scale).unwrap();
    assert!(scaled.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    // Shared masks are identical across the batch.
    let shared = net.forward(&x, DropoutMode::Shared(&mut rng)).unwrap();
    assert!((1..200).all(|i| shared.row(i) == shared.row(0)));
}

#[test]
fn shape_errors_name_the_layer() {
    let err = Network::new(vec![4], vec![dense(4, 3), LayerSpec::Relu, dense(5, 2)]).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Dimension {
                layer: 2,
                kind: "dense",
                ..
            }
        ),
        "{err:?}"
    );

    let net = Network::new(vec![4], vec![dense(4, 3)]).unwrap();
    let err = net
        .forward(&Tensor::matrix(1, 5, vec![0.0; 5]).unwrap(), DropoutMode::Scale)
        .unwrap_err();
    assert!(matches!(err, Error::Dimension { layer: 0, .. }));

    assert!(matches!(
        Network::new(vec![4], vec![LayerSpec::Dropout { rate: 1.0 }]),
        Err(Error::Config(_))
    ));
}

#[test]
fn nll_requires_softmax_and_valid_labels() {
    let net = Network::new(vec![2], vec![dense(2, 2)]).unwrap();
    let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    assert!(matches!(net.nll(&x, &[0], DropoutMode::Scale), Err(Error::Config(_))));
    let net = Network::new(vec![2], vec![dense(2, 2), LayerSpec::Softmax]).unwrap();
    assert!(matches!(
        net.nll(&x, &[2], DropoutMode::Scale),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn layer_spec_text_round_trip() {
    let specs: Vec<LayerSpec> = vec![
        dense(784, 1200),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 20,
            kernel_h: 5,
            kernel_w: 5,
        },
        LayerSpec::MaxPool2d,
        LayerSpec::Flatten,
        LayerSpec::Softmax,
    ];
    for s in specs {
        let text = alloc::format!("{s}");
        assert_eq!(text.parse::<LayerSpec>().unwrap(), s);
    }
    assert!("dense 3".parse::<LayerSpec>().is_err());
    assert!("relu 1".parse::<LayerSpec>().is_err());
}
