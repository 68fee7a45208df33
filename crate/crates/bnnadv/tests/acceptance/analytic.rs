//! Checks that need no data: gradients, metric identities, moment propagation
//! and the weighted-gradient identity.

use bnnadv_core::attack::{bnn_gradient, weighted_gradient_literal, GradientVariant};
use bnnadv_core::bnn::{
    minibatch_objective, mlp, relu_moments, GaussianWeightPosterior, Model, PbpLayer, PbpPosterior,
    PredictiveSampleSet, ScaleMixturePrior,
};
use bnnadv_core::nn::{DropoutMode, LayerSpec, Network};
use bnnadv_core::uncertainty::summarize;
use bnnadv_core::{Rng, Tensor};

use super::Verdict;

/// Relative agreement with a small absolute floor for coordinates whose
/// gradient is zero up to finite-difference noise.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Default)]
struct Worst {
    rel: f64,
    what: String,
    checked: usize,
    failed: usize,
}

impl Worst {
    fn check(&mut self, analytic: f64, numeric: f64, tol: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let err = (analytic - numeric).abs();
        if err > tol * scale + ABS_FLOOR {
            self.failed += 1;
        }
        // Reported error is relative to the gradient scale, floored at 1e-4.
        let rel = err / scale.max(1e-4);
        if rel > self.rel {
            self.rel = rel;
            self.what = what();
        }
    }
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

fn random_net(rng: &mut Rng, shape: Vec<usize>, layers: Vec<LayerSpec>) -> Network {
    let mut net = Network::new(shape, layers).unwrap();
    net.init(rng);
    for p in net.params_mut() {
        *p += 0.2 * rng.normal();
    }
    net
}

fn random_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

fn random_pbp(rng: &mut Rng, sizes: &[usize]) -> PbpPosterior {
    let layers = sizes
        .windows(2)
        .map(|w| {
            let n = (w[0] + 1) * w[1];
            let mean = (0..n).map(|_| rng.normal()).collect();
            let var = (0..n).map(|_| 0.05 + 0.3 * rng.uniform()).collect();
            PbpLayer::new(w[0], w[1], mean, var).unwrap()
        })
        .collect();
    PbpPosterior::new(layers).unwrap()
}

fn small_models(rng: &mut Rng) -> Vec<Model> {
    let det = random_net(rng, vec![6], mlp(&[6, 8, 4], 0.0));
    let drop = random_net(rng, vec![6], mlp(&[6, 8, 8, 4], 0.3));
    let mean = random_net(rng, vec![6], mlp(&[6, 8, 4], 0.0));
    let n = mean.num_params();
    let rho = (0..n).map(|_| -2.0 + 0.3 * rng.normal()).collect();
    vec![
        Model::Deterministic(det),
        Model::McDropout(drop),
        Model::Bbb(GaussianWeightPosterior::new(mean, rho).unwrap()),
        Model::Pbp(random_pbp(rng, &[6, 8, 4])),
    ]
}

fn network_gradients(w: &mut Worst, rng: &mut Rng) {
    let conv = vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel_h: 3,
            kernel_w: 3,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Flatten,
        LayerSpec::Dense { fan_in: 18, fan_out: 5 },
        LayerSpec::Softmax,
    ];
    let cases = [
        (vec![6], mlp(&[6, 9, 7, 4], 0.3), vec![3, 6], vec![0, 3, 1]),
        (vec![1, 8, 8], conv, vec![2, 1, 8, 8], vec![4, 2]),
    ];
    for (shape, layers, xshape, labels) in cases {
        let net = random_net(rng, shape, layers);
        let x = random_tensor(rng, xshape);
        let mask = rng.next_u64();
        let nll = |n: &Network, xs: &Tensor| n.nll(xs, &labels, DropoutMode::Shared(&mut Rng::new(mask))).unwrap();
        let g = net
            .nll_gradients(&x, &labels, DropoutMode::Shared(&mut Rng::new(mask)))
            .unwrap();
        let h = 1e-5;
        let fp = |p: &[f64]| nll(&net.with_params(p.to_vec()).unwrap(), &x);
        for i in 0..net.num_params() {
            w.check(g.params[i], central(&fp, net.params(), i, h), 1e-4, || {
                format!("network parameter {i}")
            });
        }
        let fx = |d: &[f64]| nll(&net, &Tensor::new(x.shape().to_vec(), d.to_vec()).unwrap());
        for i in 0..x.data().len() {
            w.check(g.input[i], central(&fx, x.data(), i, h), 1e-4, || {
                format!("network input {i}")
            });
        }
    }
}

fn elbo_gradients(w: &mut Worst, rng: &mut Rng) {
    let mean = random_net(rng, vec![5], mlp(&[5, 6, 3], 0.0));
    let n = mean.num_params();
    let rho: Vec<f64> = (0..n).map(|_| -1.5 + 0.5 * rng.normal()).collect();
    let x = random_tensor(rng, vec![4, 5]);
    let labels = [0, 2, 1, 2];
    let eps: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let prior = ScaleMixturePrior::new(0.5, 1.0, 0.3).unwrap();
    let kl = 0.3;
    let loss = |m: &[f64], r: &[f64]| {
        let post = GaussianWeightPosterior::new(mean.with_params(m.to_vec()).unwrap(), r.to_vec()).unwrap();
        minibatch_objective(&post, &prior, &x, &labels, kl, &eps).unwrap().loss
    };
    let post = GaussianWeightPosterior::new(mean.clone(), rho.clone()).unwrap();
    let g = minibatch_objective(&post, &prior, &x, &labels, kl, &eps).unwrap();
    let h = 1e-6;
    for i in 0..n {
        let fm = |m: &[f64]| loss(m, &rho);
        w.check(g.grad_mean[i], central(&fm, mean.params(), i, h), 1e-4, || {
            format!("BBB mean {i}")
        });
        let fr = |r: &[f64]| loss(mean.params(), r);
        w.check(g.grad_rho[i], central(&fr, &rho, i, h), 1e-4, || format!("BBB rho {i}"));
    }
}

fn log_z_gradients(w: &mut Worst, rng: &mut Rng) {
    let post = random_pbp(rng, &[3, 4, 2]);
    let x = [0.7, 0.2, 0.9];
    let label = 1;
    let mut eps = vec![0.0; 2000 * 2];
    rng.fill_normal(&mut eps);
    let g = post.log_z_gradients(&x, label, &eps).unwrap();
    let h = 1e-6;
    for li in 0..post.layers().len() {
        let l = &post.layers()[li];
        for wi in 0..l.mean().len() {
            for var in [false, true] {
                let eval = |delta: f64| {
                    let layers = post
                        .layers()
                        .iter()
                        .enumerate()
                        .map(|(k, l)| {
                            let (mut m, mut v) = (l.mean().to_vec(), l.var().to_vec());
                            if k == li {
                                if var {
                                    v[wi] += delta;
                                } else {
                                    m[wi] += delta;
                                }
                            }
                            PbpLayer::new(l.fan_in(), l.fan_out(), m, v).unwrap()
                        })
                        .collect();
                    PbpPosterior::new(layers)
                        .unwrap()
                        .log_z_gradients(&x, label, &eps)
                        .unwrap()
                        .log_z
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if var { g.var[li][wi] } else { g.mean[li][wi] };
                w.check(an, num, 1e-3, || format!("PBP log Z layer {li} weight {wi} var={var}"));
            }
        }
    }
    // Moment backward pass through to the input.
    let xs = random_tensor(rng, vec![2, 3]);
    let gm: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let gv: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let f = |d: &[f64]| {
        let o = post
            .forward_moments_batch(&Tensor::matrix(2, 3, d.to_vec()).unwrap())
            .unwrap();
        o.mean.iter().zip(&gm).map(|(a, b)| a * b).sum::<f64>() + o.var.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>()
    };
    let gx = post.backward_input(&post.moment_trace(&xs).unwrap(), &gm, &gv);
    for i in 0..6 {
        w.check(gx[i], central(&f, xs.data(), i, 1e-6), 1e-4, || {
            format!("PBP moment input {i}")
        });
    }
}

fn bnn_input_gradients(w: &mut Worst, rng: &mut Rng) {
    let m = 16;
    for model in small_models(rng) {
        let x = random_tensor(rng, vec![1, 6]);
        let label = rng.below(4);
        let seed = rng.next_u64();
        let nll = |d: &[f64]| {
            let sets = model
                .predictive_samples(&Tensor::matrix(1, 6, d.to_vec()).unwrap(), m, seed)
                .unwrap();
            -sets[0].mean()[label].ln()
        };
        let g = bnn_gradient(&model, &x, &[label], m, GradientVariant::Weighted, seed).unwrap();
        for i in 0..6 {
            w.check(g.gradients[i], central(&nll, x.data(), i, 1e-6), 1e-3, || {
                format!("{} input gradient {i}", model.family())
            });
        }
    }
}

pub fn gradients() -> Verdict {
    let mut rng = Rng::new(0x6772_6164);
    let mut w = Worst::default();
    network_gradients(&mut w, &mut rng);
    elbo_gradients(&mut w, &mut rng);
    log_z_gradients(&mut w, &mut rng);
    bnn_input_gradients(&mut w, &mut rng);
    Verdict::new(
        w.failed == 0,
        format!(
            "{} coordinates, {} outside tolerance; worst relative error {:.2e} ({})",
            w.checked, w.failed, w.rel, w.what
        ),
    )
}

fn random_sample_set(rng: &mut Rng) -> PredictiveSampleSet {
    let c = [2, 3, 10][rng.below(3)];
    let m = 1 + rng.below(60);
    let scale = [0.0, 0.1, 1.0, 10.0, 60.0][rng.below(5)];
    let pattern = rng.below(4);
    let base: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    let mut probs = Vec::with_capacity(m * c);
    for _ in 0..m {
        let row: Vec<f64> = match pattern {
            // One-hot votes.
            0 => {
                let k = rng.below(c);
                (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
            }
            // Every sample identical.
            1 => base.clone(),
            _ => (0..c).map(|_| scale * rng.normal()).collect(),
        };
        if pattern == 0 {
            probs.extend(row);
        } else {
            let logits: Vec<f64> = row.iter().map(|v| v * if pattern == 1 { scale } else { 1.0 }).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / s));
        }
    }
    PredictiveSampleSet::new(probs, c).unwrap()
}

fn first_argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

pub fn metric_identities() -> Verdict {
    let mut rng = Rng::new(0x6d65_7472);
    let mut bad: Vec<String> = Vec::new();
    let n = 10_000;
    for t in 0..n {
        let set = random_sample_set(&mut rng);
        let (m, c) = (set.num_samples(), set.num_classes());
        let s = summarize(&set);
        let ln_c = (c as f64).ln();
        if !(0.0 <= s.mummi && s.mummi <= s.entropy && s.entropy <= ln_c) {
            bad.push(format!("set {t}: mummi {} entropy {} ln C {ln_c}", s.mummi, s.entropy));
        }
        let mut votes = vec![0usize; c];
        for i in 0..m {
            votes[first_argmax(set.row(i))] += 1;
        }
        let f = *votes.iter().max().unwrap();
        if s.variation_ratio != 1.0 - f as f64 / m as f64 {
            bad.push(format!(
                "set {t}: variation ratio {} with mode {f} of {m}",
                s.variation_ratio
            ));
        }

        let mut order: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut order);
        let rows: Vec<f64> = order.iter().flat_map(|&i| set.row(i).iter().copied()).collect();
        if summarize(&PredictiveSampleSet::new(rows, c).unwrap()) != s {
            bad.push(format!("set {t}: summary changed under sample permutation"));
        }

        let mut classes: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut classes);
        let permuted: Vec<f64> = (0..m)
            .flat_map(|i| classes.iter().map(move |&k| (i, k)))
            .map(|(i, k)| set.row(i)[k])
            .collect();
        let p = summarize(&PredictiveSampleSet::new(permuted, c).unwrap());
        let ties = (0..m).any(|i| {
            let r = set.row(i);
            let top = r[first_argmax(r)];
            r.iter().filter(|&&v| v == top).count() > 1
        });
        if p.entropy != s.entropy || p.mummi != s.mummi || p.class_prob != s.class_prob {
            bad.push(format!("set {t}: entropy/mummi changed under class permutation"));
        }
        if !ties && p.variation_ratio != s.variation_ratio {
            bad.push(format!("set {t}: variation ratio changed under class permutation"));
        }
    }
    let detail = match bad.first() {
        None => format!("{n} random sample sets, all identities exact"),
        Some(b) => format!("{} violations over {n} sets; first: {b}", bad.len()),
    };
    Verdict::new(bad.is_empty(), detail)
}

/// Sample mean and the standard errors of the mean and of the variance.
fn moments(samples: &[f64]) -> (f64, f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = samples.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (mean, var, (var / n).sqrt(), ((m4 - var * var) / n).sqrt())
}

pub fn moment_propagation() -> Verdict {
    let mut rng = Rng::new(0x6d6f_6d65);
    let mut worst: f64 = 0.0;
    let mut relu_ok = true;
    let draws = 1_000_000;
    let mut z = vec![0.0; draws];
    for _ in 0..20 {
        // Means within [-1, 2] standard deviations keep the positive part
        // common enough for a 10^6-sample estimate to resolve 1%.
        let v = 0.05 + 3.0 * rng.uniform();
        let m = v.sqrt() * (3.0 * rng.uniform() - 1.0);
        rng.fill_normal(&mut z);
        let relu: Vec<f64> = z.iter().map(|e| (m + v.sqrt() * e).max(0.0)).collect();
        let (mc_mean, mc_var, _, _) = moments(&relu);
        let (am, av) = relu_moments(m, v);
        for (a, b) in [(am, mc_mean), (av, mc_var)] {
            let rel = (a - b).abs() / b.abs();
            worst = worst.max(rel);
            relu_ok &= rel <= 0.01;
        }
    }

    let samples = 200_000;
    let mut worst_se: f64 = 0.0;
    let mut net_ok = true;
    for _ in 0..3 {
        // One hidden layer: the hidden units are independent given the input,
        // so propagated output moments are exact.
        let post = random_pbp(&mut rng, &[4, 6, 3]);
        let x: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let out = post.forward_moments(&x).unwrap();
        let mut outputs = vec![Vec::with_capacity(samples); 3];
        for _ in 0..samples {
            let mut a = x.clone();
            for (li, l) in post.layers().iter().enumerate() {
                let k = l.fan_in() + 1;
                let s = (k as f64).sqrt();
                let mut next: Vec<f64> = (0..l.fan_out())
                    .map(|j| {
                        (0..k)
                            .map(|i| {
                                let idx = j * k + i;
                                let w = l.mean()[idx] + l.var()[idx].sqrt() * rng.normal();
                                w * if i < l.fan_in() { a[i] } else { 1.0 }
                            })
                            .sum::<f64>()
                            / s
                    })
                    .collect();
                if li + 1 < post.layers().len() {
                    next.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                a = next;
            }
            for (o, v) in outputs.iter_mut().zip(a) {
                o.push(v);
            }
        }
        for (j, o) in outputs.iter().enumerate() {
            let (mean, var, se_mean, se_var) = moments(o);
            let d_mean = (out.mean[j] - mean).abs() / se_mean;
            let d_var = (out.var[j] - var).abs() / se_var;
            worst_se = worst_se.max(d_mean).max(d_var);
            net_ok &= d_mean <= 3.0 && d_var <= 3.0;
        }
    }
    Verdict::new(
        relu_ok && net_ok,
        format!(
            "ReLU moments worst relative error {:.3}% (20 inputs, 10^6 draws); network moments worst {:.2} standard errors",
            100.0 * worst,
            worst_se
        ),
    )
}

pub fn gradient_identity() -> Verdict {
    let mut rng = Rng::new(0x6964_656e);
    let mut worst: f64 = 0.0;
    for model in small_models(&mut rng) {
        for _ in 0..5 {
            let x = random_tensor(&mut rng, vec![1, 6]);
            let label = rng.below(4);
            let seed = rng.next_u64();
            let literal = weighted_gradient_literal(&model, x.data(), label, 30, seed).unwrap();
            let direct = bnn_gradient(&model, &x, &[label], 30, GradientVariant::Weighted, seed).unwrap();
            for (a, b) in literal.iter().zip(&direct.gradients) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    Verdict::new(
        worst <= 1e-10,
        format!("worst difference {worst:.2e} over 4 families x 5 inputs"),
    )
}
