#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symbreak::arch::init_he;
use symbreak::nn::{softmax_cross_entropy, LayerSpec, Mechanisms, Mode, Network, NetworkSpec, ParamRole};
use symbreak::tensor::{Boundary, Precision, Tensor};

pub fn gaussian_tensor(shape: &[usize], seed: u64, precision: Precision) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect();
    Tensor::new(shape, data, precision).unwrap()
}

fn conv(k: usize, c_in: usize, c_out: usize, stride: usize, boundary: Boundary) -> LayerSpec {
    LayerSpec::Conv {
        k,
        c_in,
        c_out,
        stride,
        boundary,
    }
}

/// Small random network, input batch and labels. Structures rotate with the
/// seed so that every layer type appears within five consecutive seeds.
pub fn random_network(seed: u64) -> (Network, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let c = rng.gen_range(2..4usize);
    let classes = rng.gen_range(2..5usize);
    let (input, layers) = match seed % 5 {
        0 => (
            vec![4, 4, 2],
            vec![
                conv(3, 2, c, 1, Boundary::Periodic),
                LayerSpec::Bias { channels: c },
                LayerSpec::BatchNorm { channels: c, eps: 1e-5 },
                LayerSpec::Relu,
                LayerSpec::SkipAdd {
                    block: vec![conv(3, c, c, 1, Boundary::Zero), LayerSpec::LeakyRelu { slope: 0.1 }],
                },
                LayerSpec::WideningHead {
                    c_in: c,
                    stride: 2,
                    factor: 2,
                    boundary: Boundary::Periodic,
                    block: vec![LayerSpec::Relu, conv(3, c, 2 * c, 2, Boundary::Periodic)],
                },
                LayerSpec::AvgPoolAll,
                LayerSpec::Dense {
                    n_in: 2 * c,
                    n_out: classes,
                },
                LayerSpec::Bias { channels: classes },
            ],
        ),
        1 => (
            vec![3, 2, 2],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { n_in: 12, n_out: 7 },
                LayerSpec::Bias { channels: 7 },
                LayerSpec::LeakyRelu { slope: 0.2 },
                LayerSpec::Dense {
                    n_in: 7,
                    n_out: classes,
                },
                LayerSpec::Bias { channels: classes },
            ],
        ),
        2 => (
            vec![5, 5, 2],
            vec![
                conv(3, 2, c, 2, Boundary::Zero),
                LayerSpec::Relu,
                conv(1, c, c, 1, Boundary::Zero),
                LayerSpec::AvgPoolAll,
                LayerSpec::Dense {
                    n_in: c,
                    n_out: classes,
                },
            ],
        ),
        3 => (
            vec![4, 4, 1],
            vec![
                conv(3, 1, c, 1, Boundary::Periodic),
                LayerSpec::BatchNorm { channels: c, eps: 1e-5 },
                LayerSpec::LeakyRelu { slope: 0.05 },
                LayerSpec::SkipAdd {
                    block: vec![
                        LayerSpec::BatchNorm { channels: c, eps: 1e-5 },
                        LayerSpec::Relu,
                        conv(3, c, c, 1, Boundary::Periodic),
                    ],
                },
                LayerSpec::AvgPoolAll,
                LayerSpec::Dense {
                    n_in: c,
                    n_out: classes,
                },
                LayerSpec::Bias { channels: classes },
            ],
        ),
        _ => (
            vec![6],
            vec![
                LayerSpec::Dense { n_in: 6, n_out: 5 },
                LayerSpec::SkipAdd {
                    block: vec![LayerSpec::Relu, LayerSpec::Dense { n_in: 5, n_out: 5 }],
                },
                LayerSpec::BatchNorm { channels: 5, eps: 1e-5 },
                LayerSpec::Dense {
                    n_in: 5,
                    n_out: classes,
                },
            ],
        ),
    };
    let spec = NetworkSpec::new(input.clone(), layers);
    let mut net = Network::new(spec, Precision::Double).unwrap();
    let params: Vec<(String, Vec<usize>, ParamRole)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.role))
        .collect();
    for (i, (name, shape, role)) in params.into_iter().enumerate() {
        let s = seed * 1000 + i as u64;
        let t = match role {
            ParamRole::Weight => init_he(&shape, s, Precision::Double).unwrap(),
            ParamRole::BnScale => {
                let noise = gaussian_tensor(&shape, s, Precision::Double).scale(0.2);
                noise.add(&Tensor::full(&shape, 1.0, Precision::Double)).unwrap()
            }
            _ => gaussian_tensor(&shape, s, Precision::Double).scale(0.3),
        };
        net.set_param(&name, t).unwrap();
    }
    let batch = 4;
    let mut shape = vec![batch];
    shape.extend(&input);
    let x = gaussian_tensor(&shape, seed + 77, Precision::Double);
    let labels = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    (net, x, labels)
}

pub fn train_loss(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let pass = net.forward(x, Mode::Train, &Mechanisms::deterministic()).unwrap();
    softmax_cross_entropy(&pass.logits, labels).unwrap().0
}

/// Largest relative error between backward and central finite differences
/// over all parameters.
pub fn max_gradient_error(net: &Network, x: &Tensor, labels: &[usize], h: f64) -> f64 {
    let mech = Mechanisms::deterministic();
    let pass = net.forward(x, Mode::Train, &mech).unwrap();
    let (_, dl) = softmax_cross_entropy(&pass.logits, labels).unwrap();
    let grads = net.backward(&pass, &dl, &mech).unwrap();
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for (pi, p) in net.params().iter().enumerate() {
        for e in 0..p.value.len() {
            let mut plus = p.value.clone();
            plus.data_mut()[e] += h;
            probe.set_param(&p.name, plus).unwrap();
            let lp = train_loss(&probe, x, labels);
            let mut minus = p.value.clone();
            minus.data_mut()[e] -= h;
            probe.set_param(&p.name, minus).unwrap();
            let lm = train_loss(&probe, x, labels);
            probe.set_param(&p.name, p.value.clone()).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grads.params[pi].data()[e];
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Pair enumeration by multi-index lookups on a `[k, k, out, in]` weight:
/// `forward = true` compares output channels, otherwise input channels.
pub fn pair_correlation_oracle(w: &Tensor, forward: bool) -> f64 {
    let s = w.shape().to_vec();
    let (k, o, i) = (s[0], s[2], s[3]);
    let n = if forward { o } else { i };
    let entry = |ch: usize, a: usize, b: usize, other: usize| {
        if forward {
            w.get(&[a, b, ch, other])
        } else {
            w.get(&[a, b, other, ch])
        }
    };
    let m = if forward { i } else { o };
    let inner = |p: usize, q: usize| {
        let mut acc = 0.0;
        for a in 0..k {
            for b in 0..k {
                for r in 0..m {
                    acc += entry(p, a, b, r) * entry(q, a, b, r);
                }
            }
        }
        acc
    };
    let mut total = 0.0;
    let mut pairs = 0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                total += inner(p, q) / (inner(p, p) * inner(q, q)).sqrt();
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

/// `E[f(x) f(y)]` for unit-variance Gaussians with correlation `c`, by a
/// midpoint rule on a fine grid over `[-8, 8]^2` in whitened coordinates.
pub fn gaussian_pair_expectation(f: impl Fn(f64) -> f64, c: f64) -> f64 {
    let n = 1600;
    let h = 16.0 / n as f64;
    let s = (1.0 - c * c).sqrt();
    let mut acc = 0.0;
    for i in 0..n {
        let u = -8.0 + (i as f64 + 0.5) * h;
        let wu = (-0.5 * u * u).exp();
        let fu = f(u);
        for j in 0..n {
            let v = -8.0 + (j as f64 + 0.5) * h;
            acc += wu * (-0.5 * v * v).exp() * fu * f(c * u + s * v);
        }
    }
    acc * h * h / (2.0 * std::f64::consts::PI)
}
