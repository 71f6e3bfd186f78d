//! Norms and angles through a deep delta-orthogonal ReLU stack.

use symbreak::arch::{build_delta_orthogonal, DeltaOrthogonalConfig};
use symbreak::harness::probe_batch;
use symbreak::nn::{Mechanisms, Mode};
use symbreak::tensor::Precision;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() {
    let cfg = DeltaOrthogonalConfig::default();
    let model = build_delta_orthogonal(&cfg, Precision::Single).unwrap();
    let (x, _) = probe_batch(&model, 2, 3).unwrap();
    let pass = model.net.forward(&x, Mode::Eval, &Mechanisms::deterministic()).unwrap();
    println!("depth {} width {} on {:?}", cfg.depth, cfg.width, cfg.spatial);
    println!("layer  |h(x1)|     |h(x2)|     cos(h(x1), h(x2))");
    for (l, tap) in model.taps.iter().enumerate() {
        let h = pass.output(tap.node).data();
        let (a, b) = h.split_at(h.len() / 2);
        let cos = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (norm(a) * norm(b));
        if l % 10 == 0 || l + 1 == model.taps.len() {
            println!("{:>5}  {:>10.6}  {:>10.6}  {cos:>10.7}", l + 1, norm(a), norm(b));
        }
    }
}
