//! Accumulation order as a source of symmetry breaking.
//!
//! Sums the same values in shuffled orders at single precision, then trains a
//! zero-initialised ConstNet for a few steps with ordered and with shuffled
//! reductions and compares the forward correlation of its convolutions.

use symbreak::arch::{build_constnet, ConstNetConfig};
use symbreak::harness::gen_synthetic_shift;
use symbreak::metrics::forward_correlation;
use symbreak::nn::{sgd_momentum_step, softmax_cross_entropy, Mechanisms, Mode, NodeKind};
use symbreak::tensor::{reduce_sum, Precision, ReductionMode, ReductionPolicy};

fn main() {
    let vals: Vec<f64> = (1..=2000).map(|i| 1.0 / i as f64).collect();
    let ordered = reduce_sum(&vals, &ReductionPolicy::ordered(Precision::Single));
    println!("ordered single-precision sum: {ordered:.9}");
    for seed in 0..4 {
        let s = reduce_sum(&vals, &ReductionPolicy::shuffled(seed, Precision::Single));
        println!("  shuffled seed {seed}: {s:.9} (diff {:+.1e})", s - ordered);
    }

    let cfg = ConstNetConfig {
        n_blocks: 4,
        base_width: 8,
        widen_positions: vec![],
        input_shape: vec![8, 8, 3],
        ..Default::default()
    };
    let data = gen_synthetic_shift(256, 8, 8, 3, 10, 1).unwrap();
    for (name, reduction) in [
        ("ordered", ReductionMode::Ordered),
        ("shuffled", ReductionMode::Shuffled { seed: 7 }),
    ] {
        let mech = Mechanisms {
            reduction,
            ..Mechanisms::deterministic()
        };
        let mut model = build_constnet(&cfg, Precision::Single).unwrap();
        for step in 0..200 {
            let idx: Vec<usize> = (0..32).map(|i| (step * 32 + i) % data.len()).collect();
            let (x, y) = data.batch(&idx, Precision::Single);
            let pass = model.net.forward(&x, Mode::Train, &mech).unwrap();
            let (_, dl) = softmax_cross_entropy(&pass.logits, &y).unwrap();
            let g = model.net.backward(&pass, &dl, &mech).unwrap();
            model.net.absorb_batch_stats(&pass);
            sgd_momentum_step(&mut model.net, &g, 0.05, 0.9).unwrap();
        }
        let net = &model.net;
        let min_cf = net
            .nodes()
            .iter()
            .filter(|n| n.kind == NodeKind::Conv)
            .filter_map(|n| forward_correlation(&net.params()[n.weight.unwrap()].value).ok())
            .fold(1.0, f64::min);
        println!(
            "{name} reductions: 1 - smallest conv C_f after 200 steps = {:.3e}",
            1.0 - min_cf
        );
    }
}
