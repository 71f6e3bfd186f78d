//! LeakyNet at initialisation: every second layer negates the stem output,
//! and a channel-averaging layer leaves symmetric features untouched.

use symbreak::arch::{build_leakynet, LayerInit, LeakyNetConfig};
use symbreak::harness::probe_batch;
use symbreak::nn::{Mechanisms, Mode};
use symbreak::tensor::Precision;

fn main() {
    let cfg = LeakyNetConfig {
        base_width: 8,
        input_shape: vec![8, 8, 3],
        ..Default::default()
    };
    let model = build_leakynet(&cfg, Precision::Single).unwrap();
    let (x, _) = probe_batch(&model, 2, 0).unwrap();
    let mech = Mechanisms::deterministic();
    let pass = model.net.forward(&x, Mode::Eval, &mech).unwrap();
    let a0 = pass.output(model.taps[0].node);
    println!("layer  max|a_k - a_0|  max|a_k + a_0|  max|a_k|");
    for (k, tap) in model.taps.iter().enumerate() {
        let a = pass.output(tap.node);
        let plus = a.max_abs_diff(a0).unwrap();
        let minus = a.add(a0).unwrap().max_abs();
        println!("{k:>5}  {plus:>14.3e}  {minus:>14.3e}  {:>8.3}", a.max_abs());
    }

    let mut layers = cfg.per_layer_init.clone();
    layers[4] = LayerInit::Ones;
    let variant = build_leakynet(
        &LeakyNetConfig {
            per_layer_init: layers,
            ..cfg
        },
        Precision::Single,
    )
    .unwrap();
    let other = variant.net.forward(&x, Mode::Eval, &mech).unwrap();
    println!(
        "logits with a channel-averaging layer 4 differ by {:.2e}",
        other.logits.max_abs_diff(&pass.logits).unwrap()
    );
}
