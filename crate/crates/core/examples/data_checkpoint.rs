//! Load the bundled digits, generate a shifted-template dataset, and round-trip
//! a trained network through a checkpoint.

use std::path::PathBuf;

use symbreak::arch::{ArchConfig, ReplicatedMlpConfig};
use symbreak::harness::{
    build_model, evaluate, gen_synthetic_shift, load_checkpoint, load_idx, save_checkpoint, ExperimentConfig,
};
use symbreak::nn::{sgd_momentum_step, softmax_cross_entropy, Mechanisms, Mode};
use symbreak::tensor::Precision;

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let digits = load_idx(&dir.join("images.idx"), &dir.join("labels.idx")).unwrap();
    println!("digits: {} samples of shape {:?}", digits.len(), digits.sample_shape);

    let shifted = gen_synthetic_shift(100, 8, 8, 3, 4, 2).unwrap();
    println!(
        "synthetic: {} samples of shape {:?}, labels {:?}...",
        shifted.len(),
        shifted.sample_shape,
        &shifted.labels[..8]
    );

    let arch = ArchConfig::ReplicatedMlp(ReplicatedMlpConfig {
        input_shape: vec![8, 8, 1],
        width: 32,
        k: 32,
        ..Default::default()
    });
    let cfg = ExperimentConfig::new(arch, None);
    let mut model = build_model(&cfg, 0).unwrap();
    let train = digits.take(1500);
    let test = digits.skip(1500);
    let mech = Mechanisms::deterministic();
    for step in 0..300 {
        let idx: Vec<usize> = (0..32).map(|i| (step * 32 + i) % train.len()).collect();
        let (x, y) = train.batch(&idx, Precision::Single);
        let pass = model.net.forward(&x, Mode::Train, &mech).unwrap();
        let (_, dl) = softmax_cross_entropy(&pass.logits, &y).unwrap();
        let g = model.net.backward(&pass, &dl, &mech).unwrap();
        sgd_momentum_step(&mut model.net, &g, 0.05, 0.9).unwrap();
    }
    let before = evaluate(&model.net, &test).unwrap();

    let out = tempfile_dir();
    let path = save_checkpoint(&model.net, Some(&model.arch), &out, "mlp").unwrap();
    let (net, manifest) = load_checkpoint(&path).unwrap();
    let after = evaluate(&net, &test).unwrap();
    println!(
        "checkpoint {} at step {}: {} tensors",
        path.display(),
        manifest.step,
        manifest.params.len()
    );
    println!("held-out accuracy before save {before:.4}, after load {after:.4}");
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join("symbreak-example");
    std::fs::create_dir_all(&d).unwrap();
    d
}
