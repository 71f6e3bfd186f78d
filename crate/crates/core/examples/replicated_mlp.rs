//! Accuracy of a one-hidden-layer MLP whose 64 hidden units start as copies
//! of K distinct rows, with and without a little independent noise.
//!
//! `cargo run --release --example replicated_mlp -- [steps] [seeds]`

use std::path::PathBuf;

use symbreak::arch::{ArchConfig, ReplicatedMlpConfig};
use symbreak::harness::train::load_datasets;
use symbreak::harness::{train_seed, DatasetRef, ExperimentConfig, MetricsLog};

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let steps = args.first().copied().unwrap_or(2000);
    let seeds = args.get(1).copied().unwrap_or(3);
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let data: DatasetRef = serde_json::from_value(serde_json::json!({
        "kind": "idx_pair", "images": dir.join("images.idx"), "labels": dir.join("labels.idx")
    }))
    .unwrap();
    for lambda in [0.0, 0.01] {
        for k in [64, 16, 4, 1] {
            let arch = ArchConfig::ReplicatedMlp(ReplicatedMlpConfig {
                input_shape: vec![8, 8, 1],
                width: 64,
                k,
                lambda,
                ..Default::default()
            });
            let mut cfg = ExperimentConfig::new(arch, Some(data.clone()));
            cfg.optimizer.lr = 0.1;
            cfg.optimizer.milestones = vec![];
            cfg.epochs = 1000;
            cfg.max_steps = Some(steps);
            cfg.test_size = 599;
            cfg.log_interval = steps;
            let (train, test) = load_datasets(&cfg).unwrap();
            let mut accs: Vec<f64> = (0..seeds)
                .map(|s| {
                    let mut log = MetricsLog::new(Vec::new()).unwrap();
                    train_seed(&cfg, s, &train, test.as_ref(), &mut log)
                        .unwrap()
                        .0
                        .test_acc
                        .unwrap()
                })
                .collect();
            accs.sort_by(f64::total_cmp);
            println!(
                "lambda {lambda:<4} K {k:>2}: median test accuracy {:.4}",
                accs[accs.len() / 2]
            );
        }
    }
}
