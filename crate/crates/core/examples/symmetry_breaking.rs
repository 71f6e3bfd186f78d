//! Train a zero-initialised ConstNet on the bundled digits with and without
//! dropout, next to a He-initialised baseline.
//!
//! `cargo run --release --example symmetry_breaking -- [steps] [seed]`

use std::path::PathBuf;

use symbreak::arch::{ArchConfig, BlockInit, ConstNetConfig};
use symbreak::harness::train::load_datasets;
use symbreak::harness::{train_seed, DatasetRef, ExperimentConfig, MetricsLog};
use symbreak::nn::Mechanisms;
use symbreak::tensor::ReductionMode;

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let steps = args.first().copied().unwrap_or(2000);
    let seed = args.get(1).copied().unwrap_or(0);
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let data: DatasetRef = serde_json::from_value(serde_json::json!({
        "kind": "idx_pair", "images": dir.join("images.idx"), "labels": dir.join("labels.idx")
    }))
    .unwrap();

    let det = Mechanisms::deterministic();
    let runs = [
        ("ordered, no dropout", BlockInit::Zero, det),
        (
            "shuffled reductions",
            BlockInit::Zero,
            Mechanisms {
                reduction: ReductionMode::Shuffled { seed },
                ..det
            },
        ),
        (
            "1% dropout",
            BlockInit::Zero,
            Mechanisms {
                dropout_rate: 0.01,
                dropout_on_first_layer: true,
                ..det
            },
        ),
        ("He init", BlockInit::He, det),
    ];
    for (name, block_init, mechanisms) in runs {
        let arch = ArchConfig::ConstNet(ConstNetConfig {
            n_blocks: 6,
            base_width: 8,
            widen_positions: vec![],
            input_shape: vec![8, 8, 1],
            block_init,
            ..Default::default()
        });
        let mut cfg = ExperimentConfig::new(arch, Some(data.clone()));
        cfg.mechanisms = mechanisms;
        cfg.optimizer.lr = 0.03;
        cfg.optimizer.milestones = vec![];
        cfg.epochs = 1000;
        cfg.max_steps = Some(steps);
        cfg.test_size = 497;
        cfg.log_interval = steps;
        let (train, test) = load_datasets(&cfg).unwrap();
        let mut log = MetricsLog::new(Vec::new()).unwrap();
        let (s, _) = train_seed(&cfg, seed, &train, test.as_ref(), &mut log).unwrap();
        println!(
            "{name:<20} test accuracy {:.3}  smallest conv C_f {:.4}",
            s.test_acc.unwrap(),
            s.min_conv_c_f.unwrap()
        );
    }
}
