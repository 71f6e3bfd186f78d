//! Empirical tangent kernel of a zero-initialised ConstNet next to the kernel
//! of the linear model it reduces to.

use symbreak::arch::{build_constnet, ConstNetConfig};
use symbreak::harness::{probe_batch, verify_ntk};
use symbreak::tensor::Precision;

fn main() {
    let cfg = ConstNetConfig {
        n_blocks: 4,
        base_width: 4,
        widen_positions: vec![2],
        use_batchnorm: false,
        n_classes: 2,
        input_shape: vec![8, 8, 3],
        ..Default::default()
    };
    let model = build_constnet(&cfg, Precision::Double).unwrap();
    let (x, _) = probe_batch(&model, 3, 1).unwrap();
    let r = verify_ntk(&model, &x).unwrap();
    let n = r.samples * r.classes;
    println!("rows and columns are (sample, class); kernel | reference");
    for i in 0..n {
        let k: Vec<String> = (0..n).map(|j| format!("{:>8.4}", r.kernel[i * n + j])).collect();
        let e: Vec<String> = (0..n).map(|j| format!("{:>8.4}", r.reference[i * n + j])).collect();
        println!("{} | {}", k.join(""), e.join(""));
    }
    println!(
        "max relative deviation {:.2e}, max cross-class entry {:.2e}",
        r.max_relative_deviation, r.max_off_diagonal
    );
}
