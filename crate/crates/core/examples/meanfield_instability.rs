//! Mean-field correlation dynamics near the symmetric fixed point.

use symbreak::harness::{run_meanfield_sweep, SweepConfig};
use symbreak::meanfield::{stability_eigenvalues, Activation, Quadrature};

fn main() {
    println!("leading eigenvalue at C = 1 with unit slopes:");
    for t in [1u64, 10, 100, 1000] {
        let e = stability_eigenvalues(t, 1.0, 1.0, 1.0, 1.0).unwrap();
        println!("  T = {t:>4}: lambda1 = {:.9}", e.lambda1);
    }

    let cfg = SweepConfig {
        activations: vec![Activation::Relu, Activation::Tanh, Activation::Identity],
        c0: vec![0.999, 1.0],
        t_max: 200,
        quadrature: Quadrature::default(),
        ..Default::default()
    };
    let rows = run_meanfield_sweep(&cfg).unwrap();
    println!("activation   c0     C_f at t = 0, 50, 100, 200");
    for phi in &cfg.activations {
        for &c0 in &cfg.c0 {
            let name = symbreak::harness::sweep::activation_name(*phi);
            let at = |t: u64| {
                rows.iter()
                    .find(|r| r.activation == name && r.c0 == c0 && r.t == t)
                    .map(|r| r.c_f)
            };
            let cols: Vec<String> = [0, 50, 100, 200]
                .iter()
                .map(|&t| at(t).map_or("-".into(), |v| format!("{v:.6}")))
                .collect();
            println!("{name:<12} {c0:<6} {}", cols.join("  "));
        }
    }
}
