//! Signal-propagation checks on a freshly built ConstNet.

use symbreak::arch::{build_constnet, ConstNetConfig};
use symbreak::harness::{probe_batch, verify_sigprop, CheckStatus, SigpropTolerances};
use symbreak::nn::{softmax_cross_entropy, Mechanisms, Mode};
use symbreak::tensor::Precision;

fn main() {
    let cfg = ConstNetConfig {
        use_batchnorm: false,
        input_shape: vec![16, 16, 3],
        ..Default::default()
    };
    let model = build_constnet(&cfg, Precision::Double).unwrap();
    let (x, labels) = probe_batch(&model, 8, 0).unwrap();

    let pass = model.net.forward(&x, Mode::Eval, &Mechanisms::deterministic()).unwrap();
    let (loss, _) = softmax_cross_entropy(&pass.logits, &labels).unwrap();
    println!(
        "logits all zero: {}, loss {loss:.6} (ln 10 = {:.6})",
        pass.logits.max_abs() == 0.0,
        10f64.ln()
    );

    let report = verify_sigprop(&model, &x, &labels, &SigpropTolerances::default()).unwrap();
    for c in &report.checks {
        let status = match &c.status {
            CheckStatus::Pass => "pass".to_string(),
            CheckStatus::Fail => "FAIL".to_string(),
            CheckStatus::Skipped(why) => format!("skipped: {why}"),
        };
        println!("({}) {}: {status} {}", c.id, c.name, c.detail);
        if let (Some(m), Some(t)) = (c.measured, c.tolerance) {
            println!("    measured {m:.3e}, tolerance {t:.0e}");
        }
    }
}
