mod common;

use common::{max_gradient_error, random_network};

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..10 {
        let (net, x, labels) = random_network(seed);
        let n: usize = net.params().iter().map(|p| p.value.len()).sum();
        assert!(n <= 1000, "seed {seed}: {n} params");
        let err = max_gradient_error(&net, &x, &labels, 1e-5);
        eprintln!("seed {seed}: {n} params, err {err:e}");
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}
