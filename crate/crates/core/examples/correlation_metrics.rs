//! Forward and backward correlations of a few hand-built weight tensors.

use symbreak::arch::{haar_orthogonal, init_he, init_tensor, InitScheme};
use symbreak::metrics::{backward_correlation, effective_width, forward_correlation};
use symbreak::tensor::{Precision, Tensor};

fn show(name: &str, w: &Tensor) {
    let cf = forward_correlation(w).unwrap();
    let cb = backward_correlation(w).unwrap();
    let n = w.shape()[w.rank() - 2];
    println!(
        "{name:<28} C_f {cf:>8.4}  C_b {cb:>8.4}  effective width {:>6.2} of {n}",
        effective_width(cf, n)
    );
}

fn main() {
    show(
        "constant filters",
        &Tensor::full(&[3, 3, 16, 16], 0.1, Precision::Double),
    );
    show("He normal", &init_he(&[3, 3, 64, 64], 1, Precision::Double).unwrap());
    show(
        "delta identity",
        &init_tensor(&[3, 3, 16, 16], &InitScheme::DeltaIdentity, 0, Precision::Double).unwrap(),
    );
    show(
        "delta orthogonal",
        &init_tensor(&[3, 3, 16, 16], &InitScheme::DeltaOrthogonal, 2, Precision::Double).unwrap(),
    );

    // 8 outputs built from 4 orthonormal filters: C_f = (R - 1) / (d - 1) = 1/7.
    let q = haar_orthogonal(9 * 4, 5);
    let mut w = Tensor::zeros(&[3, 3, 8, 4], Precision::Double);
    for o in 0..8 {
        for t in 0..9 {
            for c in 0..4 {
                w.set(&[t / 3, t % 3, o, c], q[(t * 4 + c, o % 4)]);
            }
        }
    }
    show("orthonormal, 2 copies each", &w);

    for k in [64, 16, 4, 1] {
        let w = init_tensor(
            &[64, 100],
            &InitScheme::Replicated { k, lambda: 0.0 },
            3,
            Precision::Double,
        )
        .unwrap();
        show(&format!("dense rows, {k} distinct"), &w);
    }
}
