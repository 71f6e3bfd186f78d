mod common;

use common::{gaussian_tensor, pair_correlation_oracle};
use nalgebra::DMatrix;
use proptest::prelude::*;
use symbreak::arch::haar_orthogonal;
use symbreak::metrics::{
    backward_correlation, effective_width, forward_correlation, hidden_correlation, mean_dissimilarity,
    perturbation_ratio,
};
use symbreak::tensor::{Precision, Tensor};

#[test]
fn constant_filters_are_fully_correlated() {
    let w = Tensor::full(&[3, 3, 5, 4], 0.37, Precision::Double);
    assert_eq!(forward_correlation(&w).unwrap(), 1.0);
    assert_eq!(backward_correlation(&w).unwrap(), 1.0);
}

#[test]
fn replicated_orthonormal_filters() {
    // 3 orthonormal filters of length 3*3*4, each used by R = 2 outputs.
    let q = haar_orthogonal(36, 7);
    let (taps, o, i) = (9, 6, 4);
    let mut w = Tensor::zeros(&[3, 3, o, i], Precision::Double);
    for out in 0..o {
        let f = out % 3;
        for t in 0..taps {
            for c in 0..i {
                w.set(&[t / 3, t % 3, out, c], q[(t * i + c, f)]);
            }
        }
    }
    let c_f = forward_correlation(&w).unwrap();
    assert!((c_f - 0.2).abs() < 1e-12, "{c_f}");
    assert!((pair_correlation_oracle(&w, true) - 0.2).abs() < 1e-12);
}

#[test]
fn iid_gaussian_weights_are_nearly_uncorrelated() {
    let w = gaussian_tensor(&[3, 3, 512, 512], 3, Precision::Double);
    assert!(forward_correlation(&w).unwrap().abs() < 0.05);
    assert!(backward_correlation(&w).unwrap().abs() < 0.05);
}

#[test]
fn matches_brute_force_pairs() {
    for seed in 0..50u64 {
        let shape = [3, 3, 2 + (seed % 5) as usize, 2 + (seed % 3) as usize];
        let w = gaussian_tensor(&shape, 100 + seed, Precision::Double);
        assert!((forward_correlation(&w).unwrap() - pair_correlation_oracle(&w, true)).abs() < 1e-12);
        assert!((backward_correlation(&w).unwrap() - pair_correlation_oracle(&w, false)).abs() < 1e-12);
    }
}

#[test]
fn dense_weights_use_rows_and_columns() {
    // [out, in]: two identical rows, orthogonal columns.
    let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0], Precision::Double).unwrap();
    assert_eq!(forward_correlation(&w).unwrap(), 1.0);
    let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], Precision::Double).unwrap();
    assert_eq!(forward_correlation(&w).unwrap(), 0.0);
    assert_eq!(backward_correlation(&w).unwrap(), 0.0);
}

#[test]
fn hidden_correlation_reads_channels_last() {
    // Two pixels, two channels: channel 0 = (1, 0), channel 1 = (0, 1).
    let h = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0], Precision::Double).unwrap();
    assert_eq!(hidden_correlation(&h).unwrap(), 0.0);
}

#[test]
fn effective_width_endpoints() {
    assert_eq!(effective_width(1.0, 64), 1.0);
    assert_eq!(effective_width(0.0, 64), 64.0);
    assert!(mean_dissimilarity(&[]).is_err());
    assert!(mean_dissimilarity(&[1.5]).is_err());
}

#[test]
fn perturbation_ratio_of_symmetric_and_antisymmetric_features() {
    let sym = Tensor::full(&[2, 3, 3, 8], 1.3, Precision::Double);
    assert_eq!(perturbation_ratio(&sym).unwrap(), 0.0);
    let anti: Vec<f64> = (0..2 * 8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let anti = Tensor::new(&[2, 8], anti, Precision::Double).unwrap();
    assert!((perturbation_ratio(&anti).unwrap() - 1.0).abs() < 1e-15);
}

fn weight(seed: u64, o: usize, i: usize) -> Tensor {
    gaussian_tensor(&[3, 3, o, i], seed, Precision::Double)
}

fn permute_outputs(w: &Tensor, perm: &[usize]) -> Tensor {
    let s = w.shape().to_vec();
    let mut out = w.clone();
    for a in 0..s[0] {
        for b in 0..s[1] {
            for (o, &p) in perm.iter().enumerate() {
                for i in 0..s[3] {
                    out.set(&[a, b, o, i], w.get(&[a, b, p, i]));
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn correlations_are_scale_invariant(seed in 0u64..1000, scale in 1e-3f64..1e3) {
        let w = weight(seed, 5, 4);
        let ws = w.scale(scale);
        prop_assert!((forward_correlation(&w).unwrap() - forward_correlation(&ws).unwrap()).abs() < 1e-12);
        prop_assert!((backward_correlation(&w).unwrap() - backward_correlation(&ws).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn correlations_are_channel_permutation_invariant(seed in 0u64..1000, rot in 0usize..6) {
        let w = weight(seed, 6, 3);
        let perm: Vec<usize> = (0..6).map(|o| (o * 5 + rot) % 6).collect();
        let wp = permute_outputs(&w, &perm);
        prop_assert!((forward_correlation(&w).unwrap() - forward_correlation(&wp).unwrap()).abs() < 1e-12);
        prop_assert!((backward_correlation(&w).unwrap() - backward_correlation(&wp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn correlations_stay_in_range(seed in 0u64..1000) {
        let w = weight(seed, 4, 4);
        let c = forward_correlation(&w).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        let d = mean_dissimilarity(&[c]).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn orthogonal_rows_give_zero_correlation(seed in 0u64..1000, n in 2usize..9) {
        let q: DMatrix<f64> = haar_orthogonal(n, seed);
        let w = Tensor::new(&[n, n], q.transpose().iter().copied().collect(), Precision::Double).unwrap();
        prop_assert!(forward_correlation(&w).unwrap().abs() < 1e-12);
        prop_assert!(backward_correlation(&w).unwrap().abs() < 1e-12);
    }
}
