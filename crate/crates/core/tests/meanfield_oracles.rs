mod common;

use std::f64::consts::PI;

use common::gaussian_pair_expectation;
use nalgebra::Matrix2;
use proptest::prelude::*;
use symbreak::meanfield::{
    map_c, map_c_deriv, map_q, stability_eigenvalues, trajectory, Activation, ActivationMap, MeanFieldState, Quadrature,
};

const ALL: [Activation; 8] = [
    Activation::Relu,
    Activation::LeakyRelu { slope: 0.1 },
    Activation::Tanh,
    Activation::Identity,
    Activation::Step,
    Activation::LeakyStep { slope: 0.1 },
    Activation::TanhPrime,
    Activation::Unit,
];

/// Normalised ReLU correlation map in closed form (first-order arc-cosine kernel).
fn relu_map(c: f64) -> f64 {
    ((1.0 - c * c).sqrt() + (PI - c.acos()) * c) / PI
}

/// Normalised step-function correlation map (zeroth-order arc-cosine kernel).
fn step_map(c: f64) -> f64 {
    (PI - c.acos()) / PI
}

#[test]
fn relu_variance_map_at_one_is_half() {
    let m = ActivationMap::gauss(Activation::Relu);
    assert!((map_q(&m, 1.0).unwrap() - 0.5).abs() < 1e-6);
}

#[test]
fn relu_correlation_map_at_zero_is_one_over_pi() {
    let gauss = map_c(&ActivationMap::gauss(Activation::Relu), 0.0, 1.0).unwrap();
    let mc = ActivationMap::new(
        Activation::Relu,
        Quadrature::MonteCarlo {
            samples: 400_000,
            seed: 5,
        },
    )
    .unwrap();
    let mc = map_c(&mc, 0.0, 1.0).unwrap();
    let grid = gaussian_pair_expectation(|x| x.max(0.0), 0.0) / 0.5;
    for v in [gauss, mc, grid] {
        assert!((v - 1.0 / PI).abs() < 1e-4, "{v}");
    }
}

#[test]
fn gauss_rule_matches_arc_cosine_kernels() {
    let relu = ActivationMap::gauss(Activation::Relu);
    let step = ActivationMap::gauss(Activation::Step);
    for i in 0..=40 {
        let c = -1.0 + i as f64 * 0.05;
        assert!(
            (map_c(&relu, c, 1.3).unwrap() - relu_map(c)).abs() < 1e-10,
            "relu at {c}"
        );
        assert!(
            (map_c(&step, c, 0.7).unwrap() - step_map(c)).abs() < 1e-10,
            "step at {c}"
        );
    }
}

#[test]
fn gauss_rule_matches_grid_for_tanh() {
    let m = ActivationMap::gauss(Activation::Tanh);
    let den = gaussian_pair_expectation(f64::tanh, 1.0 - 1e-12);
    for c in [-0.6, 0.0, 0.5, 0.9] {
        let want = gaussian_pair_expectation(f64::tanh, c) / den;
        assert!((map_c(&m, c, 1.0).unwrap() - want).abs() < 1e-6, "tanh at {c}");
    }
}

#[test]
fn correlation_map_is_one_at_one_for_every_activation() {
    for phi in ALL {
        for q in [0.3, 1.0, 2.5] {
            let v = map_c(&ActivationMap::gauss(phi), 1.0, q).unwrap();
            assert!((v - 1.0).abs() < 1e-9, "{phi:?} q={q}: {v}");
        }
    }
}

#[test]
fn monte_carlo_agrees_with_gauss_rule() {
    for phi in ALL {
        let g = ActivationMap::gauss(phi);
        let mc = ActivationMap::new(
            phi,
            Quadrature::MonteCarlo {
                samples: 1_000_000,
                seed: 11,
            },
        )
        .unwrap();
        for c in [-0.8, -0.3, 0.0, 0.4, 0.9, 0.999] {
            let (a, b) = (map_c(&g, c, 1.0).unwrap(), map_c(&mc, c, 1.0).unwrap());
            assert!((a - b).abs() < 1e-3, "{phi:?} c={c}: gauss {a} mc {b}");
        }
        let (a, b) = (map_q(&g, 1.4).unwrap(), map_q(&mc, 1.4).unwrap());
        assert!((a - b).abs() < 1e-3 * a.abs().max(1.0), "{phi:?} q: {a} {b}");
    }
}

#[test]
fn relu_fixed_point_value() {
    let e = stability_eigenvalues(1, 1.0, 1.0, 1.0, 1.0).unwrap();
    for t in [1u64, 10, 100] {
        let e = stability_eigenvalues(t, 1.0, 1.0, 1.0, 1.0).unwrap();
        let want = 1.0 + (1.25f64.sqrt() - 0.5) / t as f64;
        assert!((e.lambda1 - want).abs() < 1e-12);
    }
    assert!(!e.complex);
}

#[test]
fn relu_trajectories_leave_the_symmetric_point() {
    let m = ActivationMap::gauss(Activation::Relu);
    for eps in [1e-3, 1e-4, 1e-5] {
        let traj = trajectory(&MeanFieldState::new(1.0 - eps, 1.0 - eps, 1.0, 1.0, 0.1), &m, 100).unwrap();
        for w in traj.windows(2) {
            assert!(w[1].c_f < w[0].c_f, "eps {eps}: {} -> {}", w[0].c_f, w[1].c_f);
        }
    }
}

#[test]
fn slopes_of_relu_map_match_closed_form() {
    let m = ActivationMap::gauss(Activation::Relu);
    let c: f64 = 0.3;
    let s = map_c_deriv(&m, c, 1.0).unwrap();
    // d/dc relu_map = (pi - acos c) / pi = step_map.
    assert!((s.m_b_prime - step_map(c)).abs() < 1e-8);
    // Step map derivative: 1 / (pi sqrt(1 - c^2)).
    assert!((s.m_f_prime - 1.0 / (PI * (1.0 - c * c).sqrt())).abs() < 1e-6);
    assert!(!s.one_sided);
}

/// Eigenvalues of the 2x2 Jacobian by nalgebra's general solver.
fn oracle_lambda1(j: [[f64; 2]; 2]) -> (f64, bool) {
    let m = Matrix2::new(j[0][0], j[0][1], j[1][0], j[1][1]);
    let ev = m.complex_eigenvalues();
    let complex = ev.iter().any(|z| z.im.abs() > 1e-12);
    let lam = if complex {
        ev[0].norm()
    } else {
        ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    };
    (lam, complex)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn eigenvalues_match_generic_solver(
        t in 1u64..200,
        c_b in -1.0f64..1.0,
        m_f in -2.0f64..2.0,
        m_fp in -3.0f64..3.0,
        m_bp in -3.0f64..3.0,
    ) {
        let e = stability_eigenvalues(t, c_b, m_f, m_fp, m_bp).unwrap();
        let (lam, complex) = oracle_lambda1(e.jacobian);
        // Near-degenerate pairs can flip between real and complex.
        if complex == e.complex {
            prop_assert!((e.lambda1 - lam).abs() < 1e-10, "{} vs {}", e.lambda1, lam);
        }
        // Independent check against the characteristic quadratic.
        let j = e.jacobian;
        let (tr, det) = (j[0][0] + j[1][1], j[0][0] * j[1][1] - j[0][1] * j[1][0]);
        if !e.complex {
            prop_assert!((e.lambda1 * e.lambda1 - tr * e.lambda1 + det).abs() < 1e-12 * (1.0 + e.lambda1 * e.lambda1));
            prop_assert!((e.lambda1 + e.lambda2 - tr).abs() < 1e-12 * (1.0 + tr.abs()));
        } else {
            prop_assert!((e.lambda1 * e.lambda1 - det).abs() < 1e-12 * (1.0 + det.abs()));
        }
    }

    #[test]
    fn relu_map_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, q in 0.1f64..4.0) {
        let m = ActivationMap::gauss(Activation::Relu);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(map_c(&m, lo, q).unwrap() < map_c(&m, hi, q).unwrap());
    }

    #[test]
    fn tanh_map_is_monotone_and_bounded(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let m = ActivationMap::gauss(Activation::Tanh);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let (x, y) = (map_c(&m, lo, 1.0).unwrap(), map_c(&m, hi, 1.0).unwrap());
        prop_assert!(x < y);
        prop_assert!((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y));
    }

    #[test]
    fn variance_map_is_homogeneous_for_relu(q in 0.01f64..10.0) {
        let m = ActivationMap::gauss(Activation::Relu);
        prop_assert!((map_q(&m, q).unwrap() - 0.5 * q).abs() < 1e-12 * q.max(1.0));
    }
}
