use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::{FiniteAboveNegOneF64, GaussLaguerre, GaussLegendre};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// How Gaussian expectations are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quadrature {
    /// Deterministic Gauss rule with `order` nodes per dimension.
    ///
    /// Bivariate expectations are written in polar coordinates of the
    /// whitened pair: Gauss–Laguerre in `r^2 / 2` and Gauss–Legendre in the
    /// angle, with the angular range split at every direction where either
    /// argument changes sign. Piecewise-linear activations and their step
    /// derivatives are then integrated exactly, and the rule stays accurate
    /// as the correlation approaches ±1.
    #[serde(alias = "gauss_hermite")]
    Gauss {
        order: usize,
    },
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::Gauss { order: 32 }
    }
}

struct Rules {
    /// Nodes and weights on [-1, 1].
    legendre: Vec<(f64, f64)>,
    /// Nodes and weights for `e^{-t}` on [0, inf).
    laguerre: Vec<(f64, f64)>,
}

fn rules(order: usize) -> Arc<Rules> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Rules>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("quadrature cache");
    map.entry(order)
        .or_insert_with(|| {
            let n = NonZeroUsize::new(order).expect("positive order");
            let leg = GaussLegendre::new(n);
            let lag = GaussLaguerre::new(n, FiniteAboveNegOneF64::new(0.0).expect("alpha"));
            Arc::new(Rules {
                legendre: leg.as_node_weight_pairs().to_vec(),
                laguerre: lag.as_node_weight_pairs().to_vec(),
            })
        })
        .clone()
}

/// `E[f(x1) g(x2)]` for zero-mean Gaussians with variance `q` and
/// correlation `c`. Both functions may only be non-smooth at 0.
pub(crate) fn bivariate(quad: Quadrature, q: f64, c: f64, f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> f64 {
    let sq = q.sqrt();
    let s = (1.0 - c * c).max(0.0).sqrt();
    match quad {
        Quadrature::Gauss { order } => {
            let r = rules(order);
            // Directions where x1 = 0 and where x2 = c u + s v = 0.
            let a2 = s.atan2(c);
            let mut breaks: Vec<f64> = [FRAC_PI_2, 3.0 * FRAC_PI_2, a2 + FRAC_PI_2, a2 - FRAC_PI_2]
                .iter()
                .map(|t| t.rem_euclid(TAU))
                .collect();
            breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
            let mut total = 0.0;
            for i in 0..breaks.len() {
                let lo = breaks[i];
                let hi = if i + 1 < breaks.len() {
                    breaks[i + 1]
                } else {
                    breaks[0] + TAU
                };
                let half = 0.5 * (hi - lo);
                if half <= 0.0 {
                    continue;
                }
                let mid = 0.5 * (hi + lo);
                let mut sector = 0.0;
                for &(x, w) in &r.legendre {
                    let th = mid + half * x;
                    let (sin, cos) = th.sin_cos();
                    let dir2 = c * cos + s * sin;
                    let mut radial = 0.0;
                    for &(t, wt) in &r.laguerre {
                        let rad = sq * (2.0 * t).sqrt();
                        radial += wt * f(rad * cos) * g(rad * dir2);
                    }
                    sector += w * radial;
                }
                total += half * sector;
            }
            total / TAU
        }
        Quadrature::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sgn = |x: f64| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            };
            // Control variates with closed-form Gaussian expectations.
            let cc = c.clamp(-1.0, 1.0);
            let two_over_pi = std::f64::consts::FRAC_2_PI;
            let means = [
                q * c,
                two_over_pi * cc.asin(),
                c * (two_over_pi * q).sqrt(),
                c * (two_over_pi * q).sqrt(),
                two_over_pi * q * (s + cc * cc.asin()),
                0.0,
                0.0,
                0.0,
                0.0,
            ];
            let mut ys = Vec::with_capacity(samples);
            let mut hs = Vec::with_capacity(samples);
            for _ in 0..samples {
                let u: f64 = StandardNormal.sample(&mut rng);
                let v: f64 = StandardNormal.sample(&mut rng);
                let (x1, x2) = (sq * u, sq * (c * u + s * v));
                let (s1, s2) = (sgn(x1), sgn(x2));
                ys.push(f(x1) * g(x2));
                hs.push([
                    x1 * x2,
                    s1 * s2,
                    x1 * s2,
                    s1 * x2,
                    x1.abs() * x2.abs(),
                    x1 * x2.abs(),
                    x1.abs() * x2,
                    s1,
                    s2,
                ]);
            }
            control_variate_mean(&ys, &hs, &means)
        }
    }
}

/// Sample mean of `ys` corrected by least-squares control variates `hs`
/// whose true means are `means`.
fn control_variate_mean<const K: usize>(ys: &[f64], hs: &[[f64; K]], means: &[f64; K]) -> f64 {
    let n = ys.len() as f64;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut hbar = [0.0; K];
    for h in hs {
        for k in 0..K {
            hbar[k] += h[k] / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(K, K);
    let mut cross = DVector::<f64>::zeros(K);
    for (y, h) in ys.iter().zip(hs) {
        for a in 0..K {
            let da = h[a] - hbar[a];
            cross[a] += da * (y - ybar);
            for b in 0..K {
                cov[(a, b)] += da * (h[b] - hbar[b]);
            }
        }
    }
    // Pseudo-inverse: some controls coincide at c = ±1.
    let beta = cov
        .svd(true, true)
        .solve(&cross, 1e-12 * n)
        .expect("svd with both factors");
    ybar - (0..K).map(|k| beta[k] * (hbar[k] - means[k])).sum::<f64>()
}

/// `E[f(x)]` for `x ~ N(0, q)`.
pub(crate) fn univariate(quad: Quadrature, q: f64, f: impl Fn(f64) -> f64) -> f64 {
    bivariate(quad, q, 1.0, f, |_| 1.0)
}
