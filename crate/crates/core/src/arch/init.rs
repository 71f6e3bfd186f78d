use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ArchError, Result};
use crate::tensor::{hash2, Precision, Tensor};

/// Weight initialisation. Weight shapes are `[k, k, C_out, C_in]` for
/// convolutions and `[C_out, C_in]` for dense layers, which are treated as
/// `k = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    Zero,
    /// Gaussian with variance `2 / fan_in`, `fan_in = k * k * C_in`.
    He,
    /// Centre tap `1 / C_in` for every (output, input) pair, zero elsewhere.
    ConstAverage,
    /// Centre tap identity.
    DeltaIdentity,
    /// Centre tap `(1/n) 1 1^T`.
    DeltaOnes,
    /// Centre tap `gamma I + (1 - gamma) (1/n) 1 1^T`.
    LinearMix {
        gamma: f64,
    },
    /// Centre tap `[[U, -U], [-U, U]]` with `U` Haar-orthogonal of size `n/2`.
    DeltaOrthogonal,
    /// Centre tap identity scaled by `1` or, when `odd`, by `-1 / slope`.
    LeakyIdentityPair {
        odd: bool,
        slope: f64,
    },
    /// Output rows `(1 - lambda) W~[i mod k] + lambda W^[i]` with `W~`, `W^` He.
    Replicated {
        k: usize,
        lambda: f64,
    },
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [k, k2, o, i] if k == k2 => Ok((*k, *o, *i)),
        [o, i] => Ok((1, *o, *i)),
        _ => Err(ArchError::InvalidConfig(format!(
            "weight shape {shape:?} is neither [k,k,out,in] nor [out,in]"
        ))),
    }
}

fn square(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    let (k, o, i) = dims(shape)?;
    if o != i {
        return Err(ArchError::InvalidConfig(format!(
            "{what} needs a square channel map, got {o}x{i}"
        )));
    }
    Ok((k, o))
}

/// Fill the centre tap with `m(out, in)`.
fn centre(shape: &[usize], precision: Precision, m: impl Fn(usize, usize) -> f64) -> Result<Tensor> {
    let (k, o, i) = dims(shape)?;
    let mut data = vec![0.0; k * k * o * i];
    let c = k / 2;
    let base = (c * k + c) * o * i;
    for r in 0..o {
        for s in 0..i {
            data[base + r * i + s] = m(r, s);
        }
    }
    Ok(Tensor::new(shape, data, precision)?)
}

fn gaussian(n: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

pub fn init_he(shape: &[usize], seed: u64, precision: Precision) -> Result<Tensor> {
    let (k, _, i) = dims(shape)?;
    let fan_in = (k * k * i) as f64;
    let n = shape.iter().product();
    Ok(Tensor::new(shape, gaussian(n, (2.0 / fan_in).sqrt(), seed), precision)?)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn haar_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let a = DMatrix::from_vec(n, n, gaussian(n * n, 1.0, seed));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn init_tensor(shape: &[usize], scheme: &InitScheme, seed: u64, precision: Precision) -> Result<Tensor> {
    match scheme {
        InitScheme::Zero => {
            dims(shape)?;
            Ok(Tensor::zeros(shape, precision))
        }
        InitScheme::He => init_he(shape, seed, precision),
        InitScheme::ConstAverage => {
            let (_, _, i) = dims(shape)?;
            centre(shape, precision, |_, _| 1.0 / i as f64)
        }
        InitScheme::DeltaIdentity => {
            square(shape, "delta identity")?;
            centre(shape, precision, |r, s| if r == s { 1.0 } else { 0.0 })
        }
        InitScheme::DeltaOnes => {
            let (_, n) = square(shape, "delta ones")?;
            centre(shape, precision, |_, _| 1.0 / n as f64)
        }
        InitScheme::LinearMix { gamma } => {
            let (_, n) = square(shape, "linear mix")?;
            let off = (1.0 - gamma) / n as f64;
            centre(shape, precision, |r, s| if r == s { gamma + off } else { off })
        }
        InitScheme::DeltaOrthogonal => {
            let (_, n) = square(shape, "delta orthogonal")?;
            if n % 2 != 0 {
                return Err(ArchError::InvalidConfig(format!(
                    "delta orthogonal needs an even width, got {n}"
                )));
            }
            let h = n / 2;
            let u = haar_orthogonal(h, seed);
            centre(shape, precision, |r, s| {
                let v = u[(r % h, s % h)];
                if (r < h) == (s < h) {
                    v
                } else {
                    -v
                }
            })
        }
        InitScheme::LeakyIdentityPair { odd, slope } => {
            square(shape, "leaky identity pair")?;
            let scale = if *odd { -1.0 / slope } else { 1.0 };
            centre(shape, precision, |r, s| if r == s { scale } else { 0.0 })
        }
        InitScheme::Replicated { k: reps, lambda } => {
            let (k, o, i) = dims(shape)?;
            if *reps == 0 || *reps > o {
                return Err(ArchError::InvalidConfig(format!(
                    "replication count {reps} must be in 1..={o}"
                )));
            }
            let base = init_he(shape, hash2(seed, 1), Precision::Double)?;
            let noise = init_he(shape, hash2(seed, 2), Precision::Double)?;
            let mut data = vec![0.0; shape.iter().product()];
            for tap in 0..k * k {
                for r in 0..o {
                    for s in 0..i {
                        let at = |row: usize| (tap * o + row) * i + s;
                        data[at(r)] = (1.0 - lambda) * base.data()[at(r % reps)] + lambda * noise.data()[at(r)];
                    }
                }
            }
            Ok(Tensor::new(shape, data, precision)?)
        }
    }
}
