use super::{NnError, Result};
use crate::tensor::{hash2, CounterRng, Tensor};

/// Inverted-dropout multipliers: `0` for dropped elements and `1 / (1 - rate)`
/// otherwise. Element `i` depends only on `(seed, step, layer, i)`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64, step: u64, layer: u64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    let key = hash2(hash2(hash2(seed, 0x64726f70), step), layer);
    let mut rng = CounterRng::new(key);
    (0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

pub fn apply_dropout(t: &Tensor, rate: f64, seed: u64, step: u64, layer: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::InvalidRate(rate));
    }
    let p = t.precision();
    let mask = dropout_mask(t.len(), rate, seed, step, layer);
    let mut out = t.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v = p.round(*v * m);
    }
    Ok(out)
}
