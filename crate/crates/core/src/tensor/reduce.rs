use serde::{Deserialize, Serialize};

use super::Precision;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine two keys into one. Order matters.
#[inline]
pub fn hash2(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b.wrapping_add(GOLDEN)))
}

/// Counter-based generator: the n-th output depends only on (key, n).
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform integer in `0..n` (multiply-shift).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReductionMode {
    /// Left-to-right accumulation.
    Ordered,
    /// Accumulate in a permutation drawn from `seed` and the call's stream key.
    Shuffled { seed: u64 },
}

/// How a sum of many terms is accumulated.
///
/// In shuffled mode the permutation for an entry is a pure function of
/// `(seed, stream, entry)`. Callers derive a fresh stream for each logical
/// call (step, layer, pass) with [`ReductionPolicy::keyed`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReductionPolicy {
    pub mode: ReductionMode,
    pub precision: Precision,
    stream: u64,
}

impl ReductionPolicy {
    pub fn new(mode: ReductionMode, precision: Precision) -> Self {
        Self {
            mode,
            precision,
            stream: 0,
        }
    }

    pub fn ordered(precision: Precision) -> Self {
        Self::new(ReductionMode::Ordered, precision)
    }

    pub fn shuffled(seed: u64, precision: Precision) -> Self {
        Self::new(ReductionMode::Shuffled { seed }, precision)
    }

    /// Policy for a sub-call identified by `key`.
    pub fn keyed(self, key: u64) -> Self {
        Self {
            stream: hash2(self.stream, key),
            ..self
        }
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn is_ordered(&self) -> bool {
        matches!(self.mode, ReductionMode::Ordered)
    }

    /// Permutation generator for output entry `entry`, or `None` when ordered.
    #[inline]
    pub(crate) fn entry_rng(&self, entry: u64) -> Option<CounterRng> {
        match self.mode {
            ReductionMode::Ordered => None,
            ReductionMode::Shuffled { seed } => Some(CounterRng::new(hash2(hash2(seed, self.stream), entry))),
        }
    }

    /// Sum `terms` for output entry `entry`. Shuffles `terms` in place when
    /// the mode is shuffled.
    #[inline]
    pub(crate) fn sum_terms(&self, terms: &mut [f64], entry: u64) -> f64 {
        if let Some(mut rng) = self.entry_rng(entry) {
            for i in (1..terms.len()).rev() {
                let j = rng.below(i + 1);
                terms.swap(i, j);
            }
        }
        let p = self.precision;
        let mut acc = 0.0;
        for &t in terms.iter() {
            acc = p.round(acc + t);
        }
        acc
    }
}

/// Sum of `values` under `policy`. Each partial sum is rounded to the
/// policy precision.
pub fn reduce_sum(values: &[f64], policy: &ReductionPolicy) -> f64 {
    let mut terms: Vec<f64> = values.iter().map(|&v| policy.precision.round(v)).collect();
    policy.sum_terms(&mut terms, 0)
}
