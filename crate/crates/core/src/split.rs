//! Deterministic train/test partitioning and few-shot subset selection.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TEST_FRACTION: f64 = 0.2;

/// Few-shot fractions mirroring the reported sample budgets.
pub const FEWSHOT_FRACTIONS: [f64; 4] = [0.011, 0.027, 0.109, 0.273];

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Snapshot indices (out of `0..n`) held out for testing: the
/// `round(test_fraction·n)` indices with the smallest hash, sorted. With
/// `n ≥ 2` both sides are non-empty. The same snapshots are held out for
/// every condition with the same snapshot count.
pub fn test_snapshots(n: usize, test_fraction: f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut k = libm::round(test_fraction * n as f64) as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    } else {
        k = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(i as u64), i));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}

/// `ceil(fraction·n)`, guarding against representation error just above an integer.
pub fn fewshot_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(alloc::format!(
            "few-shot fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let k = libm::ceil(fraction * n as f64 - 1e-9) as usize;
    if k == 0 {
        return Err(Error::Invalid(alloc::format!(
            "few-shot fraction {fraction} of {n} samples selects nothing"
        )));
    }
    Ok(k.min(n))
}

/// Seeded subset of `candidates` of size `fewshot_count`, returned in input order.
pub fn select_fewshot<T: Clone>(candidates: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    let k = fewshot_count(candidates.len(), fraction)?;
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| candidates[i].clone()).collect())
}
