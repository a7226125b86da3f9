//! Normalized mean squared error over sets of pathloss maps.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nmse {
    /// `Σᵢ‖P̂ᵢ − Pᵢ‖² / Σᵢ‖Pᵢ‖²`
    pub pooled: f64,
    /// `(1/N) Σᵢ ‖P̂ᵢ − Pᵢ‖² / ‖Pᵢ‖²`
    pub mean_of_ratios: f64,
}

impl Nmse {
    pub fn pooled_db(&self) -> f64 {
        10.0 * libm::log10(self.pooled)
    }
}

/// Accumulates squared-error and energy sums map by map.
#[derive(Debug, Clone, Default)]
pub struct NmseAccumulator {
    err_sum: f64,
    energy_sum: f64,
    ratio_sum: f64,
    count: usize,
}

impl NmseAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pred: &[f64], truth: &[f64]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::LengthMismatch {
                expected: truth.len(),
                actual: pred.len(),
            });
        }
        let err: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
        let energy: f64 = truth.iter().map(|t| t * t).sum();
        if energy == 0.0 {
            return Err(Error::Invalid("truth map is all zeros".into()));
        }
        if !err.is_finite() || !energy.is_finite() {
            return Err(Error::NonFinite { name: "pathloss map" });
        }
        self.err_sum += err;
        self.energy_sum += energy;
        self.ratio_sum += err / energy;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Nmse> {
        if self.count == 0 {
            return Err(Error::Invalid("no maps to score".into()));
        }
        Ok(Nmse {
            pooled: self.err_sum / self.energy_sum,
            mean_of_ratios: self.ratio_sum / self.count as f64,
        })
    }
}

pub fn nmse<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], truths: &[T]) -> Result<Nmse> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            expected: truths.len(),
            actual: preds.len(),
        });
    }
    let mut acc = NmseAccumulator::new();
    for (p, t) in preds.iter().zip(truths) {
        acc.push(p.as_ref(), t.as_ref())?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn exact_match_is_zero() {
        let p = vec![vec![1.0, 2.0, 3.0]];
        let r = nmse(&p, &p).unwrap();
        assert_eq!((r.pooled, r.mean_of_ratios), (0.0, 0.0));
    }

    #[test]
    fn ten_percent_offset() {
        let r = nmse(&[vec![1.1; 4]], &[vec![1.0; 4]]).unwrap();
        assert!((r.pooled - 0.01).abs() < 1e-12);
        assert!((r.mean_of_ratios - 0.01).abs() < 1e-12);
    }

    #[test]
    fn equal_norm_pair() {
        // ratios 0.01 and 0.04 on unit-energy maps
        let truths = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let preds = vec![vec![1.1, 0.0], vec![0.0, 1.2]];
        let r = nmse(&preds, &truths).unwrap();
        assert!((r.pooled - 0.025).abs() < 1e-12);
        assert!((r.mean_of_ratios - 0.025).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(nmse(&[vec![1.0]], &[vec![0.0]]).is_err());
        assert!(nmse(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
        assert!(nmse::<Vec<f64>, Vec<f64>>(&[], &[]).is_err());
    }

    fn scaled_to_norm(v: &[f64], norm: f64) -> Vec<f64> {
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        v.iter().map(|x| x * norm / n).collect()
    }

    proptest! {
        #[test]
        fn pooled_equals_mean_for_equal_norms(
            maps in proptest::collection::vec(
                (proptest::collection::vec(0.5f64..2.0, 6), proptest::collection::vec(-0.3f64..0.3, 6)),
                1..8,
            ),
        ) {
            let truths: Vec<Vec<f64>> = maps.iter().map(|(t, _)| scaled_to_norm(t, 3.0)).collect();
            let preds: Vec<Vec<f64>> = truths
                .iter()
                .zip(&maps)
                .map(|(t, (_, e))| t.iter().zip(e).map(|(a, b)| a + b).collect())
                .collect();
            let r = nmse(&preds, &truths).unwrap();
            prop_assert!((r.pooled - r.mean_of_ratios).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariant(
            maps in proptest::collection::vec(
                (proptest::collection::vec(0.5f64..2.0, 4), proptest::collection::vec(0.5f64..2.0, 4)),
                2..8,
            ),
            rot in 0usize..8,
        ) {
            let (p, t): (Vec<Vec<f64>>, Vec<Vec<f64>>) = maps.iter().cloned().unzip();
            let a = nmse(&p, &t).unwrap();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            p2.rotate_left(k);
            t2.rotate_left(k);
            let b = nmse(&p2, &t2).unwrap();
            prop_assert!((a.pooled - b.pooled).abs() <= 1e-12 * a.pooled.max(1.0));
            prop_assert!((a.mean_of_ratios - b.mean_of_ratios).abs() <= 1e-12 * a.mean_of_ratios.max(1.0));
        }
    }
}
