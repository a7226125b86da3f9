//! Frequency conditioning: band registry, log-scale normalization and the
//! multi-scale sine/cosine value encoding.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

/// Maps 1 GHz..100 GHz onto [0, 1) on a log scale.
pub fn normalize_frequency(frequency_hz: f64) -> f64 {
    libm::log10(frequency_hz / 1e9) / libm::log10(100.0)
}

/// `[sin(2π f·2⁰) … sin(2π f·2^(D-1)), cos(2π f·2⁰) … cos(2π f·2^(D-1))]` with `D = dim / 2`.
pub fn encode_value(f_norm: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Invalid(alloc::format!(
            "encoding width must be even and positive, got {dim}"
        )));
    }
    if !f_norm.is_finite() {
        return Err(Error::NonFinite { name: "f_norm" });
    }
    let bases = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let phases = (0..bases).map(|i| 2.0 * PI * f_norm * libm::ldexp(1.0, i as i32));
    out.extend(phases.clone().map(libm::sin));
    out.extend(phases.map(libm::cos));
    Ok(out)
}

/// `[e_id ‖ e_f]`.
pub fn fuse(e_id: &[f64], e_f: &[f64]) -> Result<Vec<f64>> {
    if e_id.len() != e_f.len() {
        return Err(Error::LengthMismatch {
            expected: e_id.len(),
            actual: e_f.len(),
        });
    }
    let mut out = Vec::with_capacity(e_id.len() * 2);
    out.extend_from_slice(e_id);
    out.extend_from_slice(e_f);
    Ok(out)
}

/// A carrier as seen by the mapper. `band_id` is `None` for a band the
/// model was never registered with (zero-shot use only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyCondition {
    pub band_id: Option<usize>,
    pub frequency_hz: f64,
    pub f_norm: f64,
}

impl FrequencyCondition {
    pub fn new(band_id: Option<usize>, frequency_hz: f64) -> Result<Self> {
        if !frequency_hz.is_finite() {
            return Err(Error::NonFinite { name: "frequency_hz" });
        }
        if frequency_hz <= 0.0 {
            return Err(Error::NonPositive { name: "frequency_hz", value: frequency_hz });
        }
        Ok(Self {
            band_id,
            frequency_hz,
            f_norm: normalize_frequency(frequency_hz),
        })
    }
}

/// Relative tolerance used to match carrier frequencies.
const BAND_MATCH_RTOL: f64 = 1e-9;

/// Ordered list of known carriers; the id of a band is its position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandRegistry {
    bands_hz: Vec<f64>,
}

impl BandRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with ids assigned by ascending frequency; duplicates collapse.
    pub fn from_frequencies(freqs: impl IntoIterator<Item = f64>) -> Self {
        let mut bands: Vec<f64> = freqs.into_iter().collect();
        bands.sort_by(f64::total_cmp);
        bands.dedup_by(|a, b| same_band(*a, *b));
        Self { bands_hz: bands }
    }

    pub fn len(&self) -> usize {
        self.bands_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands_hz.is_empty()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.bands_hz
    }

    pub fn id_of(&self, frequency_hz: f64) -> Option<usize> {
        self.bands_hz.iter().position(|&f| same_band(f, frequency_hz))
    }

    pub fn frequency_of(&self, id: usize) -> Option<f64> {
        self.bands_hz.get(id).copied()
    }

    /// Appends a band if unknown and returns its id.
    pub fn register(&mut self, frequency_hz: f64) -> usize {
        match self.id_of(frequency_hz) {
            Some(id) => id,
            None => {
                self.bands_hz.push(frequency_hz);
                self.bands_hz.len() - 1
            }
        }
    }
}

fn same_band(a: f64, b: f64) -> bool {
    (a - b).abs() <= BAND_MATCH_RTOL * a.abs().max(b.abs())
}
