//! Top-2 expert selection for the shared-routed mixture of experts.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Experts activated per sample.
pub const TOP_K: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Selected experts, highest logit first.
    pub selected: [usize; TOP_K],
    /// Softmax over the selected logits, same order as `selected`.
    pub weights: [f64; TOP_K],
    pub logits: Vec<f64>,
}

impl RoutingDecision {
    /// Weight of expert `j`, zero when it is not selected.
    pub fn weight_of(&self, j: usize) -> f64 {
        self.selected
            .iter()
            .zip(self.weights)
            .find(|(s, _)| **s == j)
            .map_or(0.0, |(_, w)| w)
    }
}

/// Indices of the two largest logits, larger first; equal logits prefer the lower index.
pub fn top2_indices(logits: &[f64]) -> Result<[usize; TOP_K]> {
    if logits.len() < TOP_K {
        return Err(Error::Invalid(alloc::format!(
            "top-{TOP_K} routing needs at least {TOP_K} experts, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "gate logits" });
    }
    let mut first = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[first] {
            first = i;
        }
    }
    let mut second = usize::MAX;
    for (i, &v) in logits.iter().enumerate() {
        if i != first && (second == usize::MAX || v > logits[second]) {
            second = i;
        }
    }
    Ok([first, second])
}

pub fn route(logits: &[f64]) -> Result<RoutingDecision> {
    let selected = top2_indices(logits)?;
    let (a, b) = (logits[selected[0]], logits[selected[1]]);
    // a >= b, so exp(b - a) <= 1
    let e = libm::exp(b - a);
    let weights = [1.0 / (1.0 + e), e / (1.0 + e)];
    Ok(RoutingDecision {
        selected,
        weights,
        logits: logits.to_vec(),
    })
}
