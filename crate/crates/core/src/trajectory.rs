//! Constant-speed UAV paths. Only the horizontal projection is defined here,
//! so every flight altitude of a scenario reuses the same `(x, y)` sequence.

use alloc::vec::Vec;

use crate::capture::footprint_extent_m;
use crate::scene::Scenario;

/// Polyline vertices as fractions of the world extent.
fn waypoints(scenario: Scenario) -> &'static [(f64, f64)] {
    match scenario {
        // along the east-west road, then turn north at the intersection
        Scenario::Crossroad => &[(0.25, 0.5), (0.5, 0.5), (0.5, 0.75)],
        Scenario::WideLane => &[(0.25, 0.5), (0.75, 0.5)],
    }
}

/// World extent that keeps every footprint of a flight at `max_altitude_m` inside the world.
pub fn required_extent_m(max_altitude_m: f64) -> f64 {
    const MIN_EXTENT_M: f64 = 200.0;
    // the path stays 0.25·extent away from the border
    let needed = 2.0 * footprint_extent_m(max_altitude_m) * 1.05;
    libm::ceil(needed.max(MIN_EXTENT_M) / 10.0) * 10.0
}

/// `n` equally spaced positions along the scenario's path.
pub fn tx_positions(scenario: Scenario, extent_m: f64, n: usize) -> Vec<(f64, f64)> {
    let pts: Vec<(f64, f64)> = waypoints(scenario)
        .iter()
        .map(|&(u, v)| (u * extent_m, v * extent_m))
        .collect();
    let seg_len: Vec<f64> = pts
        .windows(2)
        .map(|w| libm::hypot(w[1].0 - w[0].0, w[1].1 - w[0].1))
        .collect();
    let total: f64 = seg_len.iter().sum();
    (0..n)
        .map(|k| {
            let s = if n > 1 { total * k as f64 / (n - 1) as f64 } else { 0.0 };
            point_at(&pts, &seg_len, s)
        })
        .collect()
}

fn point_at(pts: &[(f64, f64)], seg_len: &[f64], mut s: f64) -> (f64, f64) {
    for (i, &len) in seg_len.iter().enumerate() {
        if s <= len || i + 1 == seg_len.len() {
            let t = if len > 0.0 { (s / len).min(1.0) } else { 0.0 };
            let (a, b) = (pts[i], pts[i + 1]);
            return (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        }
        s -= len;
    }
    pts[0]
}
