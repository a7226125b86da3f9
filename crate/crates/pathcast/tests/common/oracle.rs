//! Brute-force pathloss renderer written independently of the library.

use pathcast_core::{CaptureConfig, SceneSpec};

const C: f64 = 299_792_458.0;

/// Separating-axis test between the segment p→q and a closed box.
fn segment_hits_box(p: [f64; 3], q: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> bool {
    let h: Vec<f64> = (0..3).map(|k| (q[k] - p[k]) / 2.0).collect();
    let e: Vec<f64> = (0..3).map(|k| (hi[k] - lo[k]) / 2.0).collect();
    let d: Vec<f64> = (0..3).map(|k| (p[k] + q[k]) / 2.0 - (lo[k] + hi[k]) / 2.0).collect();
    for k in 0..3 {
        if d[k].abs() > e[k] + h[k].abs() {
            return false;
        }
    }
    let axes = [(1, 2), (2, 0), (0, 1)];
    for (a, b) in axes {
        if (d[a] * h[b] - d[b] * h[a]).abs() > e[a] * h[b].abs() + e[b] * h[a].abs() {
            return false;
        }
    }
    true
}

pub fn render(scene: &SceneSpec, cfg: &CaptureConfig) -> Vec<f64> {
    let n = cfg.grid_n;
    let cell = cfg.fov_extent_m / n as f64;
    let x0 = cfg.tx.x - cfg.fov_extent_m / 2.0;
    let y0 = cfg.tx.y - cfg.fov_extent_m / 2.0;
    let f = cfg.frequency_hz;
    let pen = 10.0 + 5.0 * (f / 1e9).log10();
    let tx = [cfg.tx.x, cfg.tx.y, cfg.tx.z];
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let rx = [x0 + (c as f64 + 0.5) * cell, y0 + (r as f64 + 0.5) * cell, 0.0];
            let d = ((tx[0] - rx[0]).powi(2) + (tx[1] - rx[1]).powi(2) + (tx[2] - rx[2]).powi(2)).sqrt();
            let fspl = 20.0 * (4.0 * std::f64::consts::PI * d * f / C).log10();
            let blocked = scene
                .buildings
                .iter()
                .filter(|b| {
                    segment_hits_box(
                        tx,
                        rx,
                        [b.x_min, b.y_min, 0.0],
                        [b.x_max, b.y_max, b.height],
                    )
                })
                .count();
            out.push(fspl + blocked as f64 * pen);
        }
    }
    out
}
