//! Ground-truth pathloss: free-space loss plus a fixed penalty per building
//! crossed by the direct Tx–Rx segment.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::capture::CaptureConfig;
use crate::error::{Error, Result};
use crate::scene::SceneSpec;
use crate::SPEED_OF_LIGHT;

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite { name });
    }
    if value <= 0.0 {
        return Err(Error::NonPositive { name, value });
    }
    Ok(())
}

/// `20·log10(4π·d·f / c)` in dB.
pub fn free_space_pathloss_db(distance_m: f64, frequency_hz: f64) -> Result<f64> {
    check_positive("distance_m", distance_m)?;
    check_positive("frequency_hz", frequency_hz)?;
    Ok(20.0 * libm::log10(4.0 * PI * distance_m * frequency_hz / SPEED_OF_LIGHT))
}

/// Loss added per obstructing building: `10 + 5·log10(f / 1 GHz)` dB.
pub fn penetration_loss_db(frequency_hz: f64) -> Result<f64> {
    check_positive("frequency_hz", frequency_hz)?;
    Ok(10.0 + 5.0 * libm::log10(frequency_hz / 1e9))
}

/// Number of buildings whose box touches the segment from the UAV to receiver cell `(row, col)`.
pub fn blocked_count(scene: &SceneSpec, cfg: &CaptureConfig, row: usize, col: usize) -> usize {
    let rx = cfg.receiver_center(row, col);
    scene
        .buildings
        .iter()
        .filter(|b| b.aabb().intersects_segment(&cfg.tx, &rx))
        .count()
}

/// Row-major `grid_n × grid_n` pathloss map in dB.
pub fn render_pathloss_map(scene: &SceneSpec, cfg: &CaptureConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let penalty = penetration_loss_db(cfg.frequency_hz)?;
    let n = cfg.grid_n;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let rx = cfg.receiver_center(row, col);
            let los = free_space_pathloss_db(cfg.tx.distance(&rx), cfg.frequency_hz)?;
            let blocked = blocked_count(scene, cfg, row, col);
            out.push(los + blocked as f64 * penalty);
        }
    }
    Ok(out)
}
