//! Orthographic top-down painting of a scene into an 8-bit RGB raster.

use alloc::vec::Vec;

use crate::capture::CaptureConfig;
use crate::error::Result;
use crate::scene::{SceneSpec, GROUND_ALBEDO, ROAD_ALBEDO};

fn to_u8(a: f64) -> u8 {
    libm::round(a.clamp(0.0, 1.0) * 255.0) as u8
}

pub fn albedo_to_rgb8(albedo: [f64; 3]) -> [u8; 3] {
    [to_u8(albedo[0]), to_u8(albedo[1]), to_u8(albedo[2])]
}

/// Albedo seen from above at ground point `(x, y)`.
pub fn albedo_at(scene: &SceneSpec, x: f64, y: f64) -> [f64; 3] {
    if let Some(b) = scene.building_at(x, y) {
        b.albedo_rgb
    } else if scene.is_road(x, y) {
        ROAD_ALBEDO
    } else {
        GROUND_ALBEDO
    }
}

/// Row-major `image_hw × image_hw × 3` raster, sampled at pixel centers.
pub fn render_scene_raster(scene: &SceneSpec, cfg: &CaptureConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let n = cfg.image_hw;
    let mut out = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = cfg.pixel_center(row, col);
            out.extend_from_slice(&albedo_to_rgb8(albedo_at(scene, x, y)));
        }
    }
    Ok(out)
}
