//! Capture geometry shared by the camera raster and the receiver grid.
//!
//! Both grids cover the same square footprint centered under the UAV. Row `r`
//! runs along +y and column `c` along +x, so pixel `(i, j)` of an
//! `image_hw`-wide raster and cell `(r, c)` of a `grid_n`-wide receiver grid
//! are related by the ratio `image_hw / grid_n`.

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Full camera field of view used to size the ground footprint.
pub const CAMERA_FOV_DEG: f64 = 60.0;

/// Ground footprint side length for a downward camera at `altitude_m`.
pub fn footprint_extent_m(altitude_m: f64) -> f64 {
    let half_angle = (CAMERA_FOV_DEG / 2.0).to_radians();
    2.0 * altitude_m * libm::tan(half_angle)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureConfig {
    pub altitude_m: f64,
    pub frequency_hz: f64,
    pub grid_n: usize,
    pub image_hw: usize,
    /// UAV position; the transmitter and camera are co-located.
    pub tx: Point3,
    pub fov_extent_m: f64,
}

impl CaptureConfig {
    /// Builds a capture at `(tx_x, tx_y, altitude_m)` using the camera footprint law.
    pub fn new(
        tx_x: f64,
        tx_y: f64,
        altitude_m: f64,
        frequency_hz: f64,
        grid_n: usize,
        image_hw: usize,
    ) -> Result<Self> {
        let cfg = Self {
            altitude_m,
            frequency_hz,
            grid_n,
            image_hw,
            tx: Point3::new(tx_x, tx_y, altitude_m),
            fov_extent_m: footprint_extent_m(altitude_m),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides the footprint side length.
    pub fn with_fov(mut self, fov_extent_m: f64) -> Result<Self> {
        self.fov_extent_m = fov_extent_m;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("altitude_m", self.altitude_m),
            ("frequency_hz", self.frequency_hz),
            ("fov_extent_m", self.fov_extent_m),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite { name });
            }
            if value <= 0.0 {
                return Err(Error::NonPositive { name, value });
            }
        }
        if self.grid_n == 0 {
            return Err(Error::NonPositive { name: "grid_n", value: 0.0 });
        }
        if self.image_hw == 0 {
            return Err(Error::NonPositive { name: "image_hw", value: 0.0 });
        }
        Ok(())
    }

    /// Lower-left corner of the footprint.
    pub fn origin(&self) -> (f64, f64) {
        let half = self.fov_extent_m / 2.0;
        (self.tx.x - half, self.tx.y - half)
    }

    /// Center of cell `(row, col)` when the footprint is split into `n × n` cells.
    pub fn cell_center(&self, n: usize, row: usize, col: usize) -> (f64, f64) {
        let (x0, y0) = self.origin();
        let step = self.fov_extent_m / n as f64;
        (x0 + (col as f64 + 0.5) * step, y0 + (row as f64 + 0.5) * step)
    }

    pub fn receiver_center(&self, row: usize, col: usize) -> Point3 {
        let (x, y) = self.cell_center(self.grid_n, row, col);
        Point3::new(x, y, 0.0)
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        self.cell_center(self.image_hw, row, col)
    }

    /// Whether the footprint lies inside `[0, extent_m]²`.
    pub fn footprint_within(&self, extent_m: f64) -> bool {
        let (x0, y0) = self.origin();
        x0 >= 0.0
            && y0 >= 0.0
            && x0 + self.fov_extent_m <= extent_m
            && y0 + self.fov_extent_m <= extent_m
    }
}
