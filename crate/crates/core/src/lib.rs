//! Pure algorithms behind `pathcast`: procedural urban scenes, the free-space
//! plus occlusion pathloss renderer, top-down scene rasters, frequency
//! conditioning, nearest-codeword quantization, Top-2 routing and NMSE.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is
//! deterministic; randomness is always driven by an explicit seed.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod capture;
pub mod error;
pub mod freq;
pub mod geometry;
pub mod metrics;
pub mod pixel;
pub mod propagation;
pub mod quantize;
pub mod raster;
pub mod routing;
pub mod scene;
pub mod split;
pub mod trajectory;

pub use capture::CaptureConfig;
pub use error::{Error, Result};
pub use freq::FrequencyCondition;
pub use routing::RoutingDecision;
pub use scene::{Building, Corridor, Scenario, SceneSpec};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
