//! Procedural urban scenes: building boxes laid out on a lot grid around
//! one or two road corridors.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point3};

/// Width of each of the two crossing corridors in a crossroad scene, meters.
pub const CROSSROAD_ROAD_WIDTH_M: f64 = 12.0;
/// Width of the single corridor in a wide-lane scene, meters.
pub const WIDE_LANE_ROAD_WIDTH_M: f64 = 30.0;
/// Side length of the square building lots.
pub const LOT_PITCH_M: f64 = 25.0;
pub const MIN_BUILDING_HEIGHT_M: f64 = 8.0;
pub const MAX_BUILDING_HEIGHT_M: f64 = 40.0;
const LOT_OCCUPANCY: f64 = 0.75;
const LOT_MARGIN_M: (f64, f64) = (2.0, 6.0);
const ROAD_CLEARANCE_M: f64 = 1.0;

pub const GROUND_ALBEDO: [f64; 3] = [0.36, 0.44, 0.30];
pub const ROAD_ALBEDO: [f64; 3] = [0.20, 0.20, 0.22];
pub const ROOF_ALBEDO: [f64; 3] = [0.86, 0.78, 0.68];
const ROOF_TINT_JITTER: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Crossroad,
    WideLane,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::Crossroad, Scenario::WideLane];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Crossroad => "crossroad",
            Scenario::WideLane => "wide_lane",
        }
    }

    pub fn road_width_m(&self) -> f64 {
        match self {
            Scenario::Crossroad => CROSSROAD_ROAD_WIDTH_M,
            Scenario::WideLane => WIDE_LANE_ROAD_WIDTH_M,
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Scenario::Crossroad => 0x6372_6f73_7372_6f61,
            Scenario::WideLane => 0x7769_6465_6c61_6e65,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossroad" => Ok(Scenario::Crossroad),
            "wide_lane" => Ok(Scenario::WideLane),
            other => Err(Error::Invalid(alloc::format!("unknown scenario `{other}`"))),
        }
    }
}

/// Axis-aligned rectangle on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corridor {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Corridor {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).min(self.y_max - self.y_min)
    }

    fn overlaps(&self, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> bool {
        x_min <= self.x_max && x_max >= self.x_min && y_min <= self.y_max && y_max >= self.y_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub height: f64,
    pub albedo_rgb: [f64; 3],
}

impl Building {
    /// Solid box from the ground up to the roof.
    pub fn aabb(&self) -> Aabb {
        Aabb::new(
            Point3::new(self.x_min, self.y_min, 0.0),
            Point3::new(self.x_max, self.y_max, self.height),
        )
    }

    pub fn covers(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub extent_m: f64,
    pub scenario: Scenario,
    pub buildings: Vec<Building>,
    pub roads: Vec<Corridor>,
}

impl SceneSpec {
    /// A scene without any geometry, useful for calibration and tests.
    pub fn empty(extent_m: f64, scenario: Scenario) -> Self {
        Self {
            seed: 0,
            extent_m,
            scenario,
            buildings: Vec::new(),
            roads: Vec::new(),
        }
    }

    pub fn is_road(&self, x: f64, y: f64) -> bool {
        self.roads.iter().any(|r| r.contains(x, y))
    }

    /// Topmost building covering `(x, y)`, if any.
    pub fn building_at(&self, x: f64, y: f64) -> Option<&Building> {
        self.buildings
            .iter()
            .filter(|b| b.covers(x, y))
            .max_by(|a, b| a.height.total_cmp(&b.height))
    }
}

/// Generates a deterministic scene for `(seed, scenario)` over `[0, extent_m]²`.
pub fn generate_scene(seed: u64, scenario: Scenario, extent_m: f64) -> Result<SceneSpec> {
    if !extent_m.is_finite() {
        return Err(Error::NonFinite { name: "extent_m" });
    }
    if extent_m <= 0.0 {
        return Err(Error::NonPositive {
            name: "extent_m",
            value: extent_m,
        });
    }

    let half = extent_m / 2.0;
    let w = scenario.road_width_m() / 2.0;
    let roads = match scenario {
        Scenario::Crossroad => alloc::vec![
            Corridor { x_min: half - w, y_min: 0.0, x_max: half + w, y_max: extent_m },
            Corridor { x_min: 0.0, y_min: half - w, x_max: extent_m, y_max: half + w },
        ],
        Scenario::WideLane => alloc::vec![Corridor {
            x_min: 0.0,
            y_min: half - w,
            x_max: extent_m,
            y_max: half + w,
        }],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scenario.salt());
    let lots = libm::floor(extent_m / LOT_PITCH_M) as usize;
    let mut buildings = Vec::new();
    for row in 0..lots {
        for col in 0..lots {
            // Draw every lot's numbers unconditionally so the stream position
            // does not depend on earlier rejections.
            let occupied = rng.random::<f64>() < LOT_OCCUPANCY;
            let margins: [f64; 4] =
                core::array::from_fn(|_| rng.random_range(LOT_MARGIN_M.0..LOT_MARGIN_M.1));
            let height = rng.random_range(MIN_BUILDING_HEIGHT_M..MAX_BUILDING_HEIGHT_M);
            let jitter: [f64; 3] =
                core::array::from_fn(|_| rng.random_range(-ROOF_TINT_JITTER..ROOF_TINT_JITTER));
            if !occupied {
                continue;
            }
            let x0 = col as f64 * LOT_PITCH_M + margins[0];
            let x1 = (col + 1) as f64 * LOT_PITCH_M - margins[1];
            let y0 = row as f64 * LOT_PITCH_M + margins[2];
            let y1 = (row + 1) as f64 * LOT_PITCH_M - margins[3];
            let blocked = roads.iter().any(|r| {
                r.overlaps(
                    x0 - ROAD_CLEARANCE_M,
                    y0 - ROAD_CLEARANCE_M,
                    x1 + ROAD_CLEARANCE_M,
                    y1 + ROAD_CLEARANCE_M,
                )
            });
            if blocked {
                continue;
            }
            buildings.push(Building {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
                height,
                albedo_rgb: roof_albedo(height, jitter),
            });
        }
    }

    Ok(SceneSpec {
        seed,
        extent_m,
        scenario,
        buildings,
        roads,
    })
}

/// Roofs get brighter with height so the raster carries a height cue.
fn roof_albedo(height: f64, jitter: [f64; 3]) -> [f64; 3] {
    let t = (height - MIN_BUILDING_HEIGHT_M) / (MAX_BUILDING_HEIGHT_M - MIN_BUILDING_HEIGHT_M);
    let shade = 0.7 + 0.3 * t.clamp(0.0, 1.0);
    core::array::from_fn(|c| (ROOF_ALBEDO[c] * shade + jitter[c]).clamp(0.0, 1.0))
}
