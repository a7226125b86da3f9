//! Paired scene/pathloss datasets: schedule files, in-memory generation,
//! and the on-disk layout (a JSON manifest plus one `WPG1` array file per
//! raster and per map).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pathcast_core::freq::BandRegistry;
use pathcast_core::pixel::pixel_to_db;
use pathcast_core::propagation::render_pathloss_map;
use pathcast_core::raster::render_scene_raster;
use pathcast_core::scene::generate_scene;
use pathcast_core::split::{test_snapshots, TEST_FRACTION};
use pathcast_core::trajectory::{required_extent_m, tx_positions};
use pathcast_core::{pixel, CaptureConfig, Scenario};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::sha256_hex;

pub const ARRAY_MAGIC: &[u8; 4] = b"WPG1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub(crate) mod scenario_serde {
    use pathcast_core::Scenario;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &Scenario, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Scenario, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One acquisition condition: scenario, flight altitude and carrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    #[serde(with = "scenario_serde")]
    pub scenario: Scenario,
    pub altitude_m: f64,
    pub frequency_hz: f64,
}

impl Condition {
    pub fn new(scenario: Scenario, altitude_m: f64, frequency_hz: f64) -> Self {
        Self {
            scenario,
            altitude_m,
            frequency_hz,
        }
    }

    pub fn tag(&self) -> String {
        format!(
            "{}/{}m/{}GHz",
            self.scenario,
            self.altitude_m,
            self.frequency_hz / 1e9
        )
    }
}

/// Parses `scenario/altitude/frequency`, e.g. `crossroad/70m/1.6GHz` or
/// `crossroad/70/1.6e9`. A bare frequency is in Hz.
impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::contract(format!("condition `{s}` is not scenario/altitude/frequency"));
        let parts: Vec<&str> = s.trim().split('/').collect();
        let [scenario, alt, freq] = parts[..] else {
            return Err(bad());
        };
        let scenario: Scenario = scenario.parse()?;
        let altitude_m: f64 = alt.trim_end_matches('m').parse().map_err(|_| bad())?;
        let frequency_hz = match freq.strip_suffix("GHz") {
            Some(g) => g.parse::<f64>().map_err(|_| bad())? * 1e9,
            None => freq.trim_end_matches("Hz").parse().map_err(|_| bad())?,
        };
        Ok(Self::new(scenario, altitude_m, frequency_hz))
    }
}

pub fn tags(conds: &[Condition]) -> String {
    conds.iter().map(Condition::tag).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    #[serde(with = "scenario_serde")]
    pub scenario: Scenario,
    pub altitude_m: f64,
    pub frequency_hz: f64,
    pub snapshots: usize,
}

impl ScheduleRow {
    pub fn condition(&self) -> Condition {
        Condition::new(self.scenario, self.altitude_m, self.frequency_hz)
    }
}

fn default_image_hw() -> usize {
    64
}

fn default_grid_n() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(default = "default_image_hw")]
    pub image_hw: usize,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    pub rows: Vec<ScheduleRow>,
}

impl Schedule {
    pub fn new(image_hw: usize, grid_n: usize, rows: Vec<ScheduleRow>) -> Self {
        Self { image_hw, grid_n, rows }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::contract("schedule has no rows"));
        }
        if self.image_hw == 0 || self.grid_n == 0 {
            return Err(Error::contract("image_hw and grid_n must be positive"));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.snapshots == 0 {
                return Err(Error::contract(format!("row {i} requests zero snapshots")));
            }
            if !(row.altitude_m > 0.0 && row.frequency_hz > 0.0) {
                return Err(Error::contract(format!("row {i} needs positive altitude and frequency")));
            }
            if self.rows[..i].iter().any(|r| r.condition() == row.condition()) {
                return Err(Error::contract(format!("duplicate condition {}", row.condition().tag())));
            }
        }
        Ok(())
    }
}

/// One aligned raster/map pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub condition: Condition,
    pub snapshot_index: usize,
    pub tx_xy: (f64, f64),
    pub image_hw: usize,
    pub grid_n: usize,
    /// `image_hw × image_hw × 3`, row-major.
    pub raster: Vec<u8>,
    /// `grid_n × grid_n`, pixel value = dB.
    pub map: Vec<u8>,
}

impl Sample {
    pub fn map_db(&self) -> Vec<f64> {
        self.map.iter().map(|&v| pixel_to_db(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEntry {
    pub id: usize,
    pub frequency_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    #[serde(with = "scenario_serde")]
    pub scenario: Scenario,
    pub extent_m: f64,
    pub buildings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    #[serde(with = "scenario_serde")]
    pub scenario_id: Scenario,
    pub altitude_m: f64,
    pub frequency_hz: f64,
    pub snapshot_index: usize,
    pub raster_file: String,
    pub map_file: String,
    pub image_hw: usize,
    pub grid_n: usize,
    pub tx_x: f64,
    pub tx_y: f64,
}

impl RecordEntry {
    pub fn condition(&self) -> Condition {
        Condition::new(self.scenario_id, self.altitude_m, self.frequency_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_hw: usize,
    pub grid_n: usize,
    pub bands: Vec<BandEntry>,
    pub scenes: Vec<SceneEntry>,
    pub records: Vec<RecordEntry>,
}

impl Manifest {
    pub fn band_registry(&self) -> BandRegistry {
        BandRegistry::from_frequencies(self.bands.iter().map(|b| b.frequency_hz))
    }
}

/// Renders every snapshot of `schedule`. Returns samples in schedule order.
pub fn generate_samples(schedule: &Schedule, seed: u64) -> Result<(Vec<Sample>, Vec<SceneEntry>)> {
    schedule.validate()?;
    let mut extents: BTreeMap<Scenario, f64> = BTreeMap::new();
    for row in &schedule.rows {
        let e = extents.entry(row.scenario).or_insert(0.0);
        *e = e.max(required_extent_m(row.altitude_m));
    }
    let mut scenes = BTreeMap::new();
    let mut scene_entries = Vec::new();
    for (&scenario, &extent) in &extents {
        let scene = generate_scene(seed, scenario, extent)?;
        scene_entries.push(SceneEntry {
            scenario,
            extent_m: extent,
            buildings: scene.buildings.len(),
        });
        scenes.insert(scenario, scene);
    }

    let jobs: Vec<(Condition, usize, (f64, f64))> = schedule
        .rows
        .iter()
        .flat_map(|row| {
            let positions = tx_positions(row.scenario, extents[&row.scenario], row.snapshots);
            positions
                .into_iter()
                .enumerate()
                .map(move |(k, xy)| (row.condition(), k, xy))
        })
        .collect();

    let samples = jobs
        .par_iter()
        .map(|&(cond, k, (x, y))| {
            let scene = &scenes[&cond.scenario];
            let cfg = CaptureConfig::new(
                x,
                y,
                cond.altitude_m,
                cond.frequency_hz,
                schedule.grid_n,
                schedule.image_hw,
            )?;
            let raster = render_scene_raster(scene, &cfg)?;
            let map = render_pathloss_map(scene, &cfg)?
                .into_iter()
                .map(pixel::db_to_pixel)
                .collect();
            Ok(Sample {
                condition: cond,
                snapshot_index: k,
                tx_xy: (x, y),
                image_hw: schedule.image_hw,
                grid_n: schedule.grid_n,
                raster,
                map,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, scene_entries))
}

pub fn write_array(path: &Path, height: usize, width: usize, channels: usize, data: &[u8]) -> Result<()> {
    if data.len() != height * width * channels {
        return Err(Error::contract(format!(
            "array of {} bytes does not match {height}×{width}×{channels}",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + data.len());
    buf.extend_from_slice(ARRAY_MAGIC);
    for v in [height, width, channels] {
        buf.extend((v as u32).to_le_bytes());
    }
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns `(height, width, channels, data)`.
pub fn read_array(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != ARRAY_MAGIC {
        return Err(Error::contract(format!("{} is not a WPG1 array", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if bytes.len() != 16 + h * w * c {
        return Err(Error::contract(format!("{} has a truncated payload", path.display())));
    }
    Ok((h, w, c, bytes[16..].to_vec()))
}

/// Generates `schedule` and writes it under `out_dir`.
pub fn build_dataset(schedule: &Schedule, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let (samples, scenes) = generate_samples(schedule, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let registry = BandRegistry::from_frequencies(schedule.rows.iter().map(|r| r.frequency_hz));
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let raster_file = format!("{i:06}_scene.wpg");
        let map_file = format!("{i:06}_map.wpg");
        write_array(&out_dir.join(&raster_file), s.image_hw, s.image_hw, 3, &s.raster)?;
        write_array(&out_dir.join(&map_file), s.grid_n, s.grid_n, 1, &s.map)?;
        records.push(RecordEntry {
            scenario_id: s.condition.scenario,
            altitude_m: s.condition.altitude_m,
            frequency_hz: s.condition.frequency_hz,
            snapshot_index: s.snapshot_index,
            raster_file,
            map_file,
            image_hw: s.image_hw,
            grid_n: s.grid_n,
            tx_x: s.tx_xy.0,
            tx_y: s.tx_xy.1,
        });
    }
    let manifest = Manifest {
        version: 1,
        seed,
        image_hw: schedule.image_hw,
        grid_n: schedule.grid_n,
        bands: registry
            .frequencies()
            .iter()
            .enumerate()
            .map(|(id, &f)| BandEntry { id, frequency_hz: f })
            .collect(),
        scenes,
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset fully loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub manifest_hash: String,
    pub samples: Vec<Sample>,
    pub root: Option<PathBuf>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let (h, w, c, raster) = read_array(&dir.join(&r.raster_file))?;
            if (h, w, c) != (r.image_hw, r.image_hw, 3) {
                return Err(Error::contract(format!("{} has shape {h}×{w}×{c}", r.raster_file)));
            }
            let (h, w, c, map) = read_array(&dir.join(&r.map_file))?;
            if (h, w, c) != (r.grid_n, r.grid_n, 1) {
                return Err(Error::contract(format!("{} has shape {h}×{w}×{c}", r.map_file)));
            }
            samples.push(Sample {
                condition: r.condition(),
                snapshot_index: r.snapshot_index,
                tx_xy: (r.tx_x, r.tx_y),
                image_hw: r.image_hw,
                grid_n: r.grid_n,
                raster,
                map,
            });
        }
        Ok(Self {
            manifest,
            manifest_hash: sha256_hex(&text),
            samples,
            root: Some(dir.to_path_buf()),
        })
    }

    /// Builds an in-memory dataset without touching the filesystem.
    pub fn generate(schedule: &Schedule, seed: u64) -> Result<Self> {
        let (samples, scenes) = generate_samples(schedule, seed)?;
        let registry = BandRegistry::from_frequencies(schedule.rows.iter().map(|r| r.frequency_hz));
        let manifest = Manifest {
            version: 1,
            seed,
            image_hw: schedule.image_hw,
            grid_n: schedule.grid_n,
            bands: registry
                .frequencies()
                .iter()
                .enumerate()
                .map(|(id, &f)| BandEntry { id, frequency_hz: f })
                .collect(),
            scenes,
            records: Vec::new(),
        };
        let manifest_hash = sha256_hex(&serde_json::to_vec(&(&manifest, schedule))?);
        Ok(Self {
            manifest,
            manifest_hash,
            samples,
            root: None,
        })
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut out: Vec<Condition> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.condition) {
                out.push(s.condition);
            }
        }
        out
    }

    /// Samples whose condition is in `filter`; an empty filter keeps everything.
    pub fn select(&self, filter: &[Condition]) -> Result<Vec<&Sample>> {
        for c in filter {
            if !self.samples.iter().any(|s| s.condition == *c) {
                return Err(Error::contract(format!("condition {} is not in the dataset", c.tag())));
            }
        }
        let out: Vec<&Sample> = self
            .samples
            .iter()
            .filter(|s| filter.is_empty() || filter.contains(&s.condition))
            .collect();
        if out.is_empty() {
            return Err(Error::contract("filter selects no samples"));
        }
        Ok(out)
    }

    pub fn split(&self) -> Split<'_> {
        Split::of(&self.samples)
    }
}

/// Deterministic 80/20 partition, applied per condition by snapshot index.
#[derive(Debug, Clone)]
pub struct Split<'a> {
    pub train: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
    pub hash: String,
}

impl<'a> Split<'a> {
    pub fn of(samples: &'a [Sample]) -> Self {
        let mut counts: Vec<(Condition, usize)> = Vec::new();
        for s in samples {
            match counts.iter_mut().find(|(c, _)| *c == s.condition) {
                Some((_, n)) => *n = (*n).max(s.snapshot_index + 1),
                None => counts.push((s.condition, s.snapshot_index + 1)),
            }
        }
        let held_out: Vec<(Condition, Vec<usize>)> = counts
            .iter()
            .map(|(c, n)| (*c, test_snapshots(*n, TEST_FRACTION)))
            .collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut digest = String::new();
        for s in samples {
            let is_test = held_out
                .iter()
                .find(|(c, _)| *c == s.condition)
                .is_some_and(|(_, t)| t.binary_search(&s.snapshot_index).is_ok());
            digest.push_str(&format!("{}#{}#{}\n", s.condition.tag(), s.snapshot_index, is_test));
            if is_test {
                test.push(s);
            } else {
                train.push(s);
            }
        }
        Self {
            train,
            test,
            hash: sha256_hex(digest.as_bytes()),
        }
    }

    pub fn train_for(&self, conds: &[Condition]) -> Vec<&'a Sample> {
        self.train.iter().copied().filter(|s| conds.contains(&s.condition)).collect()
    }

    pub fn test_for(&self, conds: &[Condition]) -> Vec<&'a Sample> {
        self.test.iter().copied().filter(|s| conds.contains(&s.condition)).collect()
    }
}
