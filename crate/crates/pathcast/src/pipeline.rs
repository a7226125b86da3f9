//! Scene raster → sensory tokens → channel tokens → pathloss map.

use std::sync::Arc;

use candle_core::DType;
use pathcast_core::metrics::{Nmse, NmseAccumulator};
use pathcast_core::pixel::pixel_to_db;
use pathcast_core::FrequencyCondition;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, CodecConfig, Modality, TokenGrid};
use crate::dataset::Sample;
use crate::error::{Error, Result, StageContext};
use crate::mapper::{Mapper, MapperConfig};
use crate::train::MapperExample;

const CHUNK: usize = 32;

/// The two frozen codecs plus a mapper trained against them.
#[derive(Debug)]
pub struct Pipeline {
    pub sensory: Arc<Codec>,
    pub channel: Arc<Codec>,
    pub mapper: Mapper,
}

/// Checks that codecs and mapper agree on token geometry.
pub fn check_geometry(sensory: &CodecConfig, channel: &CodecConfig, mapper: &MapperConfig) -> Result<()> {
    if sensory.modality != Modality::Sensory || channel.modality != Modality::Channel {
        return Err(Error::contract("codec modalities are swapped"));
    }
    if sensory.tokens() != channel.tokens() {
        return Err(Error::contract(format!(
            "sensory grid has {} tokens but channel grid has {}",
            sensory.tokens(),
            channel.tokens()
        )));
    }
    if mapper.tokens != sensory.tokens() {
        return Err(Error::contract(format!(
            "mapper expects {} tokens, codecs produce {}",
            mapper.tokens,
            sensory.tokens()
        )));
    }
    if mapper.sensory_vocab != sensory.codebook_size || mapper.channel_vocab != channel.codebook_size {
        return Err(Error::contract("mapper vocabularies do not match the codebooks"));
    }
    Ok(())
}

/// Fills the geometry fields of `template` from the codecs.
pub fn fit_mapper_config(template: &MapperConfig, sensory: &CodecConfig, channel: &CodecConfig, bands_hz: &[f64]) -> MapperConfig {
    MapperConfig {
        sensory_vocab: sensory.codebook_size,
        channel_vocab: channel.codebook_size,
        tokens: sensory.tokens(),
        bands_hz: bands_hz.to_vec(),
        ..template.clone()
    }
}

impl Pipeline {
    pub fn new(sensory: Arc<Codec>, channel: Arc<Codec>, mapper: Mapper) -> Result<Self> {
        check_geometry(&sensory.config, &channel.config, &mapper.config)?;
        Ok(Self { sensory, channel, mapper })
    }

    pub fn dtype(&self) -> DType {
        self.mapper.dtype()
    }

    pub fn sensory_tokens(&self, samples: &[&Sample]) -> Result<Vec<TokenGrid>> {
        let rasters: Vec<&[u8]> = samples.iter().map(|s| s.raster.as_slice()).collect();
        self.sensory.tokenize(&rasters).stage("sensory encode")
    }

    pub fn channel_tokens(&self, samples: &[&Sample]) -> Result<Vec<TokenGrid>> {
        let maps: Vec<&[u8]> = samples.iter().map(|s| s.map.as_slice()).collect();
        self.channel.tokenize(&maps).stage("channel encode")
    }

    pub fn conditions(&self, samples: &[&Sample], zero_shot: bool) -> Result<Vec<FrequencyCondition>> {
        samples
            .iter()
            .map(|s| self.mapper.condition(s.condition.frequency_hz, zero_shot))
            .collect::<Result<Vec<_>>>()
            .stage("frequency condition")
    }

    /// Supervised pairs for the mapper; both codecs stay frozen.
    pub fn examples(&self, samples: &[&Sample]) -> Result<Vec<MapperExample>> {
        let s = self.sensory_tokens(samples)?;
        let c = self.channel_tokens(samples)?;
        let conds = self.conditions(samples, false)?;
        Ok(s.into_iter()
            .zip(c)
            .zip(conds)
            .map(|((sensory, target), condition)| MapperExample { sensory, target, condition })
            .collect())
    }

    /// Predicted dB maps for a batch of scenes.
    pub fn predict(&self, rasters: &[&[u8]], conds: &[FrequencyCondition]) -> Result<Vec<Vec<f64>>> {
        if rasters.len() != conds.len() {
            return Err(Error::contract("one condition per raster is required"));
        }
        let mut out = Vec::with_capacity(rasters.len());
        for (r, c) in rasters.chunks(CHUNK).zip(conds.chunks(CHUNK)) {
            let tokens = self.sensory.tokenize(r).stage("sensory encode")?;
            let refs: Vec<&TokenGrid> = tokens.iter().collect();
            let channel = self
                .mapper
                .predict(&refs, c, self.channel.config.latent_hw())
                .stage("mapper")?;
            let maps = self.channel.decode_tokens(&channel).stage("channel decode")?;
            out.extend(maps.into_iter().map(|m| m.into_iter().map(pixel_to_db).collect()));
        }
        Ok(out)
    }

    pub fn generate_pathloss_map(&self, raster: &[u8], frequency_hz: f64, zero_shot: bool) -> Result<Vec<f64>> {
        let cond = self.mapper.condition(frequency_hz, zero_shot).stage("frequency condition")?;
        Ok(self.predict(&[raster], &[cond])?.remove(0))
    }

    pub fn evaluate(&self, samples: &[&Sample], zero_shot: bool) -> Result<Nmse> {
        let rasters: Vec<&[u8]> = samples.iter().map(|s| s.raster.as_slice()).collect();
        let conds = self.conditions(samples, zero_shot)?;
        let preds = self.predict(&rasters, &conds)?;
        let mut acc = NmseAccumulator::new();
        for (p, s) in preds.iter().zip(samples) {
            acc.push(p, &s.map_db())?;
        }
        Ok(acc.finish()?)
    }

    pub fn codec_ids(&self) -> Result<(String, String)> {
        Ok((
            self.sensory.to_checkpoint(0, json!({}))?.id()?,
            self.channel.to_checkpoint(0, json!({}))?.id()?,
        ))
    }

    /// Mapper checkpoint recording which codecs it was trained against.
    pub fn mapper_checkpoint(&self, step: u64, mut meta: serde_json::Value) -> Result<Checkpoint> {
        let (s, c) = self.codec_ids()?;
        meta["codec_sensory"] = json!(s);
        meta["codec_channel"] = json!(c);
        self.mapper.to_checkpoint(step, meta)
    }

    /// Loads a mapper, refusing one trained against different codecs.
    pub fn load_mapper(sensory: Arc<Codec>, channel: Arc<Codec>, ckpt: &Checkpoint) -> Result<Self> {
        let mapper = Mapper::from_checkpoint(ckpt, sensory.dtype())?;
        let p = Self::new(sensory, channel, mapper)?;
        let (s, c) = p.codec_ids()?;
        for (key, id) in [("codec_sensory", s), ("codec_channel", c)] {
            match ckpt.meta.get(key).and_then(|v| v.as_str()) {
                Some(want) if want == id => {}
                Some(want) => {
                    return Err(Error::contract(format!(
                        "mapper was trained against {key} {want}, got {id}"
                    )))
                }
                None => return Err(Error::contract(format!("mapper checkpoint lacks {key}"))),
            }
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Schedule, ScheduleRow};
    use pathcast_core::Scenario;

    fn codecs() -> (CodecConfig, CodecConfig) {
        let s = CodecConfig {
            input_hw: 16,
            channels: vec![4, 4],
            res_blocks: vec![1, 1],
            n_z: 4,
            codebook_size: 8,
            disc_channels: vec![4],
            ..CodecConfig::sensory()
        };
        let c = CodecConfig {
            modality: Modality::Channel,
            input_hw: 8,
            channels: vec![4],
            res_blocks: vec![1],
            ..s.clone()
        };
        (s, c)
    }

    fn pipeline() -> (Pipeline, Dataset) {
        let ds = Dataset::generate(
            &Schedule::new(
                16,
                8,
                vec![
                    ScheduleRow { scenario: Scenario::Crossroad, altitude_m: 70.0, frequency_hz: 1.6e9, snapshots: 4 },
                    ScheduleRow { scenario: Scenario::Crossroad, altitude_m: 70.0, frequency_hz: 28e9, snapshots: 4 },
                ],
            ),
            0,
        )
        .unwrap();
        let (s, c) = codecs();
        let m = MapperConfig {
            n_blocks: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 8,
            freq_dim: 4,
            ..MapperConfig::default()
        };
        let bands = ds.manifest.band_registry().frequencies().to_vec();
        let m = fit_mapper_config(&m, &s, &c, &bands);
        let p = Pipeline::new(
            Arc::new(Codec::new(s, 1, DType::F32).unwrap()),
            Arc::new(Codec::new(c, 2, DType::F32).unwrap()),
            Mapper::new(m, 3, DType::F32).unwrap(),
        )
        .unwrap();
        (p, ds)
    }

    #[test]
    fn output_shape_and_range() {
        let (p, ds) = pipeline();
        let s = &ds.samples[0];
        let map = p.generate_pathloss_map(&s.raster, 28e9, false).unwrap();
        assert_eq!(map.len(), 64);
        assert!(map.iter().all(|v| (0.0..=255.0).contains(v)));
        assert!(matches!(p.generate_pathloss_map(&s.raster, 15e9, false), Err(Error::Stage { .. })));
        assert!(p.generate_pathloss_map(&s.raster, 15e9, true).is_ok());
        let e = p.generate_pathloss_map(&s.raster[1..], 28e9, false).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().starts_with("sensory encode"));
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let (s, c) = codecs();
        let m = fit_mapper_config(&MapperConfig::default(), &s, &c, &[1e9]);
        let c2 = CodecConfig { input_hw: 16, ..c.clone() };
        assert!(check_geometry(&s, &c2, &m).is_err());
        assert!(check_geometry(&s, &c, &m).is_ok());
    }

    #[test]
    fn stale_mapper_detected() {
        let (p, _) = pipeline();
        let ck = p.mapper_checkpoint(0, json!({})).unwrap();
        let (s, c) = codecs();
        let fresh = Pipeline::load_mapper(
            Arc::new(Codec::from_checkpoint(&p.sensory.to_checkpoint(0, json!({})).unwrap(), DType::F32).unwrap()),
            Arc::new(Codec::from_checkpoint(&p.channel.to_checkpoint(0, json!({})).unwrap(), DType::F32).unwrap()),
            &ck,
        );
        assert!(fresh.is_ok());
        let stale = Pipeline::load_mapper(
            Arc::new(Codec::new(s, 9, DType::F32).unwrap()),
            Arc::new(Codec::new(c, 9, DType::F32).unwrap()),
            &ck,
        );
        assert!(matches!(stale, Err(Error::Contract(_))));
    }

    #[test]
    fn evaluation_reports_finite_nmse() {
        let (p, ds) = pipeline();
        let refs: Vec<&Sample> = ds.samples.iter().collect();
        let n = p.evaluate(&refs, false).unwrap();
        assert!(n.pooled.is_finite() && n.pooled > 0.0);
        assert_eq!(p.examples(&refs).unwrap().len(), refs.len());
    }
}
