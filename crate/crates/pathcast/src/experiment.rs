//! Experiment plans: which conditions to train on, which to score, and how.

use std::sync::Arc;

use candle_core::DType;
use log::info;
use pathcast_core::split::{select_fewshot, FEWSHOT_FRACTIONS};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baseline::{Baseline, BaselineConfig};
use crate::codec::{Codec, CodecConfig, Modality};
use crate::dataset::{tags, Condition, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::mapper::{Mapper, MapperConfig};
use crate::pipeline::{fit_mapper_config, Pipeline};
use crate::report::{NmseReport, NmseRow, Provenance};
use crate::train::{train_codec, train_mapper, Stage, TrainConfig};

/// Architectures and schedules for every model in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub sensory: CodecConfig,
    pub channel: CodecConfig,
    pub mapper: MapperConfig,
    pub baseline: BaselineConfig,
    pub codec_train: TrainConfig,
    pub mapper_train: TrainConfig,
    pub finetune_train: TrainConfig,
    pub baseline_train: TrainConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelSpec {
    pub fn desk() -> Self {
        Self {
            sensory: CodecConfig::sensory(),
            channel: CodecConfig::channel(),
            mapper: MapperConfig::default(),
            baseline: BaselineConfig::default(),
            codec_train: TrainConfig::desk(Stage::CodecSensory),
            mapper_train: TrainConfig::desk(Stage::Mapper),
            finetune_train: TrainConfig { epochs: 100, ..TrainConfig::desk(Stage::Finetune) },
            baseline_train: TrainConfig::desk(Stage::Mapper),
        }
    }

    /// Large sizes and schedules.
    pub fn full_scale() -> Self {
        Self {
            sensory: CodecConfig::full_scale(Modality::Sensory),
            channel: CodecConfig::full_scale(Modality::Channel),
            mapper: MapperConfig::full_scale(),
            baseline: BaselineConfig::default(),
            codec_train: TrainConfig::full_scale(Stage::CodecSensory),
            mapper_train: TrainConfig::full_scale(Stage::Mapper),
            finetune_train: TrainConfig::full_scale(Stage::Finetune),
            baseline_train: TrainConfig::full_scale(Stage::Mapper),
        }
    }

    /// Smaller codecs and mapper for single-core runs.
    pub fn compact() -> Self {
        Self {
            sensory: CodecConfig::compact(Modality::Sensory),
            channel: CodecConfig::compact(Modality::Channel),
            mapper: MapperConfig { n_blocks: 2, d_model: 64, d_ff: 128, freq_dim: 16, ..MapperConfig::default() },
            baseline: BaselineConfig { width: 16, res_blocks: 1, ..BaselineConfig::default() },
            ..Self::desk()
        }
    }

    /// Missing tables fall back to the desk preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensory.validate()?;
        self.channel.validate()?;
        self.mapper.validate()?;
        self.baseline.n_down()?;
        for t in [&self.codec_train, &self.mapper_train, &self.finetune_train, &self.baseline_train] {
            t.validate()?;
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullSample,
    Unified,
    ZeroShot,
    FewShot,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FullSample => "full_sample",
            Mode::Unified => "unified",
            Mode::ZeroShot => "zero_shot",
            Mode::FewShot => "few_shot",
            Mode::Baseline => "baseline",
        }
    }
}

fn default_fractions() -> Vec<f64> {
    FEWSHOT_FRACTIONS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub train_conditions: Vec<Condition>,
    pub test_conditions: Vec<Condition>,
    #[serde(default = "default_fractions")]
    pub fewshot_fractions: Vec<f64>,
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.train_conditions.is_empty() || self.test_conditions.is_empty() {
            return Err(Error::contract("plan needs train and test conditions"));
        }
        dataset.select(&self.train_conditions)?;
        dataset.select(&self.test_conditions)?;
        match self.mode {
            Mode::ZeroShot | Mode::FewShot => {
                for t in &self.test_conditions {
                    let unseen = !self.train_conditions.iter().any(|c| c.frequency_hz == t.frequency_hz)
                        || !self.train_conditions.iter().any(|c| c.altitude_m == t.altitude_m)
                        || !self.train_conditions.iter().any(|c| c.scenario == t.scenario);
                    if !unseen {
                        return Err(Error::contract(format!(
                            "{} is not disjoint from the training conditions",
                            t.tag()
                        )));
                    }
                }
                if self.mode == Mode::FewShot {
                    if self.fewshot_fractions.is_empty() {
                        return Err(Error::contract("few-shot plan lists no fractions"));
                    }
                    if let Some(f) = self.fewshot_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                        return Err(Error::contract(format!("few-shot fraction {f} outside (0, 1]")));
                    }
                }
            }
            Mode::FullSample | Mode::Unified => {
                for t in &self.test_conditions {
                    if !self.train_conditions.iter().any(|c| c.frequency_hz == t.frequency_hz) {
                        return Err(Error::contract(format!(
                            "band of {} is untrained; use zero_shot or few_shot",
                            t.tag()
                        )));
                    }
                }
            }
            Mode::Baseline => {}
        }
        Ok(())
    }
}

/// A frozen codec pair shared between mapper runs.
#[derive(Debug, Clone)]
pub struct Codecs {
    pub sensory: Arc<Codec>,
    pub channel: Arc<Codec>,
}

impl Codecs {
    pub fn ids(&self) -> Result<Vec<String>> {
        Ok(vec![
            self.sensory.to_checkpoint(0, json!({}))?.id()?,
            self.channel.to_checkpoint(0, json!({}))?.id()?,
        ])
    }
}

pub fn codec_train_config(spec: &ModelSpec, modality: Modality, seed: u64) -> TrainConfig {
    let stage = match modality {
        Modality::Sensory => Stage::CodecSensory,
        Modality::Channel => Stage::CodecChannel,
    };
    TrainConfig { stage, seed, ..spec.codec_train.clone() }
}

/// Trains both codecs on `samples`.
pub fn train_codecs(spec: &ModelSpec, samples: &[&Sample], seed: u64) -> Result<Codecs> {
    let sensory = Codec::new(spec.sensory.clone(), seed.wrapping_add(1), spec.dtype())?;
    let rasters: Vec<&[u8]> = samples.iter().map(|s| s.raster.as_slice()).collect();
    train_codec(&sensory, &rasters, &codec_train_config(spec, Modality::Sensory, seed))?;
    let channel = Codec::new(spec.channel.clone(), seed.wrapping_add(2), spec.dtype())?;
    let maps: Vec<&[u8]> = samples.iter().map(|s| s.map.as_slice()).collect();
    train_codec(&channel, &maps, &codec_train_config(spec, Modality::Channel, seed))?;
    Ok(Codecs { sensory: Arc::new(sensory), channel: Arc::new(channel) })
}

pub fn untrained_codecs(spec: &ModelSpec, seed: u64) -> Result<Codecs> {
    Ok(Codecs {
        sensory: Arc::new(Codec::new(spec.sensory.clone(), seed.wrapping_add(1), spec.dtype())?),
        channel: Arc::new(Codec::new(spec.channel.clone(), seed.wrapping_add(2), spec.dtype())?),
    })
}

fn bands_of(conds: &[Condition]) -> Vec<f64> {
    pathcast_core::freq::BandRegistry::from_frequencies(conds.iter().map(|c| c.frequency_hz))
        .frequencies()
        .to_vec()
}

/// Fresh pipeline for `train_conditions`.
pub fn init_pipeline(spec: &ModelSpec, codecs: &Codecs, train_conditions: &[Condition], mapper_config: &MapperConfig, seed: u64) -> Result<Pipeline> {
    let cfg = fit_mapper_config(mapper_config, &codecs.sensory.config, &codecs.channel.config, &bands_of(train_conditions));
    let mapper = Mapper::new(cfg, seed.wrapping_add(3), spec.dtype())?;
    Pipeline::new(codecs.sensory.clone(), codecs.channel.clone(), mapper)
}

/// Trains a mapper on the training split of `train_conditions`.
pub fn fit_mapper(
    spec: &ModelSpec,
    codecs: &Codecs,
    split: &Split<'_>,
    train_conditions: &[Condition],
    mapper_config: &MapperConfig,
    seed: u64,
) -> Result<Pipeline> {
    let pipeline = init_pipeline(spec, codecs, train_conditions, mapper_config, seed)?;
    let before = (codecs.sensory.fingerprint()?, codecs.channel.fingerprint()?);
    let examples = pipeline.examples(&split.train_for(train_conditions))?;
    train_mapper(&pipeline.mapper, &examples, &TrainConfig { seed, ..spec.mapper_train.clone() })?;
    if before != (codecs.sensory.fingerprint()?, codecs.channel.fingerprint()?) {
        return Err(Error::contract("codec parameters changed during mapper training"));
    }
    Ok(pipeline)
}

/// Copy of `base` fine-tuned on a seeded subset of `target`'s training split.
pub fn fine_tune(spec: &ModelSpec, base: &Pipeline, split: &Split<'_>, target: &Condition, fraction: f64, seed: u64) -> Result<(Pipeline, usize)> {
    let mut mapper = Mapper::from_checkpoint(&base.mapper.to_checkpoint(0, json!({}))?, base.dtype())?;
    mapper.register_band(target.frequency_hz)?;
    let pipeline = Pipeline::new(base.sensory.clone(), base.channel.clone(), mapper)?;
    let candidates = split.train_for(std::slice::from_ref(target));
    let chosen = select_fewshot(&candidates, fraction, seed)?;
    let examples = pipeline.examples(&chosen)?;
    let cfg = TrainConfig { seed, fewshot_fraction: fraction, ..spec.finetune_train.clone() };
    train_mapper(&pipeline.mapper, &examples, &cfg)?;
    Ok((pipeline, chosen.len()))
}

fn pipeline_ids(p: &Pipeline) -> Result<Vec<String>> {
    let (s, c) = p.codec_ids()?;
    Ok(vec![s, c, p.mapper.to_checkpoint(0, json!({}))?.id()?])
}

fn provenance(dataset: &Dataset, split: &Split<'_>, seed: u64, rows: &[NmseRow]) -> Provenance {
    let mut hashes: Vec<String> = Vec::new();
    for r in rows {
        for id in &r.checkpoint_ids {
            if !hashes.contains(id) {
                hashes.push(id.clone());
            }
        }
    }
    Provenance {
        seeds: vec![seed],
        checkpoint_hashes: hashes,
        manifest_hash: dataset.manifest_hash.clone(),
        split_hash: split.hash.clone(),
    }
}

/// Executes `plan`; codecs are trained on its training conditions unless supplied.
pub fn run_plan(plan: &ExperimentPlan, dataset: &Dataset, spec: &ModelSpec, codecs: Option<&Codecs>) -> Result<NmseReport> {
    plan.validate(dataset)?;
    let split = dataset.split();
    let seed = plan.seed;
    let train_tag = tags(&plan.train_conditions);
    let mut rows = Vec::new();
    info!("plan {} ({}): train {train_tag}", plan.name, plan.mode.as_str());

    if plan.mode == Mode::Baseline {
        let b = Baseline::new(spec.baseline.clone(), seed.wrapping_add(4), spec.dtype())?;
        b.train(&split.train_for(&plan.train_conditions), &TrainConfig { seed, ..spec.baseline_train.clone() })?;
        let id = b.to_checkpoint(0, json!({}))?.id()?;
        for t in &plan.test_conditions {
            let test = split.test_for(std::slice::from_ref(t));
            rows.push(NmseRow::new(&train_tag, t.tag(), "baseline", 1.0, b.evaluate(&test)?, test.len(), seed, vec![id.clone()]));
        }
        let provenance = provenance(dataset, &split, seed, &rows);
        return Ok(NmseReport { rows, provenance });
    }

    let owned;
    let codecs = match codecs {
        Some(c) => c,
        None => {
            owned = train_codecs(spec, &split.train_for(&plan.train_conditions), seed)?;
            &owned
        }
    };
    let pipeline = fit_mapper(spec, codecs, &split, &plan.train_conditions, &spec.mapper, seed)?;
    let ids = pipeline_ids(&pipeline)?;
    for t in &plan.test_conditions {
        let test = split.test_for(std::slice::from_ref(t));
        match plan.mode {
            Mode::FullSample | Mode::Unified => {
                let n = pipeline.evaluate(&test, false)?;
                rows.push(NmseRow::new(&train_tag, t.tag(), plan.mode.as_str(), 1.0, n, test.len(), seed, ids.clone()));
            }
            Mode::ZeroShot | Mode::FewShot => {
                let n = pipeline.evaluate(&test, true)?;
                rows.push(NmseRow::new(&train_tag, t.tag(), "zero_shot", 0.0, n, test.len(), seed, ids.clone()));
                if plan.mode == Mode::FewShot {
                    for &fraction in &plan.fewshot_fractions {
                        let (tuned, k) = fine_tune(spec, &pipeline, &split, t, fraction, seed)?;
                        info!("few-shot {} at {fraction}: {k} samples", t.tag());
                        let n = tuned.evaluate(&test, false)?;
                        rows.push(NmseRow::new(&train_tag, t.tag(), "few_shot", fraction, n, test.len(), seed, pipeline_ids(&tuned)?));
                    }
                }
            }
            Mode::Baseline => unreachable!("handled above"),
        }
    }
    let provenance = provenance(dataset, &split, seed, &rows);
    Ok(NmseReport { rows, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoFreqEmbed,
    NoSrmoe,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoFreqEmbed, Variant::NoSrmoe];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFreqEmbed => "no_freq_embed",
            Variant::NoSrmoe => "no_srmoe",
        }
    }

    pub fn apply(self, cfg: &MapperConfig) -> MapperConfig {
        match self {
            Variant::Full => cfg.clone(),
            Variant::NoFreqEmbed => MapperConfig { use_freq_embedding: false, ..cfg.clone() },
            Variant::NoSrmoe => MapperConfig { use_routed_experts: false, ..cfg.clone() },
        }
    }
}

/// Trains each variant with the same seed and budget on `conditions` and
/// scores it per condition.
pub fn run_ablation(
    dataset: &Dataset,
    conditions: &[Condition],
    variants: &[Variant],
    spec: &ModelSpec,
    codecs: Option<&Codecs>,
    seed: u64,
) -> Result<NmseReport> {
    dataset.select(conditions)?;
    let mut bands: Vec<f64> = conditions.iter().map(|c| c.frequency_hz).collect();
    bands.sort_by(f64::total_cmp);
    bands.dedup();
    if bands.len() < 2 {
        return Err(Error::contract("ablation needs at least two bands"));
    }
    let split = dataset.split();
    let owned;
    let codecs = match codecs {
        Some(c) => c,
        None => {
            owned = train_codecs(spec, &split.train_for(conditions), seed)?;
            &owned
        }
    };
    let train_tag = tags(conditions);
    let mut rows = Vec::new();
    for &v in variants {
        let p = fit_mapper(spec, codecs, &split, conditions, &v.apply(&spec.mapper), seed)?;
        let ids = pipeline_ids(&p)?;
        for t in conditions {
            let test = split.test_for(std::slice::from_ref(t));
            rows.push(NmseRow::new(&train_tag, t.tag(), v.as_str(), 1.0, p.evaluate(&test, false)?, test.len(), seed, ids.clone()));
        }
    }
    let provenance = provenance(dataset, &split, seed, &rows);
    Ok(NmseReport { rows, provenance })
}
