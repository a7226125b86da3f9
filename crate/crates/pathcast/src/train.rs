//! Training loops for both codecs and the mapper.

use std::collections::HashSet;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{debug, info};
use pathcast_core::FrequencyCondition;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{d_hinge, g_hinge, usage_histogram, vq_loss, Codec, CodecConfig, Modality, TokenGrid};
use crate::dataset::Condition;
use crate::error::{Error, Result};
use crate::mapper::{mapping_loss, usage_entropy, Mapper, MapperConfig};

pub const SEED_ENV: &str = "PATHCAST_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CodecSensory,
    CodecChannel,
    Mapper,
    Finetune,
}

impl Stage {
    pub fn modality(self) -> Option<Modality> {
        match self {
            Stage::CodecSensory => Some(Modality::Sensory),
            Stage::CodecChannel => Some(Modality::Channel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    fn build(&self, vars: Vec<candle_core::Var>) -> Result<AdamW> {
        if self.name != "adam" {
            return Err(Error::contract(format!("unsupported optimizer `{}`", self.name)));
        }
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: 0.0,
            },
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Conditions to train on; empty selects the whole dataset.
    #[serde(default)]
    pub filter: Vec<Condition>,
    #[serde(default = "default_fraction")]
    pub fewshot_fraction: f64,
    /// Single-threaded, bit-reproducible execution.
    #[serde(default = "default_true")]
    pub reproducible: bool,
    #[serde(default)]
    pub codec: Option<CodecConfig>,
    #[serde(default)]
    pub mapper: Option<MapperConfig>,
}

fn default_batch() -> usize {
    8
}

fn default_fraction() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Desk-scale schedule.
    pub fn desk(stage: Stage) -> Self {
        let (lr, epochs) = match stage {
            Stage::CodecSensory | Stage::CodecChannel => (1e-3, 200),
            Stage::Mapper | Stage::Finetune => (3e-4, 300),
        };
        Self {
            stage,
            optimizer: OptimizerConfig { lr, ..OptimizerConfig::default() },
            epochs,
            batch_size: 8,
            seed: 0,
            filter: Vec::new(),
            fewshot_fraction: 1.0,
            reproducible: true,
            codec: None,
            mapper: None,
        }
    }

    /// Full-scale schedule.
    pub fn full_scale(stage: Stage) -> Self {
        let lr = match stage {
            Stage::CodecSensory | Stage::CodecChannel => 2.25e-5,
            Stage::Mapper | Stage::Finetune => 4.45e-5,
        };
        Self {
            optimizer: OptimizerConfig { lr, ..OptimizerConfig::default() },
            epochs: 500,
            batch_size: 16,
            ..Self::desk(stage)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::contract(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {} must be positive", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::contract("optimizer betas must lie in [0, 1) and eps be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.fewshot_fraction > 0.0 && self.fewshot_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "fewshot_fraction {} outside (0, 1]",
                self.fewshot_fraction
            )));
        }
        Ok(())
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Limits candle and rayon to one thread when reproducibility is requested.
pub fn configure_threads(reproducible: bool) {
    if reproducible {
        // Both libraries read these before their pools start.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub vq: f64,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub codes_used: usize,
    pub codes_reseeded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub routing_entropy: f64,
}

fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} became {v} in epoch {epoch}")))
    }
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Drops repeated images, keeping first occurrences in order.
pub fn dedupe<'a>(images: &[&'a [u8]]) -> Vec<&'a [u8]> {
    let mut seen = HashSet::new();
    images.iter().copied().filter(|img| seen.insert(*img)).collect()
}

const RESERVOIR: usize = 1024;

/// Trains `codec` in place on `images`.
pub fn train_codec(codec: &Codec, images: &[&[u8]], cfg: &TrainConfig) -> Result<Vec<CodecEpoch>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::contract("no images to train the codec on"));
    }
    let images = dedupe(images);
    let cc = &codec.config;
    let mut gen_opt = cfg.optimizer.build(codec.generator_vars())?;
    let mut disc_opt = cfg.optimizer.build(codec.discriminator_vars())?;
    let adv_start = (cc.adv_warmup * cfg.epochs as f64).ceil() as usize;
    let nz = cc.n_z;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = cfg.epoch_rng(epoch);
        let adversarial = epoch >= adv_start && cc.lambda_adv > 0.0;
        let mut usage = vec![0usize; cc.codebook_size];
        let mut reservoir: Vec<Vec<f64>> = Vec::new();
        let mut seen_rows = 0usize;
        let (mut recon_sum, mut vq_sum, mut d_sum, mut g_sum, mut n_batches) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for batch in batches(images.len(), cfg.batch_size, &mut rng) {
            let refs: Vec<&[u8]> = batch.iter().map(|&i| images[i]).collect();
            let x = codec.images_to_tensor(&refs)?;
            let pass = codec.pass(&x)?;
            for (u, h) in usage.iter_mut().zip(usage_histogram(&pass.indices, cc.codebook_size)) {
                *u += h;
            }
            let rows = pass.z.permute((0, 2, 3, 1))?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for row in rows.chunks(nz) {
                seen_rows += 1;
                if reservoir.len() < RESERVOIR {
                    reservoir.push(row.to_vec());
                } else {
                    let j = rng.random_range(0..seen_rows);
                    if j < RESERVOIR {
                        reservoir[j] = row.to_vec();
                    }
                }
            }
            let vq = vq_loss(&x, &pass.x_hat, &pass.z, &pass.z_q, cc.beta, cc.reduction)?;
            recon_sum += finite(to_f64(&vq.recon)?, "reconstruction loss", epoch)?;
            vq_sum += finite(to_f64(&vq.total)?, "vq loss", epoch)?;
            let total = if adversarial {
                let d = d_hinge(&codec.discriminate(&x)?, &codec.discriminate(&pass.x_hat.detach())?)?;
                d_sum += finite(to_f64(&d)?, "discriminator loss", epoch)?;
                disc_opt.backward_step(&d)?;
                let g = g_hinge(&codec.discriminate(&pass.x_hat)?)?;
                g_sum += finite(to_f64(&g)?, "generator loss", epoch)?;
                (vq.total + (g * cc.lambda_adv)?)?
            } else {
                vq.total
            };
            gen_opt.backward_step(&total)?;
            n_batches += 1;
        }
        let dead: Vec<usize> = (0..cc.codebook_size).filter(|&k| usage[k] == 0).collect();
        if epoch + 1 < cfg.epochs {
            codec.reseed_codes(&dead, &reservoir, &mut rng)?;
        }
        let nb = n_batches as f64;
        let entry = CodecEpoch {
            epoch,
            recon: recon_sum / nb,
            vq: vq_sum / nb,
            d_loss: adversarial.then_some(d_sum / nb),
            g_loss: adversarial.then_some(g_sum / nb),
            codes_used: cc.codebook_size - dead.len(),
            codes_reseeded: if epoch + 1 < cfg.epochs { dead.len() } else { 0 },
        };
        debug!("{} codec epoch {epoch}: {entry:?}", cc.modality);
        log.push(entry);
    }
    if let Some(last) = log.last() {
        info!(
            "{} codec: {} epochs, recon {:.5}, {} codes in use",
            cc.modality, cfg.epochs, last.recon, last.codes_used
        );
    }
    Ok(log)
}

/// One supervised pair for the mapper.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperExample {
    pub sensory: TokenGrid,
    pub target: TokenGrid,
    pub condition: FrequencyCondition,
}

pub fn train_mapper(mapper: &Mapper, examples: &[MapperExample], cfg: &TrainConfig) -> Result<Vec<MapperEpoch>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("no examples to train the mapper on"));
    }
    let mut opt = cfg.optimizer.build(mapper.store.vars())?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = cfg.epoch_rng(epoch);
        let (mut loss_sum, mut n_batches) = (0.0, 0usize);
        let mut routing = Vec::new();
        for batch in batches(examples.len(), cfg.batch_size, &mut rng) {
            let ex: Vec<&MapperExample> = batch.iter().map(|&i| &examples[i]).collect();
            let tokens = mapper.token_tensor(&ex.iter().map(|e| &e.sensory).collect::<Vec<_>>())?;
            let targets = mapper.target_tensor(&ex.iter().map(|e| &e.target).collect::<Vec<_>>())?;
            let conds: Vec<FrequencyCondition> = ex.iter().map(|e| e.condition).collect();
            let out = mapper.forward(&tokens, &conds)?;
            let loss = mapping_loss(&out.logits, &targets)?;
            loss_sum += finite(to_f64(&loss)?, "mapping loss", epoch)?;
            opt.backward_step(&loss)?;
            routing.extend(out.routing.into_iter().flatten());
            n_batches += 1;
        }
        let entry = MapperEpoch {
            epoch,
            loss: loss_sum / n_batches as f64,
            routing_entropy: usage_entropy(&routing, mapper.config.n_routed),
        };
        debug!("mapper epoch {epoch}: {entry:?}");
        log.push(entry);
    }
    if let Some(last) = log.last() {
        info!("mapper: {} epochs, loss {:.5}", cfg.epochs, last.loss);
    }
    Ok(log)
}
