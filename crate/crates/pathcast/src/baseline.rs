//! Direct convolutional regression from scene raster and carrier to a dB map.

use std::fmt;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use pathcast_core::freq::normalize_frequency;
use pathcast_core::metrics::{Nmse, NmseAccumulator};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::nn::{silu, Conv2d};
use crate::store::ParamStore;
use crate::train::TrainConfig;

pub const CHECKPOINT_KIND: &str = "baseline";
/// Predictions are `DB_SCALE · output`.
pub const DB_SCALE: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub image_hw: usize,
    pub grid_n: usize,
    pub width: usize,
    pub res_blocks: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            image_hw: 64,
            grid_n: 32,
            width: 32,
            res_blocks: 2,
        }
    }
}

impl BaselineConfig {
    pub fn n_down(&self) -> Result<usize> {
        if self.grid_n == 0 || !self.image_hw.is_multiple_of(self.grid_n) || !(self.image_hw / self.grid_n).is_power_of_two() {
            return Err(Error::contract(format!(
                "image size {} must be a power-of-two multiple of grid {}",
                self.image_hw, self.grid_n
            )));
        }
        Ok((self.image_hw / self.grid_n).trailing_zeros() as usize)
    }
}

pub struct Baseline {
    pub config: BaselineConfig,
    pub store: ParamStore,
    conv_in: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    conv_out: Conv2d,
}

impl fmt::Debug for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Baseline").field("config", &self.config).finish()
    }
}

impl Baseline {
    pub fn new(config: BaselineConfig, seed: u64, dtype: DType) -> Result<Self> {
        let n_down = config.n_down()?;
        let w = config.width;
        if w == 0 {
            return Err(Error::contract("baseline width must be positive"));
        }
        let mut s = ParamStore::new(seed, dtype);
        let conv_in = Conv2d::new(&mut s, "in", 4, w, 3, 1, 1)?;
        let down = (0..n_down)
            .map(|i| Conv2d::new(&mut s, &format!("down{i}"), w, w, 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..config.res_blocks)
            .map(|i| {
                Ok((
                    Conv2d::new(&mut s, &format!("res{i}.conv1"), w, w, 3, 1, 1)?,
                    Conv2d::new(&mut s, &format!("res{i}.conv2"), w, w, 3, 1, 1)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv2d::new(&mut s, "out", w, 1, 3, 1, 1)?;
        Ok(Self { config, store: s, conv_in, down, blocks, conv_out })
    }

    fn inputs(&self, samples: &[&Sample]) -> Result<Tensor> {
        let hw = self.config.image_hw;
        let mut data = Vec::with_capacity(samples.len() * 4 * hw * hw);
        for s in samples {
            if s.raster.len() != hw * hw * 3 {
                return Err(Error::contract(format!("baseline expects {hw}×{hw} rasters")));
            }
            for c in 0..3 {
                data.extend(s.raster.iter().skip(c).step_by(3).map(|&v| v as f64 / 127.5 - 1.0));
            }
            let f = normalize_frequency(s.condition.frequency_hz);
            data.extend(std::iter::repeat_n(f, hw * hw));
        }
        self.store.tensor_from(data, &[samples.len(), 4, hw, hw])
    }

    fn targets(&self, samples: &[&Sample]) -> Result<Tensor> {
        let g = self.config.grid_n;
        let mut data = Vec::with_capacity(samples.len() * g * g);
        for s in samples {
            if s.map.len() != g * g {
                return Err(Error::contract(format!("baseline expects {g}×{g} maps")));
            }
            data.extend(s.map_db().into_iter().map(|v| v / DB_SCALE));
        }
        self.store.tensor_from(data, &[samples.len(), 1, g, g])
    }

    /// Output in units of `DB_SCALE` dB.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for d in &self.down {
            h = d.forward(&silu(&h)?)?;
        }
        for (c1, c2) in &self.blocks {
            let r = c2.forward(&silu(&c1.forward(&silu(&h)?)?)?)?;
            h = (h + r)?;
        }
        self.conv_out.forward(&silu(&h)?)
    }

    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let y = self.forward(&self.inputs(chunk)?)?;
            let v = y.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let g2 = self.config.grid_n * self.config.grid_n;
            out.extend(v.chunks(g2).map(|m| m.iter().map(|x| x * DB_SCALE).collect::<Vec<f64>>()));
        }
        Ok(out)
    }

    pub fn evaluate(&self, samples: &[&Sample]) -> Result<Nmse> {
        let mut acc = NmseAccumulator::new();
        for (p, s) in self.predict(samples)?.iter().zip(samples) {
            acc.push(p, &s.map_db())?;
        }
        Ok(acc.finish()?)
    }

    /// Supervised MSE training; returns per-epoch mean loss.
    pub fn train(&self, samples: &[&Sample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::contract("no samples to train the baseline on"));
        }
        let mut opt = AdamW::new(
            self.store.vars(),
            ParamsAdamW {
                lr: cfg.optimizer.lr,
                beta1: cfg.optimizer.beta1,
                beta2: cfg.optimizer.beta2,
                eps: cfg.optimizer.eps,
                weight_decay: 0.0,
            },
        )?;
        let mut log = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            let (mut sum, mut n) = (0.0, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                let b: Vec<&Sample> = batch.iter().map(|&i| samples[i]).collect();
                let loss = candle_nn::loss::mse(&self.forward(&self.inputs(&b)?)?, &self.targets(&b)?)?;
                let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("baseline loss became {v} in epoch {epoch}")));
                }
                sum += v;
                n += 1;
                opt.backward_step(&loss)?;
            }
            log.push(sum / n as f64);
        }
        if let Some(last) = log.last() {
            info!("baseline: {} epochs, mse {last:.6}", cfg.epochs);
        }
        Ok(log)
    }

    pub fn to_checkpoint(&self, step: u64, meta: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            step,
            config: serde_json::to_value(&self.config)?,
            meta,
            tensors: self.store.snapshot()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: BaselineConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut b = Self::new(config, 0, dtype)?;
        b.store.load(&ckpt.tensors)?;
        Ok(b)
    }
}
