//! Vector-quantised image codec with a patch discriminator.
//!
//! One implementation serves both modalities: 3-channel scene rasters and
//! 1-channel pathloss maps. Images enter as bytes and are scaled to
//! `[-1, 1]`; the decoder ends in `tanh`.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use pathcast_core::quantize::quantize_rows;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, silu, Conv2d};
use crate::store::{Init, ParamStore};

pub const CHECKPOINT_KIND: &str = "codec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sensory,
    Channel,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Sensory => 3,
            Modality::Channel => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Sensory => "sensory",
            Modality::Channel => "channel",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensory" => Ok(Modality::Sensory),
            "channel" => Ok(Modality::Channel),
            other => Err(Error::contract(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub modality: Modality,
    pub input_hw: usize,
    /// Feature width per resolution level; its length is the number of
    /// stride-2 downsamplings.
    pub channels: Vec<usize>,
    /// Residual blocks per level, full resolution first.
    pub res_blocks: Vec<usize>,
    /// Residual blocks at the latent resolution, on each side.
    pub mid_blocks: usize,
    pub n_z: usize,
    pub codebook_size: usize,
    pub disc_channels: Vec<usize>,
    pub beta: f64,
    pub lambda_adv: f64,
    /// Fraction of epochs trained without the adversarial term.
    pub adv_warmup: f64,
    pub reduction: Reduction,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::sensory()
    }
}

impl CodecConfig {
    pub fn sensory() -> Self {
        Self {
            modality: Modality::Sensory,
            input_hw: 64,
            channels: vec![32, 64, 64],
            res_blocks: vec![1, 1, 1],
            mid_blocks: 1,
            n_z: 32,
            codebook_size: 128,
            disc_channels: vec![32, 64],
            beta: 0.25,
            lambda_adv: 0.1,
            adv_warmup: 0.3,
            reduction: Reduction::Mean,
        }
    }

    /// 32×32 maps down to the same 8×8 token grid as the sensory default.
    pub fn channel() -> Self {
        Self {
            modality: Modality::Channel,
            input_hw: 32,
            channels: vec![32, 64],
            res_blocks: vec![1, 1],
            ..Self::sensory()
        }
    }

    /// Narrow variant sized for a single CPU core: thin full-resolution
    /// levels without residual blocks.
    pub fn compact(modality: Modality) -> Self {
        let base = Self {
            n_z: 16,
            codebook_size: 64,
            disc_channels: vec![8, 16],
            ..Self::for_modality(modality)
        };
        match modality {
            Modality::Sensory => Self {
                channels: vec![8, 16, 32],
                res_blocks: vec![0, 0, 1],
                ..base
            },
            Modality::Channel => Self {
                channels: vec![16, 32],
                res_blocks: vec![0, 1],
                ..base
            },
        }
    }

    /// Default architecture with a 2048-entry codebook.
    pub fn full_scale(modality: Modality) -> Self {
        Self {
            codebook_size: 2048,
            ..Self::for_modality(modality)
        }
    }

    pub fn for_modality(modality: Modality) -> Self {
        match modality {
            Modality::Sensory => Self::sensory(),
            Modality::Channel => Self::channel(),
        }
    }

    pub fn n_down(&self) -> usize {
        self.channels.len()
    }

    pub fn latent_hw(&self) -> usize {
        self.input_hw >> self.n_down()
    }

    pub fn tokens(&self) -> usize {
        self.latent_hw() * self.latent_hw()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::contract("codec needs at least one non-empty level"));
        }
        if self.res_blocks.len() != self.channels.len() {
            return Err(Error::contract(format!(
                "{} residual-block counts for {} levels",
                self.res_blocks.len(),
                self.channels.len()
            )));
        }
        if self.input_hw == 0 || !self.input_hw.is_multiple_of(1 << self.n_down()) {
            return Err(Error::contract(format!(
                "input size {} is not divisible by 2^{}",
                self.input_hw,
                self.n_down()
            )));
        }
        if self.n_z == 0 || self.codebook_size == 0 {
            return Err(Error::contract("n_z and codebook_size must be positive"));
        }
        if self.disc_channels.contains(&0) {
            return Err(Error::contract("discriminator widths must be positive"));
        }
        if !(self.beta >= 0.0 && self.lambda_adv >= 0.0 && (0.0..=1.0).contains(&self.adv_warmup)) {
            return Err(Error::contract("beta, lambda_adv and adv_warmup out of range"));
        }
        Ok(())
    }
}

/// Token indices of one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub modality: Modality,
    pub hw: usize,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(x)?)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        Ok((x + h)?)
    }
}

fn run_blocks(blocks: &[ResBlock], mut x: Tensor) -> Result<Tensor> {
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

/// Outputs of one training-mode pass.
#[derive(Debug, Clone)]
pub struct CodecPass {
    pub z: Tensor,
    pub z_q: Tensor,
    pub indices: Vec<usize>,
    pub x_hat: Tensor,
}

#[derive(Debug, Clone)]
pub struct VqLoss {
    pub total: Tensor,
    pub recon: Tensor,
    pub codebook: Tensor,
    pub commit: Tensor,
}

pub struct Codec {
    pub config: CodecConfig,
    pub store: ParamStore,
    enc_in: Conv2d,
    enc_levels: Vec<(Vec<ResBlock>, Conv2d)>,
    enc_mid: Vec<ResBlock>,
    enc_out: Conv2d,
    codebook: Tensor,
    dec_in: Conv2d,
    dec_mid: Vec<ResBlock>,
    dec_levels: Vec<(Conv2d, Vec<ResBlock>)>,
    dec_out: Conv2d,
    disc: Vec<Conv2d>,
    disc_out: Conv2d,
}

impl fmt::Debug for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Codec")
            .field("config", &self.config)
            .field("parameters", &self.store.num_parameters())
            .finish()
    }
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new(seed, dtype);
        let ch = &config.channels;
        let n = ch.len();
        let c_img = config.modality.channels();
        let res = |s: &mut ParamStore, name: String, c: usize, count: usize| -> Result<Vec<ResBlock>> {
            (0..count)
                .map(|i| ResBlock::new(s, &format!("{name}.res{i}"), c))
                .collect()
        };

        let enc_in = Conv2d::new(&mut s, "enc.in", c_img, ch[0], 3, 1, 1)?;
        let mut enc_levels = Vec::with_capacity(n);
        for i in 0..n {
            let blocks = res(&mut s, format!("enc.level{i}"), ch[i], config.res_blocks[i])?;
            let next = ch[(i + 1).min(n - 1)];
            let down = Conv2d::new(&mut s, &format!("enc.level{i}.down"), ch[i], next, 4, 2, 1)?;
            enc_levels.push((blocks, down));
        }
        let enc_mid = res(&mut s, "enc.mid".into(), ch[n - 1], config.mid_blocks)?;
        let enc_out = Conv2d::new(&mut s, "enc.out", ch[n - 1], config.n_z, 1, 1, 0)?;

        let k = config.codebook_size as f64;
        let codebook = s.param("codebook", &[config.codebook_size, config.n_z], Init::Uniform(-1.0 / k, 1.0 / k))?;

        let dec_in = Conv2d::new(&mut s, "dec.in", config.n_z, ch[n - 1], 1, 1, 0)?;
        let dec_mid = res(&mut s, "dec.mid".into(), ch[n - 1], config.mid_blocks)?;
        let mut dec_levels = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let from = ch[(i + 1).min(n - 1)];
            let up = Conv2d::new(&mut s, &format!("dec.level{i}.up"), from, ch[i], 3, 1, 1)?;
            let blocks = res(&mut s, format!("dec.level{i}"), ch[i], config.res_blocks[i])?;
            dec_levels.push((up, blocks));
        }
        let dec_out = Conv2d::new(&mut s, "dec.out", ch[0], c_img, 3, 1, 1)?;

        let mut disc = Vec::with_capacity(config.disc_channels.len());
        let mut c_prev = c_img;
        for (i, &c) in config.disc_channels.iter().enumerate() {
            disc.push(Conv2d::new(&mut s, &format!("disc.conv{i}"), c_prev, c, 4, 2, 1)?);
            c_prev = c;
        }
        let disc_out = Conv2d::new(&mut s, "disc.out", c_prev, 1, 3, 1, 1)?;

        Ok(Self {
            config,
            store: s,
            enc_in,
            enc_levels,
            enc_mid,
            enc_out,
            codebook,
            dec_in,
            dec_mid,
            dec_levels,
            dec_out,
            disc,
            disc_out,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Stacks HWC byte images into a normalised `(B, C, H, W)` tensor.
    pub fn images_to_tensor(&self, images: &[&[u8]]) -> Result<Tensor> {
        let c = self.config.modality.channels();
        let hw = self.config.input_hw;
        let mut data = Vec::with_capacity(images.len() * c * hw * hw);
        for img in images {
            if img.len() != hw * hw * c {
                return Err(Error::contract(format!(
                    "{} codec expects {hw}×{hw}×{c} images, got {} bytes",
                    self.config.modality,
                    img.len()
                )));
            }
            for ch in 0..c {
                data.extend(img.iter().skip(ch).step_by(c).map(|&v| v as f64 / 127.5 - 1.0));
            }
        }
        self.store.tensor_from(data, &[images.len(), c, hw, hw])
    }

    /// Converts decoder output back to HWC bytes.
    pub fn tensor_to_images(&self, x: &Tensor) -> Result<Vec<Vec<u8>>> {
        let (b, c, h, w) = x.dims4()?;
        let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let plane = h * w;
        Ok((0..b)
            .map(|i| {
                let mut img = vec![0u8; plane * c];
                for ch in 0..c {
                    for p in 0..plane {
                        let y = v[(i * c + ch) * plane + p];
                        img[p * c + ch] = ((y + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    }
                }
                img
            })
            .collect())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let hw = self.config.input_hw;
        if c != self.config.modality.channels() || h != hw || w != hw {
            return Err(Error::contract(format!(
                "{} codec expects (B, {}, {hw}, {hw}), got {:?}",
                self.config.modality,
                self.config.modality.channels(),
                x.dims()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.enc_in.forward(x)?;
        for (blocks, down) in &self.enc_levels {
            h = down.forward(&run_blocks(blocks, h)?)?;
        }
        let h = run_blocks(&self.enc_mid, h)?;
        self.enc_out.forward(&silu(&h)?)
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn codebook_values(&self) -> Result<Vec<f64>> {
        Ok(self.codebook.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// Nearest-codeword indices for a `(B, n_z, h, w)` latent, ordered
    /// batch-major then row-major.
    pub fn quantize_indices(&self, z: &Tensor) -> Result<Vec<usize>> {
        let (_, nz, _, _) = z.dims4()?;
        if nz != self.config.n_z {
            return Err(Error::contract(format!("latent has {nz} features, codebook has {}", self.config.n_z)));
        }
        let rows = z.permute((0, 2, 3, 1))?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(quantize_rows(&self.codebook_values()?, nz, &rows)?)
    }

    /// Codeword lookup back into a `(B, n_z, hw, hw)` latent.
    pub fn lookup(&self, indices: &[usize], batch: usize) -> Result<Tensor> {
        let hw = self.config.latent_hw();
        if indices.len() != batch * hw * hw {
            return Err(Error::contract(format!(
                "{} indices do not fill {batch} grids of {hw}×{hw}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.config.codebook_size) {
            return Err(Error::contract(format!("token {bad} outside codebook of {}", self.config.codebook_size)));
        }
        let ids = Tensor::from_vec(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), indices.len(), self.store.device())?;
        let rows = self.codebook.index_select(&ids, 0)?;
        Ok(rows
            .reshape((batch, hw, hw, self.config.n_z))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    pub fn quantize(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.quantize_indices(z)?;
        let zq = self.lookup(&idx, z.dim(0)?)?;
        Ok((zq, idx))
    }

    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        let (_, nz, h, w) = z_q.dims4()?;
        let hw = self.config.latent_hw();
        if nz != self.config.n_z || h != hw || w != hw {
            return Err(Error::contract(format!(
                "decoder expects (B, {}, {hw}, {hw}), got {:?}",
                self.config.n_z,
                z_q.dims()
            )));
        }
        let mut x = self.dec_in.forward(z_q)?;
        x = run_blocks(&self.dec_mid, x)?;
        for (up, blocks) in &self.dec_levels {
            let (_, _, h, w) = x.dims4()?;
            x = up.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?;
            x = run_blocks(blocks, x)?;
        }
        Ok(self.dec_out.forward(&silu(&x)?)?.tanh()?)
    }

    /// Patch logits.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for conv in &self.disc {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        self.disc_out.forward(&h)
    }

    /// Encode, quantise with a straight-through estimator, decode.
    pub fn pass(&self, x: &Tensor) -> Result<CodecPass> {
        let z = self.encode(x)?;
        let (z_q, indices) = self.quantize(&z)?;
        let st = (&z + (&z_q - &z)?.detach())?;
        let x_hat = self.decode(&st)?;
        Ok(CodecPass { z, z_q, indices, x_hat })
    }

    /// Eval-mode reconstruction.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (zq, _) = self.quantize(&self.encode(x)?)?;
        self.decode(&zq)
    }

    pub fn tokenize(&self, images: &[&[u8]]) -> Result<Vec<TokenGrid>> {
        let hw = self.config.latent_hw();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let z = self.encode(&self.images_to_tensor(chunk)?)?;
            let idx = self.quantize_indices(&z)?;
            out.extend(idx.chunks(hw * hw).map(|c| TokenGrid {
                modality: self.config.modality,
                hw,
                indices: c.iter().map(|&i| i as u32).collect(),
            }));
        }
        Ok(out)
    }

    pub fn decode_tokens(&self, grids: &[TokenGrid]) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(32) {
            let mut idx = Vec::with_capacity(chunk.len() * self.config.tokens());
            for g in chunk {
                if g.modality != self.config.modality || g.hw != self.config.latent_hw() {
                    return Err(Error::contract(format!(
                        "{} {}×{} token grid does not fit the {} codec",
                        g.modality, g.hw, g.hw, self.config.modality
                    )));
                }
                idx.extend(g.indices.iter().map(|&i| i as usize));
            }
            let zq = self.lookup(&idx, chunk.len())?;
            out.extend(self.tensor_to_images(&self.decode(&zq)?)?);
        }
        Ok(out)
    }

    /// Replaces the listed codewords with the given vectors.
    pub fn reseed_codes<R: Rng>(&self, dead: &[usize], pool: &[Vec<f64>], rng: &mut R) -> Result<()> {
        if dead.is_empty() || pool.is_empty() {
            return Ok(());
        }
        let mut values = self.codebook_values()?;
        let nz = self.config.n_z;
        for &k in dead {
            let src = &pool[rng.random_range(0..pool.len())];
            values[k * nz..(k + 1) * nz].copy_from_slice(src);
        }
        let var = self
            .store
            .find("codebook")
            .ok_or_else(|| Error::contract("codec has no codebook"))?;
        var.set(&self.store.tensor_from(values, &[self.config.codebook_size, nz])?)?;
        Ok(())
    }

    pub fn generator_vars(&self) -> Vec<candle_core::Var> {
        self.store
            .named()
            .iter()
            .filter(|(n, _)| !n.starts_with("disc."))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn discriminator_vars(&self) -> Vec<candle_core::Var> {
        self.store.vars_with_prefix("disc.")
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.store.fingerprint()
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
        let config: CodecConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut codec = Self::new(config, 0, dtype)?;
        codec.store.load(&ckpt.tensors)?;
        Ok(codec)
    }
}

fn reduce(x: &Tensor, reduction: Reduction) -> Result<Tensor> {
    Ok(match reduction {
        Reduction::Sum => x.sum_all()?,
        Reduction::Mean => x.mean_all()?,
    })
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Reconstruction + codebook alignment + `beta`-weighted commitment.
pub fn vq_loss(x: &Tensor, x_hat: &Tensor, z: &Tensor, z_q: &Tensor, beta: f64, reduction: Reduction) -> Result<VqLoss> {
    same_shape(x, x_hat, "reconstruction")?;
    same_shape(z, z_q, "latent")?;
    let recon = reduce(&(x - x_hat)?.sqr()?, reduction)?;
    let codebook = reduce(&(z.detach() - z_q)?.sqr()?, reduction)?;
    let commit = (reduce(&(z_q.detach() - z)?.sqr()?, reduction)? * beta)?;
    let total = (&recon + &codebook)?.add(&commit)?;
    Ok(VqLoss { total, recon, codebook, commit })
}

/// Hinge discriminator loss.
pub fn d_hinge(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    same_shape(real_logits, fake_logits, "discriminator logits")?;
    let real = (1.0 - real_logits)?.relu()?.mean_all()?;
    let fake = (fake_logits + 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// Hinge generator loss.
pub fn g_hinge(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

/// Discriminator and generator losses for a real/fake pair.
pub fn adversarial_losses(codec: &Codec, x_real: &Tensor, x_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape(x_real, x_fake, "adversarial inputs")?;
    let d = d_hinge(&codec.discriminate(x_real)?, &codec.discriminate(&x_fake.detach())?)?;
    let g = g_hinge(&codec.discriminate(x_fake)?)?;
    Ok((d, g))
}

pub fn usage_histogram(indices: &[usize], codebook_size: usize) -> Vec<usize> {
    let mut h = vec![0; codebook_size];
    for &i in indices {
        h[i] += 1;
    }
    h
}
