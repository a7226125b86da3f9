#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use candle_core::{DType, Tensor};
use pathcast::codec::{g_hinge, vq_loss, Codec, CodecConfig, Modality, Reduction};
use pathcast::gradcheck::{analytic, central_differences, relative_error};
use pathcast::mapper::{mapping_loss, AlphaMode, Mapper, MapperConfig};
use pathcast::Result;

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Under 500 parameters including the discriminator.
pub fn toy_codec_config() -> CodecConfig {
    CodecConfig {
        modality: Modality::Channel,
        input_hw: 4,
        channels: vec![2],
        res_blocks: vec![1],
        n_z: 2,
        codebook_size: 4,
        disc_channels: vec![],
        reduction: Reduction::Sum,
        ..CodecConfig::channel()
    }
}

pub fn toy_images(n: usize, hw: usize, c: usize, salt: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|k| {
            (0..hw * hw * c)
                .map(|i| ((i * 37 + k * 101 + salt * 53) % 251) as u8)
                .collect()
        })
        .collect()
}

pub fn generator_loss(codec: &Codec, x: &Tensor) -> Result<Tensor> {
    let cfg = &codec.config;
    let pass = codec.pass(x)?;
    let vq = vq_loss(x, &pass.x_hat, &pass.z, &pass.z_q, cfg.beta, cfg.reduction)?;
    let g = g_hinge(&codec.discriminate(&pass.x_hat)?)?;
    Ok((vq.total + (g * cfg.lambda_adv)?)?)
}

/// The generator loss with every stop-gradient quantity frozen at the
/// current parameters: smooth, and its true gradient at that point is the
/// straight-through gradient.
pub struct FrozenSurrogate {
    z0: Tensor,
    zq0: Tensor,
    indices: Vec<usize>,
}

impl FrozenSurrogate {
    pub fn capture(codec: &Codec, x: &Tensor) -> Result<Self> {
        let z0 = codec.encode(x)?.detach();
        let (zq0, indices) = codec.quantize(&z0)?;
        Ok(Self { z0, zq0: zq0.detach(), indices })
    }

    pub fn value(&self, codec: &Codec, x: &Tensor) -> Result<f64> {
        let cfg = &codec.config;
        let z = codec.encode(x)?;
        let zq = codec.lookup(&self.indices, x.dim(0)?)?;
        let shift = (&self.zq0 - &self.z0)?;
        let x_hat = codec.decode(&(&z + shift)?)?;
        let recon = (x - &x_hat)?.sqr()?.sum_all()?;
        let align = (&self.z0 - &zq)?.sqr()?.sum_all()?;
        let commit = (&self.zq0 - &z)?.sqr()?.sum_all()?;
        let g = codec.discriminate(&x_hat)?.mean_all()?.neg()?;
        Ok(scalar(&recon) + scalar(&align) + cfg.beta * scalar(&commit) + cfg.lambda_adv * scalar(&g))
    }
}

/// Relative error between analytic and finite-difference gradients of the
/// full codec generator loss, and the number of parameters checked.
pub fn codec_gradient_error(seed: u64) -> Result<(f64, usize)> {
    let codec = Codec::new(toy_codec_config(), seed, DType::F64)?;
    let imgs = toy_images(2, 4, 1, seed as usize);
    let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
    let x = codec.images_to_tensor(&refs)?;
    let vars = codec.store.vars();
    let grads = generator_loss(&codec, &x)?.backward()?;
    let a = analytic(&grads, &vars)?;
    let oracle = FrozenSurrogate::capture(&codec, &x)?;
    let fd = central_differences(&vars, 1e-6, || oracle.value(&codec, &x))?;
    Ok((relative_error(&a, &fd), codec.store.num_parameters()))
}

pub fn toy_mapper_config() -> MapperConfig {
    MapperConfig {
        n_blocks: 2,
        n_heads: 2,
        d_model: 16,
        n_routed: 4,
        d_ff: 8,
        freq_dim: 4,
        sensory_vocab: 6,
        channel_vocab: 5,
        tokens: 4,
        alpha_s_mode: AlphaMode::LearnedScalar,
        ..MapperConfig::default()
    }
}

/// Three samples, one per band; token values wrap into the vocabularies.
pub fn toy_mapper_batch(m: &Mapper) -> Result<(Tensor, Vec<pathcast_core::FrequencyCondition>, Tensor)> {
    let dev = m.store.device();
    let cfg = &m.config;
    let src: Vec<u32> = (0..3 * cfg.tokens).map(|i| ((i * 5 + 1) % cfg.sensory_vocab) as u32).collect();
    let tgt: Vec<u32> = (0..3 * cfg.tokens).map(|i| ((i * 3 + 2) % cfg.channel_vocab) as u32).collect();
    let tokens = Tensor::from_vec(src, (3, cfg.tokens), dev)?;
    let targets = Tensor::from_vec(tgt, (3, cfg.tokens), dev)?;
    let conds = vec![m.condition(1.6e9, false)?, m.condition(15e9, false)?, m.condition(28e9, false)?];
    Ok((tokens, conds, targets))
}

pub fn mapper_gradient_error(seed: u64) -> Result<(f64, usize)> {
    mapper_gradient_error_with(toy_mapper_config(), seed)
}

pub fn mapper_gradient_error_with(config: MapperConfig, seed: u64) -> Result<(f64, usize)> {
    let m = Mapper::new(config, seed, DType::F64)?;
    let (tokens, conds, targets) = toy_mapper_batch(&m)?;
    let loss = || -> Result<Tensor> { mapping_loss(&m.forward(&tokens, &conds)?.logits, &targets) };
    let vars = m.store.vars();
    let a = analytic(&loss()?.backward()?, &vars)?;
    let fd = central_differences(&vars, 1e-6, || Ok(scalar(&loss()?)))?;
    Ok((relative_error(&a, &fd), m.store.num_parameters()))
}
