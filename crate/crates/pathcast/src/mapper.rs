//! Transformer mapping sensory tokens to channel-token logits. Every block's
//! feed-forward sublayer is a shared-routed mixture of experts whose top-2
//! gate reads only the fused frequency vector.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Tensor, D};
use pathcast_core::freq::BandRegistry;
use pathcast_core::routing::{route, RoutingDecision, TOP_K};
use pathcast_core::FrequencyCondition;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::freq_embed::FreqEmbedding;
use crate::nn::{gelu, LayerNorm, Linear};
use crate::store::{Init, ParamStore};

pub const CHECKPOINT_KIND: &str = "mapper";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    FixedOne,
    LearnedScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    FreqOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub n_routed: usize,
    pub d_ff: usize,
    pub top_k: usize,
    pub gate_source: GateSource,
    pub alpha_s_mode: AlphaMode,
    /// Width of each half of the fused frequency vector.
    pub freq_dim: usize,
    pub sensory_vocab: usize,
    pub channel_vocab: usize,
    /// Tokens per grid; sensory and channel grids share it.
    pub tokens: usize,
    /// Band frequencies in id order.
    pub bands_hz: Vec<f64>,
    pub use_freq_embedding: bool,
    pub use_routed_experts: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            n_heads: 4,
            d_model: 128,
            n_routed: 4,
            d_ff: 256,
            top_k: TOP_K,
            gate_source: GateSource::FreqOnly,
            alpha_s_mode: AlphaMode::LearnedScalar,
            freq_dim: 32,
            sensory_vocab: 128,
            channel_vocab: 128,
            tokens: 64,
            bands_hz: vec![1.6e9, 15e9, 28e9],
            use_freq_embedding: true,
            use_routed_experts: true,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_blocks,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.sensory_vocab,
            self.channel_vocab,
            self.tokens,
        ];
        if positive.contains(&0) {
            return Err(Error::contract("mapper sizes must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.top_k != TOP_K || self.n_routed < self.top_k {
            return Err(Error::contract(format!(
                "routing is top-{TOP_K} and needs at least {TOP_K} routed experts"
            )));
        }
        if self.bands_hz.is_empty() {
            return Err(Error::contract("mapper needs at least one band"));
        }
        Ok(())
    }

    /// 8 blocks, 16 heads, width 256, codebooks of 2048.
    pub fn full_scale() -> Self {
        Self {
            n_blocks: 8,
            n_heads: 16,
            d_model: 256,
            d_ff: 1024,
            sensory_vocab: 2048,
            channel_vocab: 2048,
            ..Self::default()
        }
    }

    pub fn registry(&self) -> BandRegistry {
        let mut r = BandRegistry::new();
        for &f in &self.bands_hz {
            r.register(f);
        }
        r
    }
}

#[derive(Debug, Clone)]
struct Expert {
    fc1: Linear,
    fc2: Linear,
}

impl Expert {
    fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d_ff)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_ff, d)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, s, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        let p = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = p.matmul(&v)?.transpose(1, 2)?.reshape((b, s, d))?;
        self.o.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct SrMoe {
    gate: Linear,
    shared: Expert,
    routed: Vec<Expert>,
    alpha_rho: Option<Tensor>,
}

impl SrMoe {
    pub fn alpha_s(&self) -> Result<Option<Tensor>> {
        Ok(match &self.alpha_rho {
            Some(rho) => Some(rho.exp()?),
            None => None,
        })
    }

    /// Gate logits `(B, N_r)` for fused frequency rows `(B, 2·freq_dim)`.
    pub fn gate_logits(&self, e_fused: &Tensor) -> Result<Tensor> {
        self.gate.forward(e_fused)
    }

    pub fn decisions(&self, gate_logits: &Tensor) -> Result<Vec<RoutingDecision>> {
        let rows = gate_logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        rows.iter().map(|r| Ok(route(r)?)).collect()
    }

    /// `α_s·E_s(x) + w₀·E_a(x) + w₁·E_b(x)`, one routing decision per sample.
    pub fn forward(&self, x: &Tensor, e_fused: &Tensor, routed: bool) -> Result<(Tensor, Vec<RoutingDecision>)> {
        let mut shared = self.shared.forward(x)?;
        if let Some(alpha) = self.alpha_s()? {
            shared = shared.broadcast_mul(&alpha)?;
        }
        if !routed {
            return Ok((shared, Vec::new()));
        }
        let logits = self.gate_logits(e_fused)?;
        let decisions = self.decisions(&logits)?;
        let routed_out = self.routed_mix(x, &logits, &decisions)?;
        Ok(((shared + routed_out)?, decisions))
    }

    fn routed_mix(&self, x: &Tensor, logits: &Tensor, decisions: &[RoutingDecision]) -> Result<Tensor> {
        let dev = x.device();
        let b = decisions.len();
        let sel: Vec<u32> = decisions
            .iter()
            .flat_map(|d| d.selected.iter().map(|&s| s as u32))
            .collect();
        let picked = logits.gather(&Tensor::from_vec(sel, (b, TOP_K), dev)?, 1)?;
        let weights = candle_nn::ops::softmax(&picked, 1)?;

        let mut groups: BTreeMap<[usize; TOP_K], Vec<u32>> = BTreeMap::new();
        for (i, d) in decisions.iter().enumerate() {
            groups.entry(d.selected).or_default().push(i as u32);
        }
        let mut outputs = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(b);
        for (selected, members) in &groups {
            let idx = Tensor::from_vec(members.clone(), members.len(), dev)?;
            let xg = x.index_select(&idx, 0)?;
            let wg = weights.index_select(&idx, 0)?;
            let mut y: Option<Tensor> = None;
            for (rank, &e) in selected.iter().enumerate() {
                let w = wg.narrow(1, rank, 1)?.unsqueeze(2)?;
                let term = self.routed[e].forward(&xg)?.broadcast_mul(&w)?;
                y = Some(match y {
                    Some(acc) => (acc + term)?,
                    None => term,
                });
            }
            outputs.push(y.expect("top-k is non-empty"));
            order.extend(members.iter().copied());
        }
        let stacked = Tensor::cat(&outputs, 0)?;
        let mut inverse = vec![0u32; b];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i as usize] = pos as u32;
        }
        Ok(stacked.index_select(&Tensor::from_vec(inverse, b, dev)?, 0)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    moe: SrMoe,
}

/// Logits plus the routing of every block, outer index = block.
#[derive(Debug, Clone)]
pub struct MapperOutput {
    pub logits: Tensor,
    pub routing: Vec<Vec<RoutingDecision>>,
}

pub struct Mapper {
    pub config: MapperConfig,
    pub store: ParamStore,
    pub freq: FreqEmbedding,
    tok_emb: Tensor,
    pos_emb: Tensor,
    cond_proj: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl fmt::Debug for Mapper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mapper")
            .field("config", &self.config)
            .field("parameters", &self.store.num_parameters())
            .finish()
    }
}

impl Mapper {
    pub fn new(config: MapperConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new(seed, dtype);
        let d = config.d_model;
        let freq = FreqEmbedding::new(&mut s, config.registry(), config.freq_dim)?;
        let tok_emb = s.param("tok_emb", &[config.sensory_vocab, d], Init::Normal(0.02))?;
        let pos_emb = s.param("pos_emb", &[config.tokens + 1, d], Init::Normal(0.02))?;
        let cond_proj = Linear::new(&mut s, "cond_proj", 2 * config.freq_dim, d)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let p = format!("block{i}");
            let ln1 = LayerNorm::new(&mut s, &format!("{p}.ln1"), d)?;
            let attn = Attention {
                q: Linear::new(&mut s, &format!("{p}.attn.q"), d, d)?,
                k: Linear::new(&mut s, &format!("{p}.attn.k"), d, d)?,
                v: Linear::new(&mut s, &format!("{p}.attn.v"), d, d)?,
                o: Linear::new(&mut s, &format!("{p}.attn.o"), d, d)?,
                heads: config.n_heads,
            };
            let ln2 = LayerNorm::new(&mut s, &format!("{p}.ln2"), d)?;
            let gate = Linear::with_init(&mut s, &format!("{p}.moe.gate"), 2 * config.freq_dim, config.n_routed, Init::Normal(0.5))?;
            let shared = Expert::new(&mut s, &format!("{p}.moe.shared"), d, config.d_ff)?;
            let routed = (0..config.n_routed)
                .map(|j| Expert::new(&mut s, &format!("{p}.moe.routed{j}"), d, config.d_ff))
                .collect::<Result<Vec<_>>>()?;
            let alpha_rho = match config.alpha_s_mode {
                AlphaMode::LearnedScalar => Some(s.param(format!("{p}.moe.alpha_rho"), &[1], Init::Zeros)?),
                AlphaMode::FixedOne => None,
            };
            blocks.push(Block {
                ln1,
                attn,
                ln2,
                moe: SrMoe { gate, shared, routed, alpha_rho },
            });
        }
        let ln_f = LayerNorm::new(&mut s, "ln_f", d)?;
        let head = Linear::new(&mut s, "head", d, config.channel_vocab)?;
        Ok(Self {
            config,
            store: s,
            freq,
            tok_emb,
            pos_emb,
            cond_proj,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn moe(&self, block: usize) -> Option<&SrMoe> {
        self.blocks.get(block).map(|b| &b.moe)
    }

    /// Condition for a carrier; unknown carriers need `zero_shot`.
    pub fn condition(&self, frequency_hz: f64, zero_shot: bool) -> Result<FrequencyCondition> {
        self.freq.condition(frequency_hz, zero_shot)
    }

    /// Registers an unseen band with a fresh embedding row.
    pub fn register_band(&mut self, frequency_hz: f64) -> Result<usize> {
        let id = self.freq.register(&mut self.store, frequency_hz)?;
        self.config.bands_hz = self.freq.registry.frequencies().to_vec();
        Ok(id)
    }

    /// `(B, T)` token ids from sensory grids.
    pub fn token_tensor(&self, grids: &[&TokenGrid]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(grids.len() * self.config.tokens);
        for g in grids {
            if g.indices.len() != self.config.tokens {
                return Err(Error::contract(format!(
                    "token grid has {} tokens, mapper expects {}",
                    g.indices.len(),
                    self.config.tokens
                )));
            }
            ids.extend_from_slice(&g.indices);
        }
        self.ids_tensor(ids, grids.len())
    }

    fn ids_tensor(&self, ids: Vec<u32>, batch: usize) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.sensory_vocab) {
            return Err(Error::contract(format!("sensory token {bad} outside vocabulary {}", self.config.sensory_vocab)));
        }
        Ok(Tensor::from_vec(ids, (batch, self.config.tokens), self.store.device())?)
    }

    /// Fused conditioning rows, zeroed when the frequency embedding is disabled.
    pub fn fused_condition(&self, conds: &[FrequencyCondition]) -> Result<Tensor> {
        let fused = self.freq.fused(conds)?;
        if self.config.use_freq_embedding {
            Ok(fused)
        } else {
            Ok(fused.zeros_like()?)
        }
    }

    /// Per-position channel logits `(B, T, K_channel)`.
    pub fn forward(&self, tokens: &Tensor, conds: &[FrequencyCondition]) -> Result<MapperOutput> {
        let (b, t) = tokens.dims2()?;
        if t != self.config.tokens || b != conds.len() {
            return Err(Error::contract(format!(
                "mapper expects ({}, {}) tokens, got {:?}",
                conds.len(),
                self.config.tokens,
                tokens.dims()
            )));
        }
        let d = self.config.d_model;
        let e_fused = self.fused_condition(conds)?;
        let cond_tok = self.cond_proj.forward(&e_fused)?.unsqueeze(1)?;
        let tok = self.tok_emb.index_select(&tokens.flatten_all()?, 0)?.reshape((b, t, d))?;
        let mut x = Tensor::cat(&[&cond_tok, &tok], 1)?.broadcast_add(&self.pos_emb)?;
        let mut routing = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = (&x + block.attn.forward(&block.ln1.forward(&x)?)?)?;
            let (y, dec) = block
                .moe
                .forward(&block.ln2.forward(&x)?, &e_fused, self.config.use_routed_experts)?;
            x = (x + y)?;
            routing.push(dec);
        }
        let x = self.ln_f.forward(&x.narrow(1, 1, t)?)?;
        Ok(MapperOutput {
            logits: self.head.forward(&x)?,
            routing,
        })
    }

    /// Argmax channel tokens per position.
    pub fn predict(&self, grids: &[&TokenGrid], conds: &[FrequencyCondition], hw: usize) -> Result<Vec<TokenGrid>> {
        let logits = self.forward(&self.token_tensor(grids)?, conds)?.logits;
        let best = logits.argmax(D::Minus1)?.to_vec2::<u32>()?;
        Ok(best
            .into_iter()
            .map(|indices| TokenGrid {
                modality: crate::codec::Modality::Channel,
                hw,
                indices,
            })
            .collect())
    }

    pub fn target_tensor(&self, grids: &[&TokenGrid]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(grids.len() * self.config.tokens);
        for g in grids {
            if g.indices.len() != self.config.tokens {
                return Err(Error::contract(format!(
                    "target grid has {} tokens, mapper emits {}",
                    g.indices.len(),
                    self.config.tokens
                )));
            }
            ids.extend_from_slice(&g.indices);
        }
        Ok(Tensor::from_vec(ids, (grids.len(), self.config.tokens), self.store.device())?)
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
        let config: MapperConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut mapper = Self::new(config, 0, dtype)?;
        mapper.store.load(&ckpt.tensors)?;
        Ok(mapper)
    }
}

/// Mean cross-entropy of `(B, T, K)` logits against `(B, T)` targets.
pub fn mapping_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, t, k) = logits.dims3()?;
    if targets.dims() != [b, t] {
        return Err(Error::contract(format!(
            "targets {:?} do not match logits {:?}",
            targets.dims(),
            logits.dims()
        )));
    }
    let flat = targets.flatten_all()?;
    if let Some(&bad) = flat.to_vec1::<u32>()?.iter().find(|&&i| i as usize >= k) {
        return Err(Error::contract(format!("target token {bad} outside channel codebook of {k}")));
    }
    Ok(candle_nn::loss::cross_entropy(&logits.reshape((b * t, k))?, &flat)?)
}

/// Entropy of expert usage counts, logged in place of a balancing loss.
pub fn usage_entropy(routing: &[RoutingDecision], n_routed: usize) -> f64 {
    let mut mass = vec![0.0; n_routed];
    for d in routing {
        for (s, w) in d.selected.iter().zip(d.weights) {
            mass[*s] += w;
        }
    }
    let total: f64 = mass.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    -mass
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|m| {
            let p = m / total;
            p * p.ln()
        })
        .sum::<f64>()
}
