//! Learnable band-id table fused with the sinusoidal value encoding.

use candle_core::{Tensor, Var};
use pathcast_core::freq::{encode_value, BandRegistry};
use pathcast_core::FrequencyCondition;

use crate::error::{Error, Result};
use crate::store::{Init, ParamStore};

pub const TABLE_NAME: &str = "freq.id_table";
pub const TABLE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct FreqEmbedding {
    pub table: Tensor,
    pub dim: usize,
    pub registry: BandRegistry,
}

impl FreqEmbedding {
    pub fn new(store: &mut ParamStore, registry: BandRegistry, dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::contract(format!("frequency embedding width {dim} must be even")));
        }
        if registry.is_empty() {
            return Err(Error::contract("band registry is empty"));
        }
        let table = store.param(TABLE_NAME, &[registry.len(), dim], Init::Normal(TABLE_INIT_STD))?;
        Ok(Self { table, dim, registry })
    }

    pub fn n_bands(&self) -> usize {
        self.registry.len()
    }

    /// Condition for `frequency_hz`; unknown bands need `zero_shot`.
    pub fn condition(&self, frequency_hz: f64, zero_shot: bool) -> Result<FrequencyCondition> {
        match self.registry.id_of(frequency_hz) {
            Some(id) => Ok(FrequencyCondition::new(Some(id), frequency_hz)?),
            None if zero_shot => Ok(FrequencyCondition::new(None, frequency_hz)?),
            None => Err(Error::contract(format!(
                "band {} GHz is not registered; register it or run zero-shot",
                frequency_hz / 1e9
            ))),
        }
    }

    pub fn embed_id(&self, id: usize) -> Result<Tensor> {
        if id >= self.n_bands() {
            return Err(Error::contract(format!("band id {id} outside table of {}", self.n_bands())));
        }
        Ok(self.table.get(id)?)
    }

    /// `(B, 2·dim)` rows `[e_id ‖ e_f]`; an absent band id contributes zeros.
    pub fn fused(&self, conds: &[FrequencyCondition]) -> Result<Tensor> {
        let b = conds.len();
        let dev = self.table.device();
        let mut ids = Vec::with_capacity(b);
        let mut mask = Vec::with_capacity(b);
        let mut ef = Vec::with_capacity(b * self.dim);
        for c in conds {
            match c.band_id {
                Some(id) if id >= self.n_bands() => {
                    return Err(Error::contract(format!("band id {id} outside table of {}", self.n_bands())))
                }
                Some(id) => {
                    ids.push(id as u32);
                    mask.push(1.0);
                }
                None => {
                    ids.push(0);
                    mask.push(0.0);
                }
            }
            ef.extend(encode_value(c.f_norm, self.dim)?);
        }
        let dtype = self.table.dtype();
        let e_id = self.table.index_select(&Tensor::from_vec(ids, b, dev)?, 0)?;
        let e_id = if mask.iter().all(|&m| m == 1.0) {
            e_id
        } else {
            e_id.broadcast_mul(&Tensor::from_vec(mask, (b, 1), dev)?.to_dtype(dtype)?)?
        };
        let e_f = Tensor::from_vec(ef, (b, self.dim), dev)?.to_dtype(dtype)?;
        Ok(Tensor::cat(&[&e_id, &e_f], 1)?)
    }

    /// Appends a freshly initialised row for an unseen band and returns its id.
    pub fn register(&mut self, store: &mut ParamStore, frequency_hz: f64) -> Result<usize> {
        if let Some(id) = self.registry.id_of(frequency_hz) {
            return Ok(id);
        }
        let row = store.sample(self.dim, Init::Normal(TABLE_INIT_STD));
        let row = store.tensor_from(row, &[1, self.dim])?;
        let grown = Tensor::cat(&[&self.table.detach(), &row], 0)?;
        let var = Var::from_tensor(&grown)?;
        self.table = var.as_tensor().clone();
        store.replace(TABLE_NAME, var)?;
        Ok(self.registry.register(frequency_hz))
    }
}
