use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Batch;
use crate::tokenizer::{MASK, NUM_SPECIALS, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fr = [self.select_prob, self.mask_frac, self.random_frac, self.keep_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(TrainError::InvalidConfig(format!("masking fractions outside [0, 1]: {self:?}")));
        }
        if (self.mask_frac + self.random_frac + self.keep_frac - 1.0).abs() > 1e-9 {
            return Err(TrainError::InvalidConfig(format!("mask/random/keep must sum to 1: {self:?}")));
        }
        Ok(())
    }
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// A corrupted batch plus the positions the loss is taken over.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: Batch,
    /// Flat indices into the batch, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    pub corruption: Vec<Corruption>,
}

/// Whether a position may be selected: any real token, UNK included, but
/// not the structural specials.
fn maskable(id: u32) -> bool {
    id == UNK || id as usize >= NUM_SPECIALS
}

/// Selects each maskable position with `select_prob`, then corrupts it by
/// MASK, a uniform non-special id, or nothing.
pub fn mask_batch<R: Rng + ?Sized>(batch: &Batch, vocab_size: usize, policy: &MaskingPolicy, rng: &mut R) -> MaskedBatch {
    let mut out = batch.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut corruption = Vec::new();
    for i in 0..batch.rows() {
        let id = batch.ids[i];
        if !batch.attention[i] || !maskable(id) {
            continue;
        }
        if !rng.random_bool(policy.select_prob) {
            continue;
        }
        positions.push(i);
        targets.push(id as usize);
        let u: f64 = rng.random();
        let kind = if u < policy.mask_frac {
            out.ids[i] = MASK;
            Corruption::Mask
        } else if u < policy.mask_frac + policy.random_frac {
            out.ids[i] = rng.random_range(NUM_SPECIALS as u32..vocab_size as u32);
            Corruption::Random
        } else {
            Corruption::Keep
        };
        corruption.push(kind);
    }
    MaskedBatch {
        batch: out,
        positions,
        targets,
        corruption,
    }
}
