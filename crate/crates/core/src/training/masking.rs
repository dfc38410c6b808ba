use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    /// Replaced by the mask id.
    Mask,
    /// Replaced by a uniformly drawn non-special id.
    Random,
    /// Left as is (still predicted).
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Per-position selection probability.
    pub mask_prob: f64,
    pub mask_id: u32,
    pub vocab_size: usize,
    /// Ids below this are special and never selected.
    pub num_special: usize,
}

impl MaskConfig {
    pub const DEFAULT_MASK_PROB: f64 = 0.15;
    /// Share of selected positions replaced by the mask id.
    pub const MASK_SHARE: f64 = 0.8;
    /// Share of selected positions replaced by a random id.
    pub const RANDOM_SHARE: f64 = 0.1;

    pub fn new(mask_id: u32, vocab_size: usize, num_special: usize) -> Self {
        Self {
            mask_prob: Self::DEFAULT_MASK_PROB,
            mask_id,
            vocab_size,
            num_special,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(TrainError::MaskProbability(self.mask_prob));
        }
        if self.num_special >= self.vocab_size {
            return Err(TrainError::NothingToMask);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    /// Input ids after corruption.
    pub ids: Vec<u32>,
    /// Selected positions in ascending order.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub labels: Vec<u32>,
    pub actions: Vec<MaskAction>,
}

fn apply<R: Rng>(out: &mut MaskedSequence, pos: usize, cfg: &MaskConfig, rng: &mut R) {
    let original = out.ids[pos];
    let u: f64 = rng.random();
    let action = if u < MaskConfig::MASK_SHARE {
        out.ids[pos] = cfg.mask_id;
        MaskAction::Mask
    } else if u < MaskConfig::MASK_SHARE + MaskConfig::RANDOM_SHARE {
        out.ids[pos] = rng.random_range(cfg.num_special as u32..cfg.vocab_size as u32);
        MaskAction::Random
    } else {
        MaskAction::Keep
    };
    out.positions.push(pos);
    out.labels.push(original);
    out.actions.push(action);
}

/// Selects each non-special position with probability `mask_prob`, then
/// corrupts it: 80% mask id, 10% random non-special id, 10% unchanged.
///
/// A zero probability is allowed and selects nothing.
pub fn mask_tokens<R: Rng>(ids: &[u32], cfg: &MaskConfig, rng: &mut R) -> Result<MaskedSequence, TrainError> {
    cfg.validate()?;
    let maskable = |id: u32| id as usize >= cfg.num_special;
    if !ids.iter().any(|&id| maskable(id)) {
        return Err(TrainError::NothingToMask);
    }
    let mut out = MaskedSequence {
        ids: ids.to_vec(),
        positions: Vec::new(),
        labels: Vec::new(),
        actions: Vec::new(),
    };
    for (pos, &id) in ids.iter().enumerate() {
        if maskable(id) && rng.random_bool(cfg.mask_prob) {
            apply(&mut out, pos, cfg, rng);
        }
    }
    Ok(out)
}

/// Selects exactly one maskable position uniformly and corrupts it like
/// [`mask_tokens`]. Used when a whole batch came out with no selection.
pub fn mask_one<R: Rng>(ids: &[u32], cfg: &MaskConfig, rng: &mut R) -> Result<MaskedSequence, TrainError> {
    cfg.validate()?;
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] as usize >= cfg.num_special).collect();
    if candidates.is_empty() {
        return Err(TrainError::NothingToMask);
    }
    let mut out = MaskedSequence {
        ids: ids.to_vec(),
        positions: Vec::new(),
        labels: Vec::new(),
        actions: Vec::new(),
    };
    let pos = candidates[rng.random_range(0..candidates.len())];
    apply(&mut out, pos, cfg, rng);
    Ok(out)
}

/// [`mask_tokens`] with a fresh generator seeded from `seed`.
pub fn mask_tokens_seeded(ids: &[u32], cfg: &MaskConfig, seed: u64) -> Result<MaskedSequence, TrainError> {
    mask_tokens(ids, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}
