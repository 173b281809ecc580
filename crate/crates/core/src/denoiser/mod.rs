//! Model-evaluation contract and the in-process reference denoisers.
//!
//! A denoiser predicts every masked position of the current window. It sees
//! the prompt and the window directly, but committed blocks between the
//! prompt and the window only through per-block summaries it produced
//! earlier ([`Denoiser::summarize_block`]). Those summaries are what the
//! block cache memoizes, so a stale cache would show up as a different
//! prediction.

mod bigram;
mod scripted;

use std::ops::Range;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BlockWindow, TokenBuffer, TokenId};

pub use bigram::{load_corpus, BigramDenoiser, DEFAULT_SMOOTHING};
pub use scripted::{ScriptedDenoiser, Trap, TrapGen, TrapSpec};

const TOP_K_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub position: usize,
    /// Argmax token.
    pub token: TokenId,
    /// Maximum predicted probability, in (0, 1].
    pub confidence: f64,
    /// Highest-probability candidates, descending.
    pub top_k: Option<Vec<(TokenId, f64)>>,
}

/// Result of one forward evaluation (one NFE).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserOutput {
    pub eval_id: u64,
    /// One entry per masked position of the window, ascending by position.
    pub predictions: Vec<Prediction>,
}

impl DenoiserOutput {
    pub fn get(&self, position: usize) -> Option<&Prediction> {
        self.predictions
            .binary_search_by_key(&position, |p| p.position)
            .ok()
            .map(|i| &self.predictions[i])
    }

    /// Highest-confidence prediction; the lowest position wins ties.
    pub fn argmax(&self) -> Option<&Prediction> {
        self.predictions.iter().fold(None, |best, p| match best {
            Some(b) if b.confidence >= p.confidence => Some(b),
            _ => Some(p),
        })
    }
}

/// Committed-context summaries for every block left of the window, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextView<S> {
    pub blocks: Vec<S>,
}

/// The reverse process `p_theta` as seen by the decoder.
pub trait Denoiser {
    /// Opaque per-block context state, produced and interpreted by the
    /// denoiser and stored by the block cache.
    type BlockState: Clone + std::fmt::Debug + PartialEq;

    fn vocab_size(&self) -> u32;

    /// Summarize a fully committed block for later use as prefix context.
    fn summarize_block(&self, buffer: &TokenBuffer, block: Range<usize>) -> Self::BlockState;

    /// Predict every masked position in `window`. Must not read generated
    /// positions outside the window; earlier blocks are available only
    /// through `context`.
    fn predict(
        &self,
        buffer: &TokenBuffer,
        window: &BlockWindow,
        context: &ContextView<Self::BlockState>,
    ) -> Result<Vec<Prediction>>;

    /// Drop any backend-side state for `range`. In-process denoisers keep
    /// nothing outside the block cache.
    fn invalidate(&self, _range: Range<usize>) -> Result<()> {
        Ok(())
    }
}

/// Check a prediction list against the output contract for `window`.
pub fn check_predictions(
    buffer: &TokenBuffer,
    window: &BlockWindow,
    vocab_size: u32,
    predictions: &[Prediction],
) -> Result<()> {
    let expected: Vec<usize> = buffer.masked_positions(window.range()).collect();
    let got: Vec<usize> = predictions.iter().map(|p| p.position).collect();
    if expected != got {
        return Err(Error::Contract(format!(
            "predictions cover {got:?}, window masks are {expected:?}"
        )));
    }
    for p in predictions {
        if p.token.is_mask() || p.token.0 >= vocab_size {
            return Err(Error::Contract(format!(
                "position {}: token {:?} outside vocabulary of {vocab_size}",
                p.position, p.token
            )));
        }
        if !(p.confidence > 0.0 && p.confidence <= 1.0) {
            return Err(Error::Contract(format!(
                "position {}: confidence {} outside (0, 1]",
                p.position, p.confidence
            )));
        }
        if let Some(top) = &p.top_k {
            let first = top.first().map(|t| t.1);
            if first != Some(p.confidence) {
                return Err(Error::Contract(format!(
                    "position {}: confidence does not match top-k head",
                    p.position
                )));
            }
            if top.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(Error::Contract(format!(
                    "position {}: top-k not sorted",
                    p.position
                )));
            }
            let sum: f64 = top.iter().map(|t| t.1).sum();
            if sum > 1.0 + TOP_K_SLACK {
                return Err(Error::Contract(format!(
                    "position {}: top-k mass {sum} exceeds 1",
                    p.position
                )));
            }
        }
    }
    Ok(())
}

/// Forward corruption: each generated position is independently replaced by
/// MASK with probability `1 - alpha_bar`.
pub fn forward_corrupt(clean: &TokenBuffer, alpha_bar: f64, seed: u64) -> Result<TokenBuffer> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::usage(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    if !clean.is_complete() {
        return Err(Error::usage("clean sequence contains MASK"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clean.clone();
    for pos in clean.prompt_len()..clean.len() {
        if rng.gen::<f64>() >= alpha_bar {
            out.mask(pos)?;
        }
    }
    Ok(out)
}
