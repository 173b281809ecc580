//! Deterministic denoiser that reproduces the stagnation trap.
//!
//! With only ground truth in context every masked position gets its truth
//! token at `c_high`. Each trap position instead prefers a decoy token,
//! slightly above the truth, as long as the window does not extend past the
//! trap's `reveal_at` boundary: the decoy is the locally plausible choice,
//! and only a wider window shows that it is wrong. Once a decoy is committed
//! and visible as context, every masked position is capped at `c_low`, which
//! stalls any threshold above it.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContextView, Denoiser, Prediction};
use crate::error::{Error, Result};
use crate::types::{BlockGrid, BlockWindow, TokenBuffer, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trap {
    /// Absolute buffer position.
    pub position: usize,
    pub decoy: u32,
    /// Decoy probability while the trap is unrevealed; the truth gets the
    /// remaining mass. Must exceed 0.5.
    pub decoy_confidence: f64,
    /// The truth wins once the evaluated window ends beyond this position.
    pub reveal_at: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapSpec {
    pub vocab_size: u32,
    pub prompt: Vec<u32>,
    /// Ground-truth continuation, one token per generated position.
    pub truth: Vec<u32>,
    #[serde(default)]
    pub traps: Vec<Trap>,
    pub c_high: f64,
    pub c_low: f64,
}

/// Parameters for generating random trap scenarios.
#[derive(Clone, Debug)]
pub struct TrapGen {
    pub vocab_size: u32,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub block_len: usize,
    pub traps: usize,
    pub c_high: f64,
    pub c_low: f64,
    pub decoy_confidence: f64,
}

impl TrapSpec {
    /// `trap1`: 32-token prompt, 256 generated tokens, one trap in the
    /// second generated block (block length 32).
    pub fn canonical() -> Self {
        let vocab_size = 16;
        let prompt = (0..32u32).map(|i| (i * 3 + 1) % vocab_size).collect();
        let truth: Vec<u32> = (0..256u32).map(|i| (i * 5 + 3) % vocab_size).collect();
        let position = 32 + 32 + 20;
        let decoy = (truth[position - 32] + 1) % vocab_size;
        Self {
            vocab_size,
            prompt,
            truth,
            traps: vec![Trap {
                position,
                decoy,
                decoy_confidence: 0.62,
                reveal_at: 96,
            }],
            c_high: 0.99,
            c_low: 0.6,
        }
    }

    /// Random scenario with traps in distinct blocks (never the last one, so
    /// a later window always sees the decoy). Each trap is revealed by any
    /// window extending past the end of its block.
    pub fn generate(params: &TrapGen, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = params.vocab_size;
        if v < 2 {
            return Err(Error::usage("trap vocabulary needs at least two tokens"));
        }
        let prompt = (0..params.prompt_len).map(|_| rng.gen_range(0..v)).collect();
        let truth: Vec<u32> = (0..params.gen_len).map(|_| rng.gen_range(0..v)).collect();
        let grid = BlockGrid::new(
            params.prompt_len,
            params.prompt_len + params.gen_len,
            params.block_len,
        )?;
        let candidates = grid.num_blocks().saturating_sub(1);
        let n = params.traps.min(candidates);
        let mut blocks: Vec<usize> = sample(&mut rng, candidates, n).into_vec();
        blocks.sort_unstable();
        let traps = blocks
            .into_iter()
            .map(|b| {
                let r = grid.block_range(b);
                let position = rng.gen_range(r.clone());
                let t = truth[position - params.prompt_len];
                Trap {
                    position,
                    decoy: (t + rng.gen_range(1..v)) % v,
                    decoy_confidence: params.decoy_confidence,
                    reveal_at: r.end,
                }
            })
            .collect();
        let spec = Self {
            vocab_size: v,
            prompt,
            truth,
            traps,
            c_high: params.c_high,
            c_low: params.c_low,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.into(),
            source,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.truth.len()
    }

    pub fn prompt_tokens(&self) -> Vec<TokenId> {
        self.prompt.iter().map(|&t| TokenId(t)).collect()
    }

    pub fn truth_tokens(&self) -> Vec<TokenId> {
        self.truth.iter().map(|&t| TokenId(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_low > 0.0 && self.c_high <= 1.0) {
            return Err(Error::usage("trap confidences must lie in (0, 1]"));
        }
        if self.c_low >= self.c_high {
            return Err(Error::usage(format!(
                "c_low ({}) must be below c_high ({})",
                self.c_low, self.c_high
            )));
        }
        let v = self.vocab_size;
        if self.prompt.iter().chain(&self.truth).any(|&t| t >= v) {
            return Err(Error::usage("trap spec token outside vocabulary"));
        }
        let p = self.prompt.len();
        for (i, trap) in self.traps.iter().enumerate() {
            if trap.position < p || trap.position >= self.total_len() {
                return Err(Error::usage(format!(
                    "trap {i} at {} outside generated span",
                    trap.position
                )));
            }
            if trap.decoy >= v || trap.decoy == self.truth[trap.position - p] {
                return Err(Error::usage(format!(
                    "trap {i}: decoy must be a valid token different from the truth"
                )));
            }
            if !(trap.decoy_confidence > 0.5 && trap.decoy_confidence <= 1.0) {
                return Err(Error::usage(format!(
                    "trap {i}: decoy confidence must lie in (0.5, 1]"
                )));
            }
            if trap.reveal_at <= trap.position {
                return Err(Error::usage(format!("trap {i}: reveal_at must follow the trap")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ScriptedDenoiser {
    spec: TrapSpec,
}

impl ScriptedDenoiser {
    pub fn new(spec: TrapSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &TrapSpec {
        &self.spec
    }

    fn decoys_in(&self, buffer: &TokenBuffer, range: Range<usize>) -> Vec<usize> {
        self.spec
            .traps
            .iter()
            .enumerate()
            .filter(|(_, t)| range.contains(&t.position) && buffer.token(t.position).0 == t.decoy)
            .map(|(i, _)| i)
            .collect()
    }
}

impl Denoiser for ScriptedDenoiser {
    /// Indices of traps whose decoy is committed inside the block.
    type BlockState = Vec<usize>;

    fn vocab_size(&self) -> u32 {
        self.spec.vocab_size
    }

    fn summarize_block(&self, buffer: &TokenBuffer, block: Range<usize>) -> Vec<usize> {
        self.decoys_in(buffer, block)
    }

    fn predict(
        &self,
        buffer: &TokenBuffer,
        window: &BlockWindow,
        context: &ContextView<Vec<usize>>,
    ) -> Result<Vec<Prediction>> {
        let p = self.spec.prompt.len();
        let poisoned = context.blocks.iter().any(|b| !b.is_empty())
            || !self.decoys_in(buffer, window.range()).is_empty();
        let out = buffer
            .masked_positions(window.range())
            .map(|pos| {
                let truth = TokenId(self.spec.truth[pos - p]);
                let trap = self
                    .spec
                    .traps
                    .iter()
                    .find(|t| t.position == pos && window.end <= t.reveal_at);
                match trap {
                    _ if poisoned => Prediction {
                        position: pos,
                        token: truth,
                        confidence: self.spec.c_low,
                        top_k: None,
                    },
                    Some(t) => Prediction {
                        position: pos,
                        token: TokenId(t.decoy),
                        confidence: t.decoy_confidence,
                        top_k: Some(vec![
                            (TokenId(t.decoy), t.decoy_confidence),
                            (truth, 1.0 - t.decoy_confidence),
                        ]),
                    },
                    None => Prediction {
                        position: pos,
                        token: truth,
                        confidence: self.spec.c_high,
                        top_k: None,
                    },
                }
            })
            .collect();
        Ok(out)
    }
}
