//! Token, sequence, window and trace vocabulary shared by every other module.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into an abstract vocabulary. `TokenId::MASK` is the reserved sentinel.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const MASK: TokenId = TokenId(u32::MAX);

    #[inline]
    pub fn is_mask(self) -> bool {
        self == Self::MASK
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_mask() {
            f.write_str("[MASK]")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// The partially denoised sequence, prompt included.
///
/// Every generated position carries the confidence it was committed with, so
/// re-masking after a rollback can reuse it without another model call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBuffer {
    tokens: Vec<TokenId>,
    commit_confidence: Vec<Option<f64>>,
    prompt_len: usize,
}

impl TokenBuffer {
    /// Prompt followed by `total_len - prompt.len()` MASK positions.
    pub fn with_prompt(prompt: &[TokenId], total_len: usize) -> Result<Self> {
        if prompt.len() > total_len {
            return Err(Error::usage(format!(
                "prompt length {} exceeds total length {total_len}",
                prompt.len()
            )));
        }
        if prompt.iter().any(|t| t.is_mask()) {
            return Err(Error::usage("prompt contains MASK"));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(total_len, TokenId::MASK);
        Ok(Self {
            tokens,
            commit_confidence: vec![None; total_len],
            prompt_len: prompt.len(),
        })
    }

    /// A fully committed buffer; generated positions get confidence 1.
    pub fn from_tokens(tokens: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::usage("prompt length exceeds buffer length"));
        }
        if tokens.iter().any(|t| t.is_mask()) {
            return Err(Error::usage("clean buffer contains MASK"));
        }
        let commit_confidence = (0..tokens.len())
            .map(|i| (i >= prompt_len).then_some(1.0))
            .collect();
        Ok(Self {
            tokens,
            commit_confidence,
            prompt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn token(&self, pos: usize) -> TokenId {
        self.tokens[pos]
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.tokens[pos].is_mask()
    }

    pub fn commit_confidence(&self, pos: usize) -> Option<f64> {
        self.commit_confidence[pos]
    }

    pub fn commit_confidences(&self) -> &[Option<f64>] {
        &self.commit_confidence
    }

    pub fn is_complete(&self) -> bool {
        !self.tokens.iter().any(|t| t.is_mask())
    }

    pub fn masked_positions(&self, range: Range<usize>) -> impl Iterator<Item = usize> + '_ {
        range.filter(move |&i| self.tokens[i].is_mask())
    }

    pub fn commit(&mut self, pos: usize, token: TokenId, confidence: f64) -> Result<()> {
        if pos < self.prompt_len || pos >= self.tokens.len() {
            return Err(Error::usage(format!("commit outside generation span: {pos}")));
        }
        if token.is_mask() {
            return Err(Error::usage("cannot commit MASK"));
        }
        if !(confidence > 0.0 && confidence <= 1.0) {
            return Err(Error::usage(format!(
                "commit confidence {confidence} outside (0, 1]"
            )));
        }
        self.tokens[pos] = token;
        self.commit_confidence[pos] = Some(confidence);
        Ok(())
    }

    pub fn mask(&mut self, pos: usize) -> Result<()> {
        if pos < self.prompt_len || pos >= self.tokens.len() {
            return Err(Error::usage(format!("mask outside generation span: {pos}")));
        }
        self.tokens[pos] = TokenId::MASK;
        self.commit_confidence[pos] = None;
        Ok(())
    }
}

/// The window currently being decoded: `[start, end)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWindow {
    pub start: usize,
    pub end: usize,
    pub block_len: usize,
}

impl BlockWindow {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }

    /// Merge the preceding block into this window: start moves back by one
    /// block (clipped at the prompt), end stays.
    pub fn merge_back(&self, prompt_len: usize) -> Result<BlockWindow> {
        if self.start <= prompt_len {
            return Err(Error::RollbackAtOrigin {
                start: self.start,
                prompt_len,
            });
        }
        Ok(BlockWindow {
            start: self.start.saturating_sub(self.block_len).max(prompt_len),
            ..*self
        })
    }
}

/// `|{ i in window : tokens[i] = MASK }|`.
pub fn count_masks(buffer: &TokenBuffer, window: &BlockWindow) -> Result<usize> {
    if window.start > window.end || window.end > buffer.len() || window.start < buffer.prompt_len()
    {
        return Err(Error::usage(format!(
            "window [{}, {}) outside generation span [{}, {})",
            window.start,
            window.end,
            buffer.prompt_len(),
            buffer.len()
        )));
    }
    Ok(buffer.masked_positions(window.range()).count())
}

/// Block layout of a generation span.
///
/// Block boundaries are anchored at the end of the sequence, so when the
/// generation length is not a multiple of the block length the *first* block
/// is shortened and all later blocks stay aligned.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub prompt_len: usize,
    pub total_len: usize,
    pub block_len: usize,
}

impl BlockGrid {
    pub fn new(prompt_len: usize, total_len: usize, block_len: usize) -> Result<Self> {
        if block_len == 0 {
            return Err(Error::usage("block length must be positive"));
        }
        if prompt_len >= total_len {
            return Err(Error::usage(format!(
                "prompt length {prompt_len} must be shorter than total length {total_len}"
            )));
        }
        Ok(Self {
            prompt_len,
            total_len,
            block_len,
        })
    }

    pub fn gen_len(&self) -> usize {
        self.total_len - self.prompt_len
    }

    /// K, the number of blocks (the first one possibly short).
    pub fn num_blocks(&self) -> usize {
        self.gen_len().div_ceil(self.block_len)
    }

    /// How much shorter the first block is than the rest.
    fn shortfall(&self) -> usize {
        self.num_blocks() * self.block_len - self.gen_len()
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        let shift = self.shortfall();
        let start = self.prompt_len + (block * self.block_len).saturating_sub(shift);
        let end = (self.prompt_len + (block + 1) * self.block_len - shift).min(self.total_len);
        start..end
    }

    pub fn block_of(&self, pos: usize) -> usize {
        debug_assert!(pos >= self.prompt_len && pos < self.total_len);
        (pos - self.prompt_len + self.shortfall()) / self.block_len
    }

    pub fn window(&self, block: usize) -> BlockWindow {
        let r = self.block_range(block);
        BlockWindow {
            start: r.start,
            end: r.end,
            block_len: self.block_len,
        }
    }

    pub fn is_boundary(&self, pos: usize) -> bool {
        pos == self.prompt_len
            || pos == self.total_len
            || (pos > self.prompt_len
                && pos < self.total_len
                && (pos - self.prompt_len + self.shortfall()) % self.block_len == 0)
    }
}

/// Scheduling mode of the dual-scale policy.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Normal,
    Recovery,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Decode,
    Stagnate,
    Rollback,
    Remask,
    Force,
    BlockDone,
}

/// One decoding action. Serialized one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub kind: EventKind,
    pub window: BlockWindow,
    pub masked_count: usize,
    /// `None` for events that involve no threshold (block completion,
    /// vanilla decoding).
    pub tau: Option<f64>,
    pub positions: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl TraceEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace events always serialize")
    }
}
