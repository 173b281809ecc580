//! Block-granular memo of denoiser context state.
//!
//! Entries are keyed by block index, not token content. Rolling back
//! invalidates by position range, which keeps invalidation O(blocks) and
//! gives an exact oracle: decoding with the cache must match decoding that
//! recomputes every block summary from scratch.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Serialize;

use crate::denoiser::{check_predictions, ContextView, Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::types::{BlockGrid, BlockWindow, TokenBuffer};

#[derive(Clone, Debug, PartialEq)]
pub struct CacheStore<S> {
    grid: BlockGrid,
    entries: BTreeMap<usize, S>,
    generation: u64,
}

/// Store metadata for debug dumps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CacheMeta {
    pub blocks: Vec<usize>,
    pub generation: u64,
}

impl<S: Clone> CacheStore<S> {
    pub fn new(grid: BlockGrid) -> Self {
        Self {
            grid,
            entries: BTreeMap::new(),
            generation: 0,
        }
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn contains(&self, block: usize) -> bool {
        self.entries.contains_key(&block)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn metadata(&self) -> CacheMeta {
        CacheMeta {
            blocks: self.blocks(),
            generation: self.generation,
        }
    }

    /// Insert the state of `block`; every earlier block must already be cached.
    pub fn insert(&mut self, block: usize, state: S) -> Result<()> {
        if block >= self.grid.num_blocks() {
            return Err(Error::usage(format!("block {block} outside grid")));
        }
        if block > 0 && !self.contains(block - 1) {
            return Err(Error::usage(format!(
                "cannot cache block {block} before block {}",
                block - 1
            )));
        }
        self.entries.insert(block, state);
        self.generation += 1;
        Ok(())
    }

    /// Composed context for `window`: the state of every block left of it.
    pub fn get_context(&self, window: &BlockWindow) -> Result<ContextView<S>> {
        let first = self.grid.block_of(window.start);
        let blocks = (0..first)
            .map(|b| {
                self.entries
                    .get(&b)
                    .cloned()
                    .ok_or(Error::CacheMiss { block: b })
            })
            .collect::<Result<_>>()?;
        Ok(ContextView { blocks })
    }

    /// Remove every entry whose block intersects `[start, end)`. Both bounds
    /// must sit on block boundaries. Always bumps the generation.
    pub fn delete_range(&mut self, start: usize, end: usize) -> Result<()> {
        if start > end || !self.grid.is_boundary(start) || !self.grid.is_boundary(end) {
            return Err(Error::usage(format!(
                "delete range [{start}, {end}) is not block aligned"
            )));
        }
        let grid = self.grid;
        self.entries.retain(|&b, _| {
            let r = grid.block_range(b);
            r.end <= start || r.start >= end
        });
        self.generation += 1;
        Ok(())
    }
}

/// Runs denoiser evaluations for one decode session, memoizing committed
/// block summaries and counting forward evaluations.
pub struct Evaluator<'d, D: Denoiser> {
    denoiser: &'d D,
    store: CacheStore<D::BlockState>,
    caching: bool,
    evals: u64,
}

impl<'d, D: Denoiser> Evaluator<'d, D> {
    pub fn new(denoiser: &'d D, grid: BlockGrid, caching: bool) -> Self {
        Self {
            denoiser,
            store: CacheStore::new(grid),
            caching,
            evals: 0,
        }
    }

    pub fn evals(&self) -> u64 {
        self.evals
    }

    pub fn store(&self) -> &CacheStore<D::BlockState> {
        &self.store
    }

    fn summarize(&self, buffer: &TokenBuffer, block: usize) -> Result<D::BlockState> {
        let range = self.store.grid().block_range(block);
        if buffer.masked_positions(range.clone()).next().is_some() {
            return Err(Error::usage(format!(
                "block {block} [{}, {}) left of the window is not fully committed",
                range.start, range.end
            )));
        }
        Ok(self.denoiser.summarize_block(buffer, range))
    }

    /// One forward evaluation over `window`.
    ///
    /// With caching, entering a window first fills in the summary of any
    /// committed block not yet cached (normally just the one before the
    /// window), then predicts from the composed context.
    pub fn evaluate(&mut self, buffer: &TokenBuffer, window: &BlockWindow) -> Result<DenoiserOutput> {
        let first = self.store.grid().block_of(window.start);
        let context = if self.caching {
            for b in 0..first {
                if !self.store.contains(b) {
                    let state = self.summarize(buffer, b)?;
                    self.store.insert(b, state)?;
                }
            }
            self.store.get_context(window)?
        } else {
            ContextView {
                blocks: (0..first)
                    .map(|b| self.summarize(buffer, b))
                    .collect::<Result<_>>()?,
            }
        };
        let predictions = self.denoiser.predict(buffer, window, &context)?;
        check_predictions(buffer, window, self.denoiser.vocab_size(), &predictions)?;
        self.evals += 1;
        Ok(DenoiserOutput {
            eval_id: self.evals,
            predictions,
        })
    }

    pub fn invalidate(&mut self, range: Range<usize>) -> Result<()> {
        self.store.delete_range(range.start, range.end)?;
        self.denoiser.invalidate(range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BlockGrid {
        BlockGrid::new(0, 256, 32).unwrap()
    }

    fn store_with(blocks: &[usize]) -> CacheStore<u32> {
        let mut s = CacheStore::new(grid());
        for &b in blocks {
            s.entries.insert(b, b as u32 * 10);
        }
        s
    }

    fn win(start: usize, end: usize) -> BlockWindow {
        BlockWindow {
            start,
            end,
            block_len: 32,
        }
    }

    #[test]
    fn empty_store_prompt_context() {
        let s = CacheStore::<u32>::new(BlockGrid::new(32, 288, 32).unwrap());
        assert_eq!(s.get_context(&win(32, 64)).unwrap().blocks, Vec::<u32>::new());
    }

    #[test]
    fn context_covers_cached_prefix() {
        let s = store_with(&[0, 1]);
        assert_eq!(s.get_context(&win(64, 96)).unwrap().blocks, vec![0, 10]);
    }

    #[test]
    fn hole_is_cache_miss() {
        let s = store_with(&[0, 2]);
        assert!(matches!(
            s.get_context(&win(96, 128)),
            Err(Error::CacheMiss { block: 1 })
        ));
    }

    #[test]
    fn insert_refuses_holes() {
        let mut s = CacheStore::new(grid());
        s.insert(0, 1u32).unwrap();
        assert!(s.insert(2, 3).is_err());
        s.insert(1, 2).unwrap();
        assert_eq!(s.generation(), 2);
    }

    #[test]
    fn delete_range_drops_intersecting_blocks() {
        let mut s = store_with(&[0, 1, 2]);
        s.delete_range(32, 96).unwrap();
        assert_eq!(s.blocks(), vec![0]);
    }

    #[test]
    fn delete_empty_range_keeps_entries() {
        let mut s = store_with(&[0, 1, 2]);
        s.delete_range(64, 64).unwrap();
        assert_eq!(s.blocks(), vec![0, 1, 2]);
    }

    #[test]
    fn delete_beyond_frontier_bumps_generation() {
        let mut s = store_with(&[0, 1]);
        let before = s.generation();
        s.delete_range(128, 192).unwrap();
        assert_eq!(s.blocks(), vec![0, 1]);
        assert_eq!(s.generation(), before + 1);
    }

    #[test]
    fn delete_unaligned_rejected() {
        let mut s = store_with(&[0, 1]);
        assert!(matches!(s.delete_range(33, 64), Err(Error::Usage(_))));
        assert!(matches!(s.delete_range(64, 32), Err(Error::Usage(_))));
    }

    #[test]
    fn short_first_block_alignment() {
        let mut s = CacheStore::<u32>::new(BlockGrid::new(45, 296, 32).unwrap());
        s.insert(0, 7).unwrap();
        s.insert(1, 8).unwrap();
        s.delete_range(45, 104).unwrap();
        assert!(s.is_empty());
        assert!(s.delete_range(64, 104).is_err());
    }
}
