//! Additive-smoothed bigram reference model.
//!
//! A masked position at distance `d` from its nearest committed left
//! neighbour `t` is predicted from row `t` of `T^d`, where `T` is the smoothed
//! transition matrix. For `d = 1` that is exactly the bigram distribution;
//! larger gaps use the Markov marginal so that parallel predictions across a
//! window stay consistent with the corpus. With no committed token to the
//! left at all, the unigram distribution takes the place of the one-hot start.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::Deserialize;

use super::{ContextView, Denoiser, Prediction};
use crate::error::{Error, Result};
use crate::types::{BlockWindow, TokenBuffer, TokenId};

pub const DEFAULT_SMOOTHING: f64 = 0.1;
const TOP_K: usize = 4;

#[derive(Clone, Debug)]
pub struct BigramDenoiser {
    vocab: usize,
    smoothing: f64,
    /// Row-major `vocab x vocab`, each row sums to 1.
    transition: Vec<f64>,
    unigram: Vec<f64>,
}

impl BigramDenoiser {
    /// Fit on `corpus`; the vocabulary is `max token + 1`.
    pub fn fit(corpus: &[Vec<TokenId>], smoothing: f64) -> Result<Self> {
        let vocab = corpus
            .iter()
            .flatten()
            .map(|t| t.0)
            .filter(|&t| t != TokenId::MASK.0)
            .max()
            .map(|m| m + 1)
            .unwrap_or(0);
        Self::fit_with_vocab(corpus, smoothing, vocab)
    }

    pub fn fit_with_vocab(corpus: &[Vec<TokenId>], smoothing: f64, vocab: u32) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::usage("bigram corpus is empty"));
        }
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::usage(format!(
                "smoothing must be positive, got {smoothing}"
            )));
        }
        let v = vocab as usize;
        if let Some(bad) = corpus.iter().flatten().find(|t| t.index() >= v) {
            return Err(Error::usage(format!(
                "corpus token {bad:?} outside vocabulary of {vocab}"
            )));
        }

        let mut pair = vec![0u64; v * v];
        let mut uni = vec![0u64; v];
        for seq in corpus {
            for t in seq {
                uni[t.index()] += 1;
            }
            for w in seq.windows(2) {
                pair[w[0].index() * v + w[1].index()] += 1;
            }
        }

        let mut transition = vec![0.0; v * v];
        for a in 0..v {
            let row = &pair[a * v..(a + 1) * v];
            let total: u64 = row.iter().sum();
            let denom = total as f64 + smoothing * v as f64;
            for b in 0..v {
                transition[a * v + b] = (row[b] as f64 + smoothing) / denom;
            }
        }
        let n: u64 = uni.iter().sum();
        let denom = n as f64 + smoothing * v as f64;
        let unigram = uni.iter().map(|&c| (c as f64 + smoothing) / denom).collect();

        Ok(Self {
            vocab: v,
            smoothing,
            transition,
            unigram,
        })
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn transition_row(&self, from: TokenId) -> &[f64] {
        let a = from.index();
        &self.transition[a * self.vocab..(a + 1) * self.vocab]
    }

    pub fn unigram(&self) -> &[f64] {
        &self.unigram
    }

    fn step(&self, dist: &[f64]) -> Vec<f64> {
        let v = self.vocab;
        let mut next = vec![0.0; v];
        for (a, &pa) in dist.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let row = &self.transition[a * v..(a + 1) * v];
            for (n, &t) in next.iter_mut().zip(row) {
                *n += pa * t;
            }
        }
        next
    }

    fn predict_from(&self, position: usize, dist: &[f64]) -> Prediction {
        let mut order: Vec<usize> = (0..self.vocab).collect();
        // Stable sort keeps the lowest token first among equal probabilities.
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
        let top: Vec<(TokenId, f64)> = order
            .iter()
            .take(TOP_K.min(self.vocab))
            .map(|&t| (TokenId(t as u32), dist[t].min(1.0)))
            .collect();
        Prediction {
            position,
            token: top[0].0,
            confidence: top[0].1,
            top_k: Some(top),
        }
    }
}

impl Denoiser for BigramDenoiser {
    /// Last token of the block.
    type BlockState = TokenId;

    fn vocab_size(&self) -> u32 {
        self.vocab as u32
    }

    fn summarize_block(&self, buffer: &TokenBuffer, block: Range<usize>) -> TokenId {
        buffer.token(block.end - 1)
    }

    fn predict(
        &self,
        buffer: &TokenBuffer,
        window: &BlockWindow,
        context: &ContextView<TokenId>,
    ) -> Result<Vec<Prediction>> {
        let left = match context.blocks.last() {
            Some(&t) => Some(t),
            None if window.start == buffer.prompt_len() => buffer.prompt().last().copied(),
            None => {
                return Err(Error::Contract(format!(
                    "no context for window starting at {}",
                    window.start
                )))
            }
        };
        let mut dist: Option<Vec<f64>> = None;
        let mut anchor = left;
        let mut out = Vec::new();
        for pos in window.range() {
            let tok = buffer.token(pos);
            if !tok.is_mask() {
                anchor = Some(tok);
                dist = None;
                continue;
            }
            let next = match (dist.take(), anchor.take()) {
                (Some(d), _) => self.step(&d),
                (None, Some(a)) => self.transition_row(a).to_vec(),
                (None, None) => self.unigram.clone(),
            };
            out.push(self.predict_from(pos, &next));
            dist = Some(next);
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct CorpusFile {
    sequences: Vec<Vec<u32>>,
}

/// Load a corpus: JSON `{"sequences": [[...], ...]}` when the extension is
/// `.json`, otherwise plain text with one whitespace-separated sequence of
/// token ids per line (`#` starts a comment line).
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let seqs: Vec<Vec<u32>> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<CorpusFile>(&text)
            .map_err(|source| Error::Parse {
                path: path.into(),
                source,
            })?
            .sequences
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(n, line)| {
                line.split_whitespace()
                    .map(|w| {
                        w.parse::<u32>().map_err(|_| {
                            Error::usage(format!(
                                "{}: line {}: bad token id {w:?}",
                                path.display(),
                                n + 1
                            ))
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?
    };
    Ok(seqs
        .into_iter()
        .map(|s| s.into_iter().map(TokenId).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[u32]) -> Vec<TokenId> {
        s.iter().map(|&t| TokenId(t)).collect()
    }

    fn window(buffer: &TokenBuffer, len: usize) -> BlockWindow {
        BlockWindow {
            start: buffer.prompt_len(),
            end: buffer.prompt_len() + len,
            block_len: len,
        }
    }

    #[test]
    fn count_oracle_matches_fit() {
        // a=0, b=1, c=2: pairs ab, bc, ca, ab
        let corpus = vec![toks(&[0, 1, 2, 0, 1])];
        let m = BigramDenoiser::fit(&corpus, 0.5).unwrap();
        let row_a = m.transition_row(TokenId(0));
        // count(a,b)=2, count(a,*)=2, V=3: (2+.5)/(2+1.5)
        assert!((row_a[1] - 2.5 / 3.5).abs() < 1e-15);
        assert!((row_a[0] - 0.5 / 3.5).abs() < 1e-15);
        let uni = m.unigram();
        assert!((uni[0] - 2.5 / 6.5).abs() < 1e-15);
    }

    #[test]
    fn alternating_corpus_confidence_to_one() {
        let corpus = vec![toks(&[0, 1].repeat(500))];
        let mut last = 0.0;
        for s in [1.0, 0.1, 0.001] {
            let m = BigramDenoiser::fit(&corpus, s).unwrap();
            let buf = TokenBuffer::with_prompt(&toks(&[1, 0]), 3).unwrap();
            let p = m
                .predict(&buf, &window(&buf, 1), &ContextView { blocks: vec![] })
                .unwrap();
            assert_eq!(p[0].token, TokenId(1));
            assert!(p[0].confidence > last);
            last = p[0].confidence;
        }
        assert!(last > 0.999);
    }

    #[test]
    fn alternating_corpus_predicts_whole_window() {
        let corpus = vec![toks(&[0, 1].repeat(500))];
        let m = BigramDenoiser::fit(&corpus, 0.1).unwrap();
        let buf = TokenBuffer::with_prompt(&toks(&[0, 1]), 10).unwrap();
        let p = m
            .predict(&buf, &window(&buf, 8), &ContextView { blocks: vec![] })
            .unwrap();
        let got: Vec<u32> = p.iter().map(|p| p.token.0).collect();
        assert_eq!(got, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        // confidence decays with distance from the anchor
        assert!(p.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn uniform_corpus_low_confidence() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let seq: Vec<TokenId> = (0..200_000).map(|_| TokenId(rng.gen_range(0..4))).collect();
        let m = BigramDenoiser::fit(&[seq], DEFAULT_SMOOTHING).unwrap();
        let buf = TokenBuffer::with_prompt(&toks(&[2]), 2).unwrap();
        let p = m
            .predict(&buf, &window(&buf, 1), &ContextView { blocks: vec![] })
            .unwrap();
        assert!((p[0].confidence - 0.25).abs() < 0.01, "{}", p[0].confidence);
        assert!(p[0].confidence < 0.5);
    }

    #[test]
    fn unigram_fallback_without_left_neighbour() {
        let corpus = vec![toks(&[0, 0, 0, 1, 2])];
        let m = BigramDenoiser::fit(&corpus, 0.1).unwrap();
        let buf = TokenBuffer::with_prompt(&[], 4).unwrap();
        let p = m
            .predict(&buf, &window(&buf, 4), &ContextView { blocks: vec![] })
            .unwrap();
        assert_eq!(p[0].token, TokenId(0));
        assert_eq!(p[0].confidence, m.unigram()[0]);
    }

    #[test]
    fn uses_context_not_buffer_for_prefix() {
        let corpus = vec![toks(&[0, 1, 2].repeat(100))];
        let m = BigramDenoiser::fit(&corpus, 0.1).unwrap();
        let mut buf = TokenBuffer::with_prompt(&toks(&[0]), 5).unwrap();
        buf.commit(1, TokenId(1), 0.9).unwrap();
        buf.commit(2, TokenId(2), 0.9).unwrap();
        let w = BlockWindow {
            start: 3,
            end: 5,
            block_len: 2,
        };
        let honest = m.predict(&buf, &w, &ContextView { blocks: vec![TokenId(2)] }).unwrap();
        assert_eq!(honest[0].token, TokenId(0));
        let stale = m.predict(&buf, &w, &ContextView { blocks: vec![TokenId(0)] }).unwrap();
        assert_eq!(stale[0].token, TokenId(1));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(BigramDenoiser::fit(&[], 0.1).is_err());
        assert!(BigramDenoiser::fit(&[vec![]], 0.1).is_err());
        assert!(BigramDenoiser::fit(&[toks(&[1, 2])], 0.0).is_err());
    }

    #[test]
    fn load_plain_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("c.txt");
        fs::write(&txt, "# corpus\n0 1 2\n\n3 4\n").unwrap();
        assert_eq!(load_corpus(&txt).unwrap(), vec![toks(&[0, 1, 2]), toks(&[3, 4])]);
        let js = dir.path().join("c.json");
        fs::write(&js, r#"{"sequences": [[5, 6]]}"#).unwrap();
        assert_eq!(load_corpus(&js).unwrap(), vec![toks(&[5, 6])]);
        assert!(matches!(
            load_corpus(&dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }
}
