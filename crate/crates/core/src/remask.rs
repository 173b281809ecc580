//! Confidence-guided re-masking of a revived region after rollback.
//!
//! Each committed token is independently returned to MASK with probability
//! `1 - p^lambda`, where `p` is the confidence it was committed with. Tokens
//! committed at confidence 1 are never touched.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TokenBuffer;

/// Random stream dedicated to re-mask decisions.
pub type RemaskRng = ChaCha8Rng;

pub fn remask_rng(seed: u64) -> RemaskRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn remask_probability(p_conf: f64, lambda: f64) -> Result<f64> {
    if !(p_conf > 0.0 && p_conf <= 1.0) {
        return Err(Error::usage(format!(
            "commit confidence must lie in (0, 1], got {p_conf}"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::usage(format!("lambda must be positive, got {lambda}")));
    }
    Ok(1.0 - p_conf.powf(lambda))
}

/// How the revived region is re-masked.
///
/// `Random` is the fixed-ratio comparison baseline: it samples
/// `ceil(ratio * block_len)` committed positions uniformly without
/// replacement, ignoring confidence.
#[derive(Copy, Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RemaskPolicy {
    #[default]
    Confidence,
    Random {
        ratio: f64,
    },
}

impl fmt::Display for RemaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RemaskPolicy::Confidence => f.write_str("confidence"),
            RemaskPolicy::Random { ratio } => write!(f, "random:{ratio}"),
        }
    }
}

impl FromStr for RemaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "confidence" {
            return Ok(RemaskPolicy::Confidence);
        }
        if let Some(r) = s.strip_prefix("random:") {
            let ratio: f64 = r
                .parse()
                .map_err(|_| Error::usage(format!("bad random re-mask ratio {r:?}")))?;
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::usage(format!("re-mask ratio {ratio} outside [0, 1]")));
            }
            return Ok(RemaskPolicy::Random { ratio });
        }
        Err(Error::usage(format!(
            "unknown re-mask mode {s:?} (expected `confidence` or `random:<ratio>`)"
        )))
    }
}

fn check_region(buffer: &TokenBuffer, region: &Range<usize>) -> Result<()> {
    if region.start < buffer.prompt_len() {
        return Err(Error::usage(format!(
            "re-mask region [{}, {}) overlaps the prompt",
            region.start, region.end
        )));
    }
    if region.end > buffer.len() || region.start > region.end {
        return Err(Error::usage(format!(
            "re-mask region [{}, {}) outside buffer",
            region.start, region.end
        )));
    }
    Ok(())
}

/// Re-mask committed positions of `region` with probability `1 - p^lambda`.
///
/// Positions already masked are skipped and consume no random draw. Returns
/// the re-masked positions with the confidence they had been committed at.
pub fn apply_remask<R: Rng>(
    buffer: &mut TokenBuffer,
    region: Range<usize>,
    lambda: f64,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    check_region(buffer, &region)?;
    let mut remasked = Vec::new();
    for pos in region {
        let Some(conf) = buffer.commit_confidence(pos) else {
            continue;
        };
        let p = remask_probability(conf, lambda)?;
        if rng.gen::<f64>() < p {
            buffer.mask(pos)?;
            remasked.push((pos, conf));
        }
    }
    Ok(remasked)
}

/// Fixed-ratio baseline: re-mask `ceil(ratio * block_len)` committed positions
/// of `region` chosen uniformly without replacement.
pub fn apply_random_remask<R: Rng>(
    buffer: &mut TokenBuffer,
    region: Range<usize>,
    ratio: f64,
    block_len: usize,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    check_region(buffer, &region)?;
    let committed: Vec<usize> = region.filter(|&p| !buffer.is_masked(p)).collect();
    let want = ((ratio * block_len as f64).ceil() as usize).min(committed.len());
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, committed.len(), want)
        .into_iter()
        .map(|i| committed[i])
        .collect();
    picks.sort_unstable();
    let mut remasked = Vec::with_capacity(picks.len());
    for pos in picks {
        let conf = buffer
            .commit_confidence(pos)
            .expect("committed position has a confidence");
        buffer.mask(pos)?;
        remasked.push((pos, conf));
    }
    Ok(remasked)
}
