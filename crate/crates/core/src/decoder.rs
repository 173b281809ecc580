//! Reversible block diffusion decoding.
//!
//! Blocks are decoded left to right. Each evaluation of the current window
//! leads to exactly one transition:
//!
//! * **decode**: every masked position whose confidence clears the dynamic
//!   threshold is committed;
//! * **rollback**: nothing clears the threshold, budget remains and the window
//!   does not start at the prompt. The preceding block is merged into the
//!   window, its committed tokens are re-masked by confidence, the cache is
//!   invalidated over the merged range and the schedule enters recovery mode;
//! * **force**: nothing clears the threshold and rollback is unavailable. The
//!   single most confident masked position is committed.
//!
//! The rollback budget and recovery mode are reset only when a window
//! completes beyond the furthest block end ever completed (the frontier), so
//! the budget caps rollbacks per chain of merged blocks rather than per
//! window entry.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::Evaluator;
use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::remask::{apply_random_remask, apply_remask, remask_rng, RemaskPolicy, RemaskRng};
use crate::scheduler::{current_factor, select_decodable, threshold, ScheduleConfig};
use crate::types::{count_masks, BlockGrid, BlockWindow, EventKind, Mode, TokenBuffer, TokenId, TraceEvent};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// One token per evaluation over the whole remaining sequence.
    Vanilla,
    /// Monotonic block decoding with forced fallback.
    Block,
    Rdd,
    /// RDD with dual-scale scheduling (`f_r < f` allowed).
    RddStar,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Block, Method::Rdd, Method::RddStar];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Block => "block",
            Method::Rdd => "rdd",
            Method::RddStar => "rdd-star",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub schedule: ScheduleConfig,
    pub block_len: usize,
    /// Total sequence length, prompt included.
    pub total_len: usize,
    pub method: Method,
    pub seed: u64,
    /// Evaluation cap; `None` derives one from the termination bound.
    pub step_cap: Option<u64>,
    #[serde(default)]
    pub remask: RemaskPolicy,
    /// `false` recomputes every block summary on every evaluation.
    pub use_cache: bool,
}

impl DecodeConfig {
    pub fn new(method: Method, block_len: usize, total_len: usize, schedule: ScheduleConfig) -> Self {
        Self {
            schedule,
            block_len,
            total_len,
            method,
            seed: 0,
            step_cap: None,
            remask: RemaskPolicy::Confidence,
            use_cache: true,
        }
    }

    pub fn validate(&self, prompt_len: usize) -> Result<()> {
        BlockGrid::new(prompt_len, self.total_len, self.block_len)?;
        self.schedule.validate()?;
        match self.method {
            Method::Block if self.schedule.rollback_budget != 0 => Err(Error::usage(
                "method block requires a rollback budget of 0",
            )),
            Method::Block | Method::Rdd if self.schedule.f_r != self.schedule.f => Err(
                Error::usage(format!("method {} requires f_r = f", self.method)),
            ),
            _ => Ok(()),
        }
    }
}

/// Worst-case evaluation count: `(R + 1) * G + K * (R + 1)` for `G`
/// generated positions in `K` blocks.
pub fn nfe_bound(grid: &BlockGrid, rollback_budget: u32) -> u64 {
    let r1 = rollback_budget as u64 + 1;
    r1 * grid.gen_len() as u64 + grid.num_blocks() as u64 * r1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nfe: u64,
    /// Evaluations that ended in forced decoding.
    pub nfe_f: u64,
    pub rollback_count: u64,
    pub remasked_token_count: u64,
    /// Seconds; excluded from determinism checks.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub buffer: TokenBuffer,
    pub trace: Vec<TraceEvent>,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodingState {
    pub buffer: TokenBuffer,
    pub window: BlockWindow,
    pub budget: u32,
    pub mode: Mode,
    /// End of the furthest window ever completed.
    pub frontier: usize,
}

impl DecodingState {
    pub fn new(buffer: TokenBuffer, window: BlockWindow, budget: u32) -> Self {
        let frontier = buffer.prompt_len();
        Self {
            buffer,
            window,
            budget,
            mode: Mode::Normal,
            frontier,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Transition {
    Decode,
    Rollback,
    Force,
}

/// What one step did. Event `step` fields are left at 0; the session
/// numbers them when appending to the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub transition: Transition,
    pub events: Vec<TraceEvent>,
    /// Cache range to invalidate after a rollback.
    pub invalidate: Option<Range<usize>>,
    pub remasked: usize,
}

fn event(
    kind: EventKind,
    window: BlockWindow,
    masked_count: usize,
    tau: Option<f64>,
    hits: Vec<(usize, f64)>,
) -> TraceEvent {
    let (positions, confidences) = hits.into_iter().unzip();
    TraceEvent {
        step: 0,
        kind,
        window,
        masked_count,
        tau,
        positions,
        confidences,
    }
}

fn commit_all(buffer: &mut TokenBuffer, output: &DenoiserOutput, positions: &[usize]) -> Result<Vec<(usize, f64)>> {
    positions
        .iter()
        .map(|&pos| {
            let p = output
                .get(pos)
                .ok_or_else(|| Error::Contract(format!("no prediction for position {pos}")))?;
            buffer.commit(pos, p.token, p.confidence)?;
            Ok((pos, p.confidence))
        })
        .collect()
}

fn force_one(buffer: &mut TokenBuffer, output: &DenoiserOutput) -> Result<(usize, f64)> {
    let p = output
        .argmax()
        .ok_or_else(|| Error::Contract("empty prediction set".into()))?;
    buffer.commit(p.position, p.token, p.confidence)?;
    Ok((p.position, p.confidence))
}

fn check_output(state: &DecodingState, output: &DenoiserOutput) -> Result<usize> {
    let m = count_masks(&state.buffer, &state.window)?;
    if m == 0 {
        return Err(Error::usage(
            "window has no masked positions; it is complete and must not be stepped",
        ));
    }
    let covers = output.predictions.len() == m
        && output
            .predictions
            .iter()
            .all(|p| state.window.contains(p.position) && state.buffer.is_masked(p.position));
    if !covers {
        return Err(Error::usage("denoiser output does not match the window's masked set"));
    }
    Ok(m)
}

/// Apply one transition to `state` given the evaluation of its window.
pub fn step(
    state: &mut DecodingState,
    output: &DenoiserOutput,
    cfg: &DecodeConfig,
    rng: &mut RemaskRng,
) -> Result<StepOutcome> {
    let m = check_output(state, output)?;
    let tau = threshold(current_factor(state.mode, &cfg.schedule), m);
    let window = state.window;

    let decodable = select_decodable(output, tau);
    if !decodable.is_empty() {
        let hits = commit_all(&mut state.buffer, output, &decodable)?;
        return Ok(StepOutcome {
            transition: Transition::Decode,
            events: vec![event(EventKind::Decode, window, m, Some(tau), hits)],
            invalidate: None,
            remasked: 0,
        });
    }

    let all = output
        .predictions
        .iter()
        .map(|p| (p.position, p.confidence))
        .collect();
    let stagnate = event(EventKind::Stagnate, window, m, Some(tau), all);
    let prompt_len = state.buffer.prompt_len();

    if state.budget > 0 && window.start > prompt_len {
        let merged = window.merge_back(prompt_len)?;
        let region = merged.start..window.end - window.block_len;
        let hits = match cfg.remask {
            RemaskPolicy::Confidence => {
                apply_remask(&mut state.buffer, region, cfg.schedule.lambda, rng)?
            }
            RemaskPolicy::Random { ratio } => {
                apply_random_remask(&mut state.buffer, region, ratio, window.block_len, rng)?
            }
        };
        state.window = merged;
        state.budget -= 1;
        state.mode = Mode::Recovery;
        let remasked = hits.len();
        let merged_masks = count_masks(&state.buffer, &merged)?;
        return Ok(StepOutcome {
            transition: Transition::Rollback,
            events: vec![
                stagnate,
                event(EventKind::Rollback, window, m, Some(tau), vec![]),
                event(EventKind::Remask, merged, merged_masks, None, hits),
            ],
            invalidate: Some(merged.range()),
            remasked,
        });
    }

    let hit = force_one(&mut state.buffer, output)?;
    Ok(StepOutcome {
        transition: Transition::Force,
        events: vec![stagnate, event(EventKind::Force, window, m, Some(tau), vec![hit])],
        invalidate: None,
        remasked: 0,
    })
}

/// Reset budget and mode once a window completes past the frontier.
pub fn budget_policy(state: &mut DecodingState, cfg: &DecodeConfig) {
    if state.window.end > state.frontier {
        state.frontier = state.window.end;
        state.budget = cfg.schedule.rollback_budget;
        state.mode = Mode::Normal;
    }
}

struct Recorder {
    trace: Vec<TraceEvent>,
    metrics: Metrics,
}

impl Recorder {
    fn new() -> Self {
        Self {
            trace: Vec::new(),
            metrics: Metrics::default(),
        }
    }

    fn push(&mut self, mut ev: TraceEvent) {
        ev.step = self.trace.len() as u64;
        match ev.kind {
            EventKind::Force => self.metrics.nfe_f += 1,
            EventKind::Rollback => self.metrics.rollback_count += 1,
            EventKind::Remask => self.metrics.remasked_token_count += ev.positions.len() as u64,
            _ => {}
        }
        self.trace.push(ev);
    }

    fn block_done(&mut self, window: BlockWindow) {
        self.push(event(EventKind::BlockDone, window, 0, None, vec![]));
    }
}

/// Run a full decode of `prompt` up to `cfg.total_len` tokens.
pub fn decode<D: Denoiser>(denoiser: &D, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<DecodeResult> {
    cfg.validate(prompt.len())?;
    let started = Instant::now();
    let grid = BlockGrid::new(prompt.len(), cfg.total_len, cfg.block_len)?;
    let buffer = TokenBuffer::with_prompt(prompt, cfg.total_len)?;
    let cap = cfg
        .step_cap
        .unwrap_or_else(|| 2 * nfe_bound(&grid, cfg.schedule.rollback_budget) + 16);
    let mut evaluator = Evaluator::new(denoiser, grid, cfg.use_cache);
    let mut rec = Recorder::new();

    let buffer = match cfg.method {
        Method::Vanilla => decode_vanilla(&mut evaluator, &grid, buffer, cap, &mut rec)?,
        Method::Block => decode_monotonic(&mut evaluator, &grid, buffer, cfg, cap, &mut rec)?,
        Method::Rdd | Method::RddStar => {
            decode_reversible(&mut evaluator, &grid, buffer, cfg, cap, &mut rec)?
        }
    };

    debug_assert!(buffer.is_complete());
    rec.metrics.nfe = evaluator.evals();
    rec.metrics.wall_time = started.elapsed().as_secs_f64();
    Ok(DecodeResult {
        buffer,
        trace: rec.trace,
        metrics: rec.metrics,
    })
}

fn check_cap<D: Denoiser>(evaluator: &Evaluator<'_, D>, cap: u64) -> Result<()> {
    if evaluator.evals() >= cap {
        Err(Error::Runaway { cap })
    } else {
        Ok(())
    }
}

fn decode_reversible<D: Denoiser>(
    evaluator: &mut Evaluator<'_, D>,
    grid: &BlockGrid,
    buffer: TokenBuffer,
    cfg: &DecodeConfig,
    cap: u64,
    rec: &mut Recorder,
) -> Result<TokenBuffer> {
    let mut rng = remask_rng(cfg.seed);
    let mut state = DecodingState::new(buffer, grid.window(0), cfg.schedule.rollback_budget);
    loop {
        if count_masks(&state.buffer, &state.window)? == 0 {
            rec.block_done(state.window);
            budget_policy(&mut state, cfg);
            if state.window.end == grid.total_len {
                return Ok(state.buffer);
            }
            state.window = grid.window(grid.block_of(state.window.end));
            continue;
        }
        check_cap(evaluator, cap)?;
        let output = evaluator.evaluate(&state.buffer, &state.window)?;
        let outcome = step(&mut state, &output, cfg, &mut rng)?;
        if let Some(range) = outcome.invalidate {
            evaluator.invalidate(range)?;
        }
        for ev in outcome.events {
            rec.push(ev);
        }
    }
}

/// Monotonic block baseline: no rollback machinery at all, committed blocks
/// are final. Kept as its own loop so the reduction RDD(R=0) == BLOCK is a
/// real comparison.
fn decode_monotonic<D: Denoiser>(
    evaluator: &mut Evaluator<'_, D>,
    grid: &BlockGrid,
    mut buffer: TokenBuffer,
    cfg: &DecodeConfig,
    cap: u64,
    rec: &mut Recorder,
) -> Result<TokenBuffer> {
    for block in 0..grid.num_blocks() {
        let window = grid.window(block);
        loop {
            let masked: Vec<usize> = buffer.masked_positions(window.range()).collect();
            if masked.is_empty() {
                break;
            }
            check_cap(evaluator, cap)?;
            let output = evaluator.evaluate(&buffer, &window)?;
            let m = masked.len();
            let tau = threshold(cfg.schedule.f, m);
            let decodable = select_decodable(&output, tau);
            if decodable.is_empty() {
                let all = output
                    .predictions
                    .iter()
                    .map(|p| (p.position, p.confidence))
                    .collect();
                rec.push(event(EventKind::Stagnate, window, m, Some(tau), all));
                let hit = force_one(&mut buffer, &output)?;
                rec.push(event(EventKind::Force, window, m, Some(tau), vec![hit]));
            } else {
                let hits = commit_all(&mut buffer, &output, &decodable)?;
                rec.push(event(EventKind::Decode, window, m, Some(tau), hits));
            }
        }
        rec.block_done(window);
    }
    Ok(buffer)
}

/// One token per evaluation, highest confidence first, across the whole
/// remaining sequence.
fn decode_vanilla<D: Denoiser>(
    evaluator: &mut Evaluator<'_, D>,
    grid: &BlockGrid,
    mut buffer: TokenBuffer,
    cap: u64,
    rec: &mut Recorder,
) -> Result<TokenBuffer> {
    let window = BlockWindow {
        start: grid.prompt_len,
        end: grid.total_len,
        block_len: grid.gen_len(),
    };
    loop {
        let m = count_masks(&buffer, &window)?;
        if m == 0 {
            break;
        }
        check_cap(evaluator, cap)?;
        let output = evaluator.evaluate(&buffer, &window)?;
        let hit = force_one(&mut buffer, &output)?;
        rec.push(event(EventKind::Decode, window, m, None, vec![hit]));
    }
    rec.block_done(window);
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Prediction;

    fn cfg(budget: u32) -> DecodeConfig {
        DecodeConfig::new(
            Method::Rdd,
            32,
            288,
            ScheduleConfig {
                f: 0.9,
                f_r: 0.9,
                lambda: 1.0,
                rollback_budget: budget,
            },
        )
    }

    /// Prompt 32, blocks [32,64) and [64,96) committed at `conf`, window
    /// [96,128) with position 96 committed and 31 masks.
    fn trap_state(budget: u32, conf: f64) -> DecodingState {
        let prompt = vec![TokenId(1); 32];
        let mut b = TokenBuffer::with_prompt(&prompt, 288).unwrap();
        for pos in 32..97 {
            b.commit(pos, TokenId(2), conf).unwrap();
        }
        let window = BlockWindow {
            start: 96,
            end: 128,
            block_len: 32,
        };
        DecodingState::new(b, window, budget)
    }

    fn flat_output(state: &DecodingState, conf: f64) -> DenoiserOutput {
        DenoiserOutput {
            eval_id: 1,
            predictions: state
                .buffer
                .masked_positions(state.window.range())
                .map(|position| Prediction {
                    position,
                    token: TokenId(3),
                    confidence: conf,
                    top_k: None,
                })
                .collect(),
        }
    }

    #[test]
    fn stagnant_window_rolls_back() {
        let mut st = trap_state(1, 1.0);
        let out = flat_output(&st, 0.6);
        let mut rng = remask_rng(0);
        let o = step(&mut st, &out, &cfg(1), &mut rng).unwrap();
        assert_eq!(o.transition, Transition::Rollback);
        let kinds: Vec<EventKind> = o.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [EventKind::Stagnate, EventKind::Rollback, EventKind::Remask]);
        assert!((o.events[1].tau.unwrap() - 0.971_875).abs() < 1e-12);
        assert_eq!(st.window.start, 64);
        assert_eq!(st.window.end, 128);
        assert_eq!(o.events[2].window.start, o.events[1].window.start - 32);
        assert_eq!(st.budget, 0);
        assert_eq!(st.mode, Mode::Recovery);
        assert_eq!(o.invalidate, Some(64..128));
        // commit confidence 1 never re-masks
        assert_eq!(o.remasked, 0);
    }

    #[test]
    fn exhausted_budget_forces_argmax() {
        let mut st = trap_state(0, 1.0);
        let mut out = flat_output(&st, 0.6);
        out.predictions[5].confidence = 0.61;
        let mut rng = remask_rng(0);
        let o = step(&mut st, &out, &cfg(0), &mut rng).unwrap();
        assert_eq!(o.transition, Transition::Force);
        let force = &o.events[1];
        assert_eq!(force.kind, EventKind::Force);
        assert_eq!(force.positions, vec![102]);
        assert_eq!(force.confidences, vec![0.61]);
        assert_eq!(st.buffer.commit_confidence(102), Some(0.61));
        assert_eq!(count_masks(&st.buffer, &st.window).unwrap(), 30);
    }

    #[test]
    fn force_at_prompt_boundary_even_with_budget() {
        let prompt = vec![TokenId(1); 32];
        let b = TokenBuffer::with_prompt(&prompt, 288).unwrap();
        let w = BlockWindow {
            start: 32,
            end: 64,
            block_len: 32,
        };
        let mut st = DecodingState::new(b, w, 3);
        let out = flat_output(&st, 0.2);
        let o = step(&mut st, &out, &cfg(3), &mut remask_rng(0)).unwrap();
        assert_eq!(o.transition, Transition::Force);
        assert_eq!(o.events[1].positions, vec![32]);
        assert_eq!(st.budget, 3);
    }

    #[test]
    fn decode_commits_confident_subset() {
        let mut st = trap_state(1, 1.0);
        st.window = BlockWindow {
            start: 128,
            end: 131,
            block_len: 32,
        };
        let out = DenoiserOutput {
            eval_id: 1,
            predictions: [(128, 0.99), (129, 0.98), (130, 0.30)]
                .iter()
                .map(|&(position, confidence)| Prediction {
                    position,
                    token: TokenId(4),
                    confidence,
                    top_k: None,
                })
                .collect(),
        };
        // tau = 1 - f/(3+1) = 0.9 with f = 0.4
        let mut c = cfg(1);
        c.schedule.f = 0.4;
        c.schedule.f_r = 0.4;
        let o = step(&mut st, &out, &c, &mut remask_rng(0)).unwrap();
        assert_eq!(o.transition, Transition::Decode);
        assert_eq!(o.events[0].positions, vec![128, 129]);
        assert_eq!(o.events[0].tau, Some(0.9));
    }

    #[test]
    fn complete_window_is_usage_error() {
        let mut st = trap_state(1, 1.0);
        st.window = BlockWindow {
            start: 32,
            end: 64,
            block_len: 32,
        };
        let out = DenoiserOutput {
            eval_id: 1,
            predictions: vec![],
        };
        assert!(matches!(
            step(&mut st, &out, &cfg(1), &mut remask_rng(0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn budget_policy_resets_only_past_frontier() {
        let c = cfg(2);
        let mut st = trap_state(0, 1.0);
        st.mode = Mode::Recovery;
        st.frontier = 96;
        st.window = BlockWindow {
            start: 64,
            end: 96,
            block_len: 32,
        };
        budget_policy(&mut st, &c);
        assert_eq!((st.budget, st.mode), (0, Mode::Recovery));
        st.window.end = 128;
        budget_policy(&mut st, &c);
        assert_eq!((st.budget, st.mode, st.frontier), (2, Mode::Normal, 128));

        let zero = cfg(0);
        let mut st = trap_state(0, 1.0);
        st.window.end = 128;
        budget_policy(&mut st, &zero);
        assert_eq!(st.budget, 0);
    }

    #[test]
    fn config_method_constraints() {
        let mut c = cfg(1);
        c.method = Method::Block;
        assert!(c.validate(32).is_err());
        c.schedule.rollback_budget = 0;
        c.validate(32).unwrap();
        c.method = Method::Rdd;
        c.schedule.f = 2.25;
        assert!(c.validate(32).is_err());
        c.method = Method::RddStar;
        c.validate(32).unwrap();
        assert!(c.validate(288).is_err());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fast".parse::<Method>().is_err());
    }

    #[test]
    fn bound_arithmetic() {
        let g = BlockGrid::new(32, 288, 32).unwrap();
        assert_eq!(nfe_bound(&g, 1), 2 * 256 + 8 * 2);
        assert_eq!(nfe_bound(&g, 0), 256 + 8);
    }
}
