//! Trace files and conformance checking.
//!
//! A trace is a JSON-lines file, one [`TraceEvent`] per line. Everything the
//! harness reports except wall time can be recomputed from a trace alone.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::nfe_bound;
use crate::error::{Error, Result};
use crate::types::{BlockGrid, EventKind, TraceEvent};

pub fn to_jsonl(trace: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in trace {
        out.push_str(&ev.to_json_line());
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, trace: &[TraceEvent]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ev in trace {
        writeln!(w, "{}", ev.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TraceEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        out.push(ev);
    }
    Ok(out)
}

/// Count-based metrics recovered from a trace.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCounts {
    pub nfe: u64,
    pub nfe_f: u64,
    pub rollbacks: u64,
    pub remasked: u64,
    pub committed: u64,
}

pub fn counts(trace: &[TraceEvent]) -> TraceCounts {
    let mut c = TraceCounts::default();
    for ev in trace {
        match ev.kind {
            EventKind::Decode => {
                c.nfe += 1;
                c.committed += ev.positions.len() as u64;
            }
            EventKind::Stagnate => c.nfe += 1,
            EventKind::Force => {
                c.nfe_f += 1;
                c.committed += 1;
            }
            EventKind::Rollback => c.rollbacks += 1,
            EventKind::Remask => c.remasked += ev.positions.len() as u64,
            EventKind::BlockDone => {}
        }
    }
    c
}

/// Final commit confidence of every position in `[prompt_len, total_len)`,
/// replayed from commits and re-masks. Fails if any position ends masked.
pub fn final_confidences(trace: &[TraceEvent], prompt_len: usize, total_len: usize) -> Result<Vec<f64>> {
    let mut conf: BTreeMap<usize, f64> = BTreeMap::new();
    for ev in trace {
        match ev.kind {
            EventKind::Decode | EventKind::Force => {
                for (&p, &c) in ev.positions.iter().zip(&ev.confidences) {
                    conf.insert(p, c);
                }
            }
            EventKind::Remask => {
                for p in &ev.positions {
                    conf.remove(p);
                }
            }
            _ => {}
        }
    }
    (prompt_len..total_len)
        .map(|p| {
            conf.get(&p)
                .copied()
                .ok_or_else(|| Error::usage(format!("trace incomplete: position {p} never committed")))
        })
        .collect()
}

/// Parameters needed to replay the control flow of a block-decoding trace.
#[derive(Copy, Clone, Debug)]
pub struct TraceShape {
    pub grid: BlockGrid,
    pub rollback_budget: u32,
}

fn violation(ev: &TraceEvent, msg: impl std::fmt::Display) -> Error {
    Error::Contract(format!("event {} ({:?}): {msg}", ev.step, ev.kind))
}

/// Check the structural invariants of a block-decoding trace (BLOCK, RDD or
/// RDD*). Budget and frontier are replayed independently of the decoder.
pub fn check_trace(trace: &[TraceEvent], shape: &TraceShape) -> Result<TraceCounts> {
    let grid = shape.grid;
    let mut masked: Vec<bool> = vec![true; grid.total_len];
    masked[..grid.prompt_len].fill(false);
    let mut budget = shape.rollback_budget;
    let mut frontier = grid.prompt_len;
    let mut last_start = grid.prompt_len;

    for (i, ev) in trace.iter().enumerate() {
        if ev.step != i as u64 {
            return Err(violation(ev, format!("step should be {i}")));
        }
        let w = ev.window;
        if w.start < grid.prompt_len || w.end > grid.total_len || w.start >= w.end {
            return Err(violation(ev, "window outside generation span"));
        }
        if w.start < last_start && !matches!(ev.kind, EventKind::Remask) {
            return Err(violation(ev, "window start moved back without a rollback"));
        }
        last_start = w.start;
        let in_window = w.range().filter(|&p| masked[p]).count();
        match ev.kind {
            EventKind::Decode => {
                let tau = ev.tau.ok_or_else(|| violation(ev, "missing tau"))?;
                if ev.positions.is_empty() {
                    return Err(violation(ev, "empty decode"));
                }
                if ev.confidences.iter().any(|&c| c < tau) {
                    return Err(violation(ev, "committed below threshold"));
                }
                if ev.masked_count != in_window {
                    return Err(violation(ev, "masked_count mismatch"));
                }
                for &p in &ev.positions {
                    if !w.contains(p) || !masked[p] {
                        return Err(violation(ev, format!("position {p} not a window mask")));
                    }
                    masked[p] = false;
                }
            }
            EventKind::Stagnate => {
                let tau = ev.tau.ok_or_else(|| violation(ev, "missing tau"))?;
                if ev.masked_count != in_window || ev.positions.len() != in_window {
                    return Err(violation(ev, "stagnation must list every window mask"));
                }
                if ev.confidences.iter().any(|&c| c >= tau) {
                    return Err(violation(ev, "decodable position during stagnation"));
                }
                let next = trace.get(i + 1).map(|e| e.kind);
                if !matches!(next, Some(EventKind::Rollback) | Some(EventKind::Force)) {
                    return Err(violation(ev, "stagnation not followed by rollback or force"));
                }
            }
            EventKind::Force => {
                if ev.positions.len() != 1 {
                    return Err(violation(ev, "force must commit exactly one position"));
                }
                if budget > 0 && w.start > grid.prompt_len {
                    return Err(violation(ev, "forced while rollback was available"));
                }
                let prev = &trace[i.saturating_sub(1)];
                let best = prev.confidences.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if prev.kind != EventKind::Stagnate || ev.confidences[0] != best {
                    return Err(violation(ev, "force did not take the stagnation argmax"));
                }
                let p = ev.positions[0];
                if !w.contains(p) || !masked[p] {
                    return Err(violation(ev, format!("position {p} not a window mask")));
                }
                masked[p] = false;
            }
            EventKind::Rollback => {
                if budget == 0 || w.start <= grid.prompt_len {
                    return Err(violation(ev, "rollback without budget or at prompt"));
                }
                budget -= 1;
                let next = trace
                    .get(i + 1)
                    .filter(|e| e.kind == EventKind::Remask)
                    .ok_or_else(|| violation(ev, "rollback not followed by remask"))?;
                let expected = w.start.saturating_sub(w.block_len).max(grid.prompt_len);
                if next.window.start != expected || next.window.end != w.end {
                    return Err(violation(ev, "merged window is not one block back"));
                }
            }
            EventKind::Remask => {
                let revived = w.start..w.end - w.block_len;
                for &p in &ev.positions {
                    if !revived.contains(&p) || masked[p] {
                        return Err(violation(ev, format!("position {p} not revivable")));
                    }
                    masked[p] = true;
                }
                let after = w.range().filter(|&p| masked[p]).count();
                if ev.masked_count != after {
                    return Err(violation(ev, "masked_count mismatch"));
                }
            }
            EventKind::BlockDone => {
                if in_window != 0 {
                    return Err(violation(ev, "block done with masks remaining"));
                }
                if w.end > frontier {
                    frontier = w.end;
                    budget = shape.rollback_budget;
                }
            }
        }
    }

    let c = counts(trace);
    if masked.iter().any(|&m| m) || frontier != grid.total_len {
        return Err(Error::Contract("trace ends with masked positions".into()));
    }
    if c.committed - c.remasked != grid.gen_len() as u64 {
        return Err(Error::Contract(format!(
            "commits {} minus re-masks {} differ from generated length {}",
            c.committed,
            c.remasked,
            grid.gen_len()
        )));
    }
    let bound = nfe_bound(&grid, shape.rollback_budget);
    if c.nfe > bound {
        return Err(Error::Contract(format!("NFE {} exceeds bound {bound}", c.nfe)));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BlockWindow;

    fn ev(step: u64, kind: EventKind, start: usize, end: usize, positions: Vec<usize>, conf: f64) -> TraceEvent {
        let n = positions.len();
        TraceEvent {
            step,
            kind,
            window: BlockWindow {
                start,
                end,
                block_len: 2,
            },
            masked_count: 2,
            tau: Some(0.5),
            positions,
            confidences: vec![conf; n],
        }
    }

    fn shape() -> TraceShape {
        TraceShape {
            grid: BlockGrid::new(2, 4, 2).unwrap(),
            rollback_budget: 1,
        }
    }

    fn good() -> Vec<TraceEvent> {
        let mut done = ev(1, EventKind::BlockDone, 2, 4, vec![], 0.0);
        done.tau = None;
        done.masked_count = 0;
        vec![ev(0, EventKind::Decode, 2, 4, vec![2, 3], 0.9), done]
    }

    #[test]
    fn accepts_minimal_trace() {
        let c = check_trace(&good(), &shape()).unwrap();
        assert_eq!((c.nfe, c.nfe_f, c.committed), (1, 0, 2));
    }

    #[test]
    fn rejects_sub_threshold_decode() {
        let mut t = good();
        t[0].confidences[1] = 0.4;
        assert!(check_trace(&t, &shape()).is_err());
    }

    #[test]
    fn rejects_bad_step_and_incomplete() {
        let mut t = good();
        t[1].step = 5;
        assert!(check_trace(&t, &shape()).is_err());
        assert!(check_trace(&good()[..1], &shape()).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_jsonl(&path, &good()).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), good());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), to_jsonl(&good()));
    }

    #[test]
    fn confidences_replay() {
        assert_eq!(final_confidences(&good(), 2, 4).unwrap(), vec![0.9, 0.9]);
        assert!(matches!(final_confidences(&good(), 2, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn read_missing_file_names_path() {
        let err = read_jsonl(Path::new("/nonexistent/x.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }
}
