//! Test-only oracles. Nothing here calls into the decoder, scheduler, cache
//! or re-mask code of the library; only plain data types are shared.

#![allow(dead_code)]

use rdd_core::denoiser::TrapSpec;

/// Outcome of one simulated run of the trap scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRun {
    /// Generated tokens (prompt excluded).
    pub tokens: Vec<u32>,
    pub nfe: u64,
    pub nfe_f: u64,
    pub rollbacks: u64,
    /// Positions re-masked, per rollback.
    pub remasked: Vec<Vec<usize>>,
}

pub struct OracleParams {
    pub block_len: usize,
    pub f: f64,
    pub f_r: f64,
    pub budget: u32,
}

/// Straight-line simulation of block decoding with rollback on the scripted
/// trap model. `remask(rollback_index, position, commit_confidence)` decides
/// each re-mask draw; it is called for committed positions of the revived
/// region in ascending order.
pub fn simulate_trap(
    spec: &TrapSpec,
    params: &OracleParams,
    remask: &mut dyn FnMut(usize, usize, f64) -> bool,
) -> OracleRun {
    let p = spec.prompt.len();
    let n = p + spec.truth.len();
    let l = params.block_len;
    assert_eq!(spec.truth.len() % l, 0, "oracle assumes aligned blocks");

    let mut tok: Vec<Option<u32>> = vec![None; n];
    let mut conf = vec![0.0f64; n];
    for (i, &t) in spec.prompt.iter().enumerate() {
        tok[i] = Some(t);
    }

    let (mut s, mut e) = (p, p + l);
    let mut budget = params.budget;
    let mut recovery = false;
    let mut frontier = p;
    let mut run = OracleRun {
        tokens: vec![],
        nfe: 0,
        nfe_f: 0,
        rollbacks: 0,
        remasked: vec![],
    };

    loop {
        let masked: Vec<usize> = (s..e).filter(|&i| tok[i].is_none()).collect();
        if masked.is_empty() {
            if e > frontier {
                frontier = e;
                budget = params.budget;
                recovery = false;
            }
            if e == n {
                break;
            }
            s = e;
            e = s + l;
            continue;
        }
        run.nfe += 1;
        assert!(run.nfe < 1_000_000, "oracle runaway");

        let poisoned = spec
            .traps
            .iter()
            .any(|t| t.position < e && tok[t.position] == Some(t.decoy));
        let preds: Vec<(usize, u32, f64)> = masked
            .iter()
            .map(|&i| {
                let truth = spec.truth[i - p];
                if poisoned {
                    return (i, truth, spec.c_low);
                }
                match spec
                    .traps
                    .iter()
                    .find(|t| t.position == i && e <= t.reveal_at)
                {
                    Some(t) => (i, t.decoy, t.decoy_confidence),
                    None => (i, truth, spec.c_high),
                }
            })
            .collect();

        let factor = if recovery { params.f_r } else { params.f };
        let tau = 1.0 - factor / (masked.len() as f64 + 1.0);
        let ok: Vec<&(usize, u32, f64)> = preds.iter().filter(|x| x.2 >= tau).collect();
        if !ok.is_empty() {
            for &&(i, t, c) in &ok {
                tok[i] = Some(t);
                conf[i] = c;
            }
        } else if budget > 0 && s > p {
            budget -= 1;
            s -= l;
            recovery = true;
            let idx = run.rollbacks as usize;
            run.rollbacks += 1;
            let mut hit = vec![];
            for i in s..e - l {
                if tok[i].is_some() && remask(idx, i, conf[i]) {
                    tok[i] = None;
                    hit.push(i);
                }
            }
            run.remasked.push(hit);
        } else {
            run.nfe_f += 1;
            let mut best = preds[0];
            for &x in &preds[1..] {
                if x.2 > best.2 {
                    best = x;
                }
            }
            tok[best.0] = Some(best.1);
            conf[best.0] = best.2;
        }
    }
    run.tokens = tok[p..].iter().map(|t| t.unwrap()).collect();
    run
}

/// One branch of the exhaustive enumeration over trap-position re-mask
/// decisions (all other positions are kept).
#[derive(Clone, Debug)]
pub struct Branch {
    pub decisions: Vec<bool>,
    pub probability: f64,
    pub run: OracleRun,
}

pub fn enumerate_trap_branches(spec: &TrapSpec, params: &OracleParams, lambda: f64) -> Vec<Branch> {
    let trap_positions: Vec<usize> = spec.traps.iter().map(|t| t.position).collect();
    let mut out = vec![];
    let mut stack: Vec<Vec<bool>> = vec![vec![]];
    while let Some(script) = stack.pop() {
        let mut used = 0usize;
        let mut prob = 1.0;
        let mut overflow = false;
        let run = simulate_trap(spec, params, &mut |_, pos, c| {
            if !trap_positions.contains(&pos) {
                return false;
            }
            let p_remask = 1.0 - c.powf(lambda);
            let choice = match script.get(used) {
                Some(&d) => d,
                None => {
                    overflow = true;
                    false
                }
            };
            used += 1;
            prob *= if choice { p_remask } else { 1.0 - p_remask };
            choice
        });
        if overflow {
            let mut a = script.clone();
            a.push(false);
            let mut b = script;
            b.push(true);
            stack.push(a);
            stack.push(b);
        } else {
            out.push(Branch {
                decisions: script,
                probability: prob,
                run,
            });
        }
    }
    out
}

/// Random bigram model and prompt for `seed`: a sparse random Markov chain
/// over `vocab` symbols, sampled into a training corpus and refitted, so
/// some rows are confident and others ambiguous.
pub fn random_bigram(seed: u64, vocab: u32, prompt_len: usize) -> (rdd_core::denoiser::BigramDenoiser, Vec<rdd_core::TokenId>) {
    use rand::{Rng, SeedableRng};
    use rdd_core::TokenId;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b16a);
    let v = vocab as usize;
    let rows: Vec<Vec<f64>> = (0..v)
        .map(|_| {
            let peak = rng.gen_range(0..v);
            let sharp: f64 = rng.gen_range(0.3..0.99);
            (0..v)
                .map(|b| if b == peak { sharp } else { (1.0 - sharp) / (v - 1) as f64 })
                .collect()
        })
        .collect();
    let next = |rng: &mut rand_chacha::ChaCha8Rng, a: usize| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (b, p) in rows[a].iter().enumerate() {
            acc += p;
            if u < acc {
                return b;
            }
        }
        v - 1
    };
    let mut seq = vec![rng.gen_range(0..v)];
    for _ in 0..3000 {
        let a = *seq.last().unwrap();
        seq.push(next(&mut rng, a));
    }
    let corpus = vec![seq.iter().map(|&t| TokenId(t as u32)).collect()];
    let model = rdd_core::denoiser::BigramDenoiser::fit_with_vocab(&corpus, 0.1, vocab).unwrap();
    let prompt = (0..prompt_len).map(|_| TokenId(rng.gen_range(0..vocab))).collect();
    (model, prompt)
}
