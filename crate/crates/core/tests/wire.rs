mod support;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use rdd_core::denoiser::{BigramDenoiser, ContextView, Denoiser};
use rdd_core::wire::{WireDenoiser, WireError, WireOp, WirePrediction, WireRequest, WireResponse, PROTOCOL_VERSION};
use rdd_core::{decode, BlockWindow, DecodeConfig, Error, Method, ScheduleConfig, TokenBuffer, TokenId};

/// Reference server: the bigram model behind the wire, with a prefix-state
/// cache keyed by span and a counter of prefix recomputations.
struct MockServer {
    model: BigramDenoiser,
    spans: BTreeMap<(usize, usize), TokenId>,
    generation: u64,
    recomputes: Arc<AtomicU64>,
    corrupt_positions: bool,
}

impl MockServer {
    fn handle(&mut self, line: &str) -> WireResponse {
        let req: WireRequest = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return error(None, "bad_request", e.to_string()),
        };
        match req.op {
            WireOp::Info => WireResponse {
                request_id: Some(req.request_id),
                protocol: Some(PROTOCOL_VERSION),
                vocab_size: Some(self.model.vocab_size()),
                ..WireResponse::default()
            },
            WireOp::Evaluate => self.evaluate(req),
        }
    }

    fn evaluate(&mut self, req: WireRequest) -> WireResponse {
        let Some([start, end]) = req.window else {
            return error(Some(req.request_id), "bad_request", "missing window".into());
        };
        if let Some([s, e]) = req.invalidate {
            self.spans.retain(|&(a, b), _| b <= s || a >= e);
        }
        let p = req.prompt_len;
        let prompt: Vec<TokenId> = req.tokens[..p].iter().map(|t| TokenId(t.unwrap())).collect();
        let mut buf = TokenBuffer::with_prompt(&prompt, end).unwrap();
        for (pos, t) in req.tokens.iter().enumerate().skip(p) {
            if let Some(t) = t {
                buf.commit(pos, TokenId(*t), 1.0).unwrap();
            }
        }
        let mut blocks = vec![];
        if start > p {
            let key = (p, start);
            let state = match self.spans.get(&key) {
                Some(s) => *s,
                None => {
                    self.recomputes.fetch_add(1, Ordering::SeqCst);
                    let s = self.model.summarize_block(&buf, p..start);
                    self.spans.insert(key, s);
                    s
                }
            };
            blocks.push(state);
        }
        let window = BlockWindow {
            start,
            end,
            block_len: end - start,
        };
        let preds = self.model.predict(&buf, &window, &ContextView { blocks }).unwrap();
        self.generation += 1;
        let mut predictions: Vec<WirePrediction> = preds
            .into_iter()
            .map(|p| WirePrediction {
                position: p.position,
                token: p.token.0,
                confidence: p.confidence,
                top_k: p.top_k.map(|v| v.into_iter().map(|(t, c)| (t.0, c)).collect()),
            })
            .collect();
        if self.corrupt_positions {
            predictions.pop();
        }
        WireResponse {
            request_id: Some(req.request_id),
            predictions: Some(predictions),
            cache_id: Some(format!("c{}", self.generation)),
            ..WireResponse::default()
        }
    }
}

fn error(id: Option<u64>, code: &str, message: String) -> WireResponse {
    WireResponse {
        request_id: id,
        error: Some(WireError {
            code: code.into(),
            message,
        }),
        ..WireResponse::default()
    }
}

fn serve(mut server: MockServer, stream: UnixStream) {
    let mut writer = stream.try_clone().unwrap();
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        let resp = server.handle(&line);
        let mut out = serde_json::to_string(&resp).unwrap();
        out.push('\n');
        if writer.write_all(out.as_bytes()).is_err() {
            break;
        }
    }
}

fn start(model: BigramDenoiser, corrupt: bool) -> (UnixStream, Arc<AtomicU64>) {
    let (client, server) = UnixStream::pair().unwrap();
    let recomputes = Arc::new(AtomicU64::new(0));
    let mock = MockServer {
        model,
        spans: BTreeMap::new(),
        generation: 0,
        recomputes: recomputes.clone(),
        corrupt_positions: corrupt,
    };
    thread::spawn(move || serve(mock, server));
    (client, recomputes)
}

fn connect(model: BigramDenoiser, corrupt: bool) -> (WireDenoiser<BufReader<UnixStream>, UnixStream>, Arc<AtomicU64>) {
    let (client, counter) = start(model, corrupt);
    let reader = BufReader::new(client.try_clone().unwrap());
    (WireDenoiser::connect(reader, client).unwrap(), counter)
}

#[test]
fn wire_decoding_matches_in_process() {
    for seed in 0..20u64 {
        let (model, prompt) = support::random_bigram(seed, 8, 32);
        let (remote, _) = connect(model.clone(), false);
        assert_eq!(remote.vocab_size(), 8);
        let s = ScheduleConfig {
            f: 2.25,
            f_r: 0.9,
            lambda: 1.0,
            rollback_budget: 2,
        };
        let mut c = DecodeConfig::new(Method::RddStar, 32, 256, s);
        c.seed = seed;
        let local = decode(&model, &prompt, &c).unwrap();
        let wired = decode(&remote, &prompt, &c).unwrap();
        assert_eq!(local.buffer, wired.buffer, "seed {seed}");
        assert_eq!(local.trace, wired.trace, "seed {seed}");
        assert_eq!(local.metrics.nfe + 1, remote.requests());
    }
}

#[test]
fn invalidate_forces_backend_recompute() {
    let (model, prompt) = support::random_bigram(3, 8, 32);
    let (remote, recomputes) = connect(model, false);
    let mut buf = TokenBuffer::with_prompt(&prompt, 128).unwrap();
    for pos in 32..96 {
        buf.commit(pos, TokenId(1), 0.9).unwrap();
    }
    let w = BlockWindow {
        start: 96,
        end: 128,
        block_len: 32,
    };
    let ctx = ContextView {
        blocks: vec![vec![1u32; 32], vec![1u32; 32]],
    };
    remote.predict(&buf, &w, &ctx).unwrap();
    remote.predict(&buf, &w, &ctx).unwrap();
    assert_eq!(recomputes.load(Ordering::SeqCst), 1);
    remote.invalidate(32..96).unwrap();
    remote.predict(&buf, &w, &ctx).unwrap();
    assert_eq!(recomputes.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_line_gets_error_and_server_continues() {
    let (model, _) = support::random_bigram(1, 4, 4);
    let (client, _) = start(model, false);
    let mut reader = BufReader::new(client.try_clone().unwrap());
    let mut writer = client;
    writer.write_all(b"{not json\n").unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let resp: WireResponse = serde_json::from_str(&line).unwrap();
    assert_eq!(resp.error.unwrap().code, "bad_request");
    writer.write_all(b"{\"request_id\":7,\"op\":\"info\"}\n").unwrap();
    line.clear();
    reader.read_line(&mut line).unwrap();
    let resp: WireResponse = serde_json::from_str(&line).unwrap();
    assert_eq!(resp.request_id, Some(7));
    assert_eq!(resp.vocab_size, Some(4));
}

#[test]
fn position_mismatch_is_rejected() {
    let (model, prompt) = support::random_bigram(2, 8, 32);
    let (remote, _) = connect(model, true);
    let c = DecodeConfig::new(Method::Rdd, 32, 256, ScheduleConfig::default());
    let err = decode(&remote, &prompt, &c).unwrap_err();
    assert!(matches!(err, Error::Wire(m) if m.contains("differ")));
}

#[test]
fn spawned_server_handshake() {
    let cmd = r#"printf '{"request_id":1,"protocol":1,"vocab_size":5}\n'; cat > /dev/null"#;
    let remote = WireDenoiser::spawn(cmd).unwrap();
    assert_eq!(remote.vocab_size(), 5);
    assert!(matches!(WireDenoiser::spawn("exit 0"), Err(Error::Wire(_))));
}
