//! Client side of the line-delimited JSON model protocol.
//!
//! An external process serves predictions: one JSON request per line on its
//! stdin, one JSON response per line on its stdout, strictly in order. See
//! `docs/protocol.md` for the schema.

use std::cell::{Cell, RefCell};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::denoiser::{ContextView, Denoiser, Prediction};
use crate::error::{Error, Result};
use crate::types::{BlockWindow, TokenBuffer, TokenId};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireOp {
    Info,
    Evaluate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: u64,
    pub op: WireOp,
    /// Prefix up to the window end; `null` marks a masked position.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<Option<u32>>,
    #[serde(default)]
    pub prompt_len: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mask_positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_id: Option<String>,
    /// Half-open span whose backend state must be dropped before evaluating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalidate: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub position: usize,
    pub token: u32,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<Vec<(u32, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct WireResponse {
    /// Absent only when the request line could not be parsed at all.
    #[serde(default)]
    pub request_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<WirePrediction>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

/// Denoiser backed by a remote model server.
///
/// The per-block cache state is the block's committed token ids, so each
/// request carries exactly the context the engine's cache composes. The
/// server's `cache_id` is echoed back on the next request and rollbacks are
/// forwarded as `invalidate` spans.
pub struct WireDenoiser<R, W> {
    io: RefCell<(R, W)>,
    vocab_size: u32,
    next_id: Cell<u64>,
    cache_id: RefCell<Option<String>>,
    pending_invalidate: RefCell<Option<[usize; 2]>>,
    child: Option<Child>,
}

impl<R: BufRead, W: Write> WireDenoiser<R, W> {
    /// Connect over an existing stream pair and query the vocabulary size.
    pub fn connect(reader: R, writer: W) -> Result<Self> {
        let mut d = Self {
            io: RefCell::new((reader, writer)),
            vocab_size: 0,
            next_id: Cell::new(0),
            cache_id: RefCell::new(None),
            pending_invalidate: RefCell::new(None),
            child: None,
        };
        let info = d.call(WireRequest {
            request_id: 0,
            op: WireOp::Info,
            tokens: vec![],
            prompt_len: 0,
            mask_positions: vec![],
            window: None,
            cache_id: None,
            invalidate: None,
        })?;
        if info.protocol.is_some_and(|p| p != PROTOCOL_VERSION) {
            return Err(Error::Wire(format!(
                "server speaks protocol {:?}, expected {PROTOCOL_VERSION}",
                info.protocol
            )));
        }
        d.vocab_size = info
            .vocab_size
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Wire("info response lacks vocab_size".into()))?;
        Ok(d)
    }

    /// Requests sent so far, the info handshake included.
    pub fn requests(&self) -> u64 {
        self.next_id.get()
    }

    fn call(&self, mut req: WireRequest) -> Result<WireResponse> {
        let id = self.next_id.get() + 1;
        self.next_id.set(id);
        req.request_id = id;
        let mut line = serde_json::to_string(&req).expect("request serializes");
        line.push('\n');
        let mut io = self.io.borrow_mut();
        let (reader, writer) = &mut *io;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Wire(format!("send: {e}")))?;
        let mut buf = String::new();
        let n = reader
            .read_line(&mut buf)
            .map_err(|e| Error::Wire(format!("receive: {e}")))?;
        if n == 0 {
            return Err(Error::Wire("server closed the stream".into()));
        }
        let resp: WireResponse = serde_json::from_str(buf.trim_end())
            .map_err(|e| Error::Wire(format!("malformed response: {e}")))?;
        if let Some(err) = resp.error {
            return Err(Error::Wire(format!("server error {}: {}", err.code, err.message)));
        }
        if resp.request_id != Some(id) {
            return Err(Error::Wire(format!(
                "response id {:?} does not match request {id}",
                resp.request_id
            )));
        }
        Ok(resp)
    }
}

impl WireDenoiser<BufReader<ChildStdout>, ChildStdin> {
    /// Spawn `command` through `sh -c` and speak the protocol over its
    /// standard streams.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Wire(format!("spawn {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut d = Self::connect(BufReader::new(stdout), stdin)?;
        d.child = Some(child);
        Ok(d)
    }
}

impl<R, W> Drop for WireDenoiser<R, W> {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl<R: BufRead, W: Write> Denoiser for WireDenoiser<R, W> {
    type BlockState = Vec<u32>;

    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn summarize_block(&self, buffer: &TokenBuffer, block: Range<usize>) -> Vec<u32> {
        buffer.tokens()[block].iter().map(|t| t.0).collect()
    }

    fn predict(
        &self,
        buffer: &TokenBuffer,
        window: &BlockWindow,
        context: &ContextView<Vec<u32>>,
    ) -> Result<Vec<Prediction>> {
        let mut tokens: Vec<Option<u32>> = buffer.prompt().iter().map(|t| Some(t.0)).collect();
        tokens.extend(context.blocks.iter().flatten().map(|&t| Some(t)));
        if tokens.len() != window.start {
            return Err(Error::Contract(format!(
                "context covers {} positions, window starts at {}",
                tokens.len(),
                window.start
            )));
        }
        tokens.extend(
            buffer.tokens()[window.range()]
                .iter()
                .map(|t| (!t.is_mask()).then_some(t.0)),
        );
        let mask_positions: Vec<usize> = buffer.masked_positions(window.range()).collect();
        let resp = self.call(WireRequest {
            request_id: 0,
            op: WireOp::Evaluate,
            tokens,
            prompt_len: buffer.prompt_len(),
            mask_positions: mask_positions.clone(),
            window: Some([window.start, window.end]),
            cache_id: self.cache_id.borrow().clone(),
            invalidate: self.pending_invalidate.borrow_mut().take(),
        })?;
        *self.cache_id.borrow_mut() = resp.cache_id;
        let preds = resp
            .predictions
            .ok_or_else(|| Error::Wire("evaluate response lacks predictions".into()))?;
        let got: Vec<usize> = preds.iter().map(|p| p.position).collect();
        if got != mask_positions {
            return Err(Error::Wire(format!(
                "response positions {got:?} differ from request masks {mask_positions:?}"
            )));
        }
        Ok(preds
            .into_iter()
            .map(|p| Prediction {
                position: p.position,
                token: TokenId(p.token),
                confidence: p.confidence,
                top_k: p
                    .top_k
                    .map(|v| v.into_iter().map(|(t, c)| (TokenId(t), c)).collect()),
            })
            .collect())
    }

    fn invalidate(&self, range: Range<usize>) -> Result<()> {
        let mut pending = self.pending_invalidate.borrow_mut();
        *pending = Some(match *pending {
            Some([s, e]) => [s.min(range.start), e.max(range.end)],
            None => [range.start, range.end],
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_line_shape() {
        let req = WireRequest {
            request_id: 3,
            op: WireOp::Evaluate,
            tokens: vec![Some(1), None],
            prompt_len: 1,
            mask_positions: vec![1],
            window: Some([1, 2]),
            cache_id: None,
            invalidate: Some([1, 2]),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"request_id":3,"op":"evaluate","tokens":[1,null],"prompt_len":1,"mask_positions":[1],"window":[1,2],"invalidate":[1,2]}"#
        );
    }

    #[test]
    fn error_response_parses_without_id() {
        let r: WireResponse =
            serde_json::from_str(r#"{"request_id":null,"error":{"code":"bad_request","message":"x"}}"#)
                .unwrap();
        assert_eq!(r.error.unwrap().code, "bad_request");
        assert_eq!(r.request_id, None);
    }

    #[test]
    fn closed_stream_is_wire_error() {
        let out: Vec<u8> = Vec::new();
        let res = WireDenoiser::connect(&b""[..], out);
        assert!(matches!(res, Err(Error::Wire(_))));
    }

    #[test]
    fn mismatched_id_rejected() {
        let resp = b"{\"request_id\":9,\"vocab_size\":4}\n";
        let res = WireDenoiser::connect(&resp[..], Vec::new());
        assert!(matches!(res, Err(Error::Wire(m)) if m.contains("does not match")));
    }
}
