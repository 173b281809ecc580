//! Reversible block diffusion decoding for masked diffusion language models.

pub mod cache;
pub mod decoder;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod remask;
pub mod scheduler;
pub mod trace;
pub mod types;
pub mod wire;

pub use decoder::{decode, DecodeConfig, DecodeResult, Method, Metrics};
pub use denoiser::{Denoiser, DenoiserOutput, Prediction};
pub use error::{Error, Result};
pub use remask::RemaskPolicy;
pub use scheduler::ScheduleConfig;
pub use types::{BlockGrid, BlockWindow, EventKind, Mode, TokenBuffer, TokenId, TraceEvent};
