//! Scene-graph token encoding with rank-structured attention.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense f64 tensors on a reverse-mode tape, plus a
//!   finite-difference gradient checker.
//! * [`tokens`]: semantic token sets, validation, packing into the fixed
//!   context window, and the JSONL corpus format.
//! * [`rank`]: the pairwise rank grid derived from scene structure and the
//!   learned monotone weight table that turns ranks into attention biases.
//! * [`encoder`]: the dual encoder (structured visual tokens, caption text)
//!   built from shared transformer blocks.
//! * [`checkpoint`]: flat binary serialization of parameters and optimizer
//!   state.
//! * [`trainer`]: symmetric contrastive training with AdamW and a
//!   warmup-cosine schedule.
//! * [`synth`]: the deterministic synthetic scene generator used for all
//!   desk-scale experiments.
//! * [`eval`]: retrieval and compositional probes over frozen embeddings.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod rank;
pub mod eval;
pub mod synth;
pub mod tensor;
pub mod tokens;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
