//! Streaming decoder-only recognition over discrete speech tokens.
//!
//! The crate builds boundary-token (BTI) and text-token (TTI) training
//! layouts from aligned utterances, trains a small decoder-only transformer
//! with hand-written backpropagation, and decodes incrementally, emitting a
//! text token each time the model predicts a boundary.

pub mod augment;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod seed;
pub mod seqlayout;
pub mod streamdecode;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use tokens::{TokenId, TokenKind, VocabSpec};
