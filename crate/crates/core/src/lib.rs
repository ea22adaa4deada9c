//! Core algorithms for a desk-scale test-time adaptation laboratory: a small
//! encoder-decoder recognizer over synthetic per-speaker channels, beam
//! decoding with an exhaustive oracle, hypothesis-level adaptation losses,
//! and the adaptation/evaluation protocol around them.

pub mod adapt;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seeds;
pub mod selfcheck;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, TokenId, TokenSequence, BOS, EOS, PAD};
pub use tape::{Tape, ValueId};
pub use tensor::{ParamGroup, ParameterStore, Tensor};
