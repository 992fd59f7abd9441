//! Transformer laboratory for untied positional encoding.
//!
//! A small reverse-mode autodiff engine ([`tensor`]), the positional terms
//! ([`posenc`]) and score assembly ([`attention`]) for nine encoding
//! variants, a BERT-style encoder ([`model`]), masked-LM and classification
//! training ([`train`]), and analysis instruments ([`analysis`]).

pub mod analysis;
pub mod attention;
pub mod error;
pub mod model;
pub mod posenc;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attention::EncodingVariant;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Params};
pub use tensor::{Tape, Tensor, Var};
