//! Deterministic f64 tensor math with reverse-mode autodiff, transformer
//! building blocks, the fusion vision-language encoder, pretraining
//! objectives, and finetuning heads.

pub mod encoder;
pub mod error;
pub mod finetune;
pub mod nn;
pub mod objectives;
pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use rng::SeededRng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
