pub mod aux_caption;
pub mod embedding_io;
pub mod error;
pub mod gradient_suite;
pub mod hierarchy;
pub mod losses;
pub mod model;
pub mod retrieval_eval;
pub mod rng;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{grad_check, ParamId, ParamStore, Tape, Tensor, Var};
