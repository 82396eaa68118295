pub mod checkpoint;
pub mod data_io;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod pquase;
pub mod span_qa;
pub mod squase;
pub mod srl_eval;
pub mod tensor;

pub use error::{Error, Result};
