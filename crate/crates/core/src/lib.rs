pub mod boxes;
pub mod error;
pub mod fpn;
pub mod harness;
pub mod head;
pub mod model;
pub mod nn;
pub mod roi;
pub mod rpn;
pub mod tensor;

pub use error::{Error, Result};
