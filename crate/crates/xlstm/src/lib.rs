pub mod error;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod equiv;
pub mod gradcheck;
pub mod mlstm;
pub mod numerics;
pub mod slstm;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
