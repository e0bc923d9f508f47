pub mod adapt;
pub mod error;
pub mod expr;
pub mod gark;
pub mod integrate;
pub mod order;
pub mod problems;
pub mod stability;
pub mod tableaux;

pub use error::{Error, Result};
