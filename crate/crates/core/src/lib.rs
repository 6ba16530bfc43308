pub mod error;
pub mod grid;
pub mod powerflow;
pub mod dynamics;
pub mod qp;
pub mod certificates;
pub mod control;
pub mod io;
pub mod screening;
pub mod sampling;
pub mod casestudy;

pub use error::{Error, Result};
