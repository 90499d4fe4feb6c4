pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
