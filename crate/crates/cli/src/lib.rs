//! `kpeq` command line entry points and the HTTP chat service.

pub mod cli;
pub mod service;
pub mod session;

pub use cli::run;
