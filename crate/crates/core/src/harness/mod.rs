//! Configuration, artifacts and the command-line front end.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod outputs;
