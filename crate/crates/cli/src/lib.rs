//! Library side of the command-line front end: configuration loading,
//! run manifests, and the command implementations.

pub mod commands;
pub mod config;
pub mod manifest;
