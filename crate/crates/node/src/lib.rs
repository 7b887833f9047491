//! Node runtime and command implementations behind the `aos` binary.

pub mod commands;
pub mod config;
pub mod runtime;
pub mod wire;
