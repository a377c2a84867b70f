//! Command-line runs over the prosody diffusion library: configuration,
//! evaluation protocols, plotting and the subcommand bodies.

pub mod commands;
pub mod config;
pub mod plot;
pub mod protocol;
