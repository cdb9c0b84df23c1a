//! Scenario-driven front end for the consensus toolkit. The library half
//! exposes the file formats and command implementations so integration
//! tests can drive them without spawning the binary.

pub mod commands;
pub mod scenario;
