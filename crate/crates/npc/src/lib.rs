//! File formats, parallel drivers and the command-line front end for the
//! decision-path coverage toolkit in `npc-core`.

pub use npc_core as core;

pub mod cli;
pub mod format;
pub mod parallel;
pub mod report;
