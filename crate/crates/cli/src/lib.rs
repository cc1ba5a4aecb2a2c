//! Command implementations behind the `provega` binary.

pub mod gallery;
pub mod generator;
pub mod run;
pub mod serve;
