//! Synthetic scenes, a hand-wired oracle model, and the experiment runner
//! behind the `sid` command.

pub mod experiment;
pub mod oracle;
pub mod report;
pub mod scenario;
pub mod strategy;
