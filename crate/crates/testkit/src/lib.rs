//! Test support shared by the engine's integration and acceptance tests.

pub mod fakes;
pub mod gen;
pub mod run;

pub use fakes::{ScriptedServices, ServiceStats};
pub use gen::{Gen, GenOptions, Generated};
pub use run::{
    activity_sequences, matches_enactment_grammar, run_to_end, serve_engine, watch_all, RunOutcome,
};
