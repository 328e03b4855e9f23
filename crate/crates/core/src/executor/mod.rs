//! Compiles models into flat programs and runs them inside an instance's
//! execution unit.

mod enact;
pub mod plan;
mod run;

pub use plan::{compile, CompileError, Entry, Op, Plan};
pub(crate) use run::{Unit, UnitEnd};
