//! Service-oriented process execution engine.
//!
//! Instances execute tree-structured process models. Activities delegate
//! their work to external HTTP services through a small header-extension
//! protocol, every execution aspect is streamed over topic-based
//! subscriptions, and subscribers can shape execution by answering votes.

pub mod api;
pub mod bus;
pub mod config;
pub mod delta;
pub mod engine;
pub mod error;
pub mod event;
pub mod executor;
pub mod gateway;
pub mod lifecycle;
pub mod model;
pub mod persistence;
pub mod protocol;
pub mod script;

pub use engine::{Category, ContextPatch, Engine, InstanceOverview, InstanceSummary};
pub use error::EngineError;
