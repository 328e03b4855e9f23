use crate::lifecycle::{IllegalTransition, InstanceState};
use crate::model::ModelError;
use crate::persistence::PersistenceError;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("instance {0} not found")]
    NotFound(u64),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error("{operation} is not allowed while the instance is {state}")]
    IllegalState {
        state: InstanceState,
        operation: &'static str,
    },
    #[error("rejected by vote: {0}")]
    VoteRejected(String),
    #[error(transparent)]
    InvalidModel(#[from] ModelError),
    #[error("{0}")]
    BadRequest(String),
    #[error("conflicting change: {0}")]
    Conflict(String),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
}
