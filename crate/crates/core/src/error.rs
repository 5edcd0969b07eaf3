use thiserror::Error;

/// Errors raised while building, planning, or scheduling a simulation.
#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("capacity error in {layer}: {reason}")]
    Capacity { layer: String, reason: String },
    #[error("plan error: {0}")]
    Plan(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("block not VF-fusible at this config: {0}")]
    FusionCapacity(String),
    #[error("HF shape error: {0}")]
    HfShape(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("item {index}: {inner}")]
    Item { index: usize, inner: Box<SimError> },
}

impl SimError {
    pub fn at_item(self, index: usize) -> Self {
        SimError::Item {
            index,
            inner: Box::new(self),
        }
    }

    /// Innermost error, with item wrappers stripped.
    pub fn root(&self) -> &SimError {
        match self {
            SimError::Item { inner, .. } => inner.root(),
            other => other,
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
