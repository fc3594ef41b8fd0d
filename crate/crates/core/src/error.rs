use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = EflError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EflError {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: u32 },

    #[error("infeasible partition for label {label}: {reason}")]
    InfeasiblePartition { label: usize, reason: String },

    #[error("partition leaves node {node_id} without {which} samples")]
    EmptyNode { node_id: u32, which: &'static str },

    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("channel closed: protocol shutdown")]
    Shutdown,

    #[error("node {node_id}, round {round}: {source}")]
    Node {
        node_id: u32,
        round: u32,
        #[source]
        source: Box<EflError>,
    },

    #[error("model {label}: {source}")]
    Model {
        label: String,
        #[source]
        source: Box<EflError>,
    },
}

impl EflError {
    pub fn contract(msg: impl Into<String>) -> Self {
        EflError::Contract(msg.into())
    }

    pub fn in_node(self, node_id: u32, round: u32) -> Self {
        EflError::Node { node_id, round, source: Box::new(self) }
    }

    pub fn in_model(self, label: &str) -> Self {
        EflError::Model { label: label.into(), source: Box::new(self) }
    }
}
