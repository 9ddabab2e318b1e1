//! The encrypted distributed protocol: agent and operator nodes, message
//! framing, a deterministic transport and the security audit.
//!
//! Every agent iterate is encrypted under the operator's key (instance 0).
//! Agents run the explicit ADMM updates on ciphertexts with their own
//! plaintext update matrices; only the final `α_i` leaves instance 0, via a
//! key switch performed by a neighbor that holds the `0 → i` key.

mod audit;
mod message;
mod node;
mod system;
mod transport;

use thiserror::Error;

pub use audit::{audit_trace, AuditReport, Roles, Violation};
pub use message::{MessageKind, Payload, WireMessage, ITEMS_MAGIC, KEY_PAYLOAD_MAGIC, UNSEALED_MAGIC};
pub use node::{AgentNode, OperatorNode};
pub use system::{
    default_delegates, EncryptedSystem, FaultInjection, ProtocolConfig, RunStats, StepOutcome,
};
pub use transport::{AuditTap, InMemoryTransport, ItemFact, LogEntry, MessageRecord};

use crate::admm::AdmmError;
use crate::channel::ChannelError;
use crate::fixed_point::FpError;
use crate::he::HeError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Codec(#[from] FpError),
    #[error("malformed message: {0}")]
    Wire(String),
    #[error("round {round} on {from}->{to} does not follow round {last}")]
    RoundNotIncreasing { from: u32, to: u32, round: u64, last: u64 },
    #[error("agent {agent} is missing a value for entry {entry}")]
    MissingShare { agent: u32, entry: usize },
    #[error("agent {agent} is missing parameter {index}")]
    MissingParam { agent: u32, index: usize },
    #[error("agent {0} cannot be its own delegate")]
    SelfDelegate(u32),
    #[error("delegate {delegate} of agent {agent} is not a neighbor")]
    DelegateNotNeighbor { agent: u32, delegate: u32 },
    #[error("agent {0} has no neighbor to delegate its key switch to")]
    NoDelegate(u32),
    #[error("agent {delegate} holds no switch key for agent {subject}")]
    MissingSwitchKey { delegate: u32, subject: u32 },
    #[error("switch key registry contains cycles {0:?}")]
    KeyCycles(Vec<Vec<u32>>),
    #[error("unexpected {kind} from {from} at {to}")]
    Unexpected { kind: String, from: u32, to: u32 },
    #[error("invalid protocol input: {0}")]
    Invalid(String),
}
