//! The masked vertical-partition protocol and the horizontal summation round.
//!
//! A vertical evaluation with `K` data nodes runs `K` rounds. In round `k`
//! node `k` receives a masked conditional mean for its block, reports a masked
//! partial log-likelihood along the chain, and uploads an adjustment bundle
//! that lets the central node condition the remaining blocks. Node 1 closes
//! the chain and the central node removes the remaining masks.

pub mod central;
pub mod data_node;
pub mod horizontal;
pub mod message;
pub mod noise;
pub mod steps;

pub use central::CentralNode;
pub use data_node::DataNode;
pub use horizontal::{horizontal_round, HorizontalOutcome};
pub use message::{NodeId, Payload, PayloadKind, ProtocolMessage, Transcript, TranscriptEntry};
pub use noise::{NoiseLedger, NoiseSource};

use crate::error::Result;

/// A protocol participant driven by incoming messages.
pub trait NodeLogic: Send {
    fn id(&self) -> NodeId;

    /// Process one message and return the messages it triggers.
    fn handle(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>>;

    /// Forget any state held for `eval_id`.
    fn discard(&mut self, eval_id: u64);
}
