use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mvn::ParameterSet;
use crate::protocol::{message::vertical_msg_id, CentralNode, DataNode, NodeId, NodeLogic, Payload, PayloadKind, ProtocolMessage, Transcript};
use crate::transport::{EvalOutcome, VerticalTransport};

/// Single-threaded FIFO message bus. Delivery order depends only on the
/// messages themselves, so runs are fully reproducible.
#[derive(Debug)]
pub struct InProcessBus {
    central: CentralNode,
    nodes: Vec<DataNode>,
    clock: u64,
}

impl InProcessBus {
    /// `nodes[i]` must be the data node at chain position `i + 1`.
    pub fn new(central: CentralNode, nodes: Vec<DataNode>) -> Result<Self> {
        if nodes.len() != central.k_total() as usize || nodes.iter().enumerate().any(|(i, n)| n.position() as usize != i + 1) {
            return Err(Error::Layout("data nodes must be supplied in chain order, one per position".into()));
        }
        Ok(Self { central, nodes, clock: 0 })
    }

    pub fn nodes(&self) -> &[DataNode] {
        &self.nodes
    }

    fn discard_all(&mut self, eval_id: u64) {
        self.central.discard(eval_id);
        for n in &mut self.nodes {
            n.discard(eval_id);
        }
    }

    fn run(&mut self, eval_id: u64, params: &ParameterSet, transcript: &mut Transcript) -> Result<f64> {
        let k_total = self.central.k_total();
        let mut queue: VecDeque<ProtocolMessage> = self.central.start(eval_id, params)?.into();
        while let Some(msg) = queue.pop_front() {
            transcript.push(self.clock, msg.clone());
            self.clock += 1;
            let out = match msg.receiver {
                NodeId::Central => self.central.handle(msg)?,
                NodeId::Data(k) => {
                    let node = self
                        .nodes
                        .get_mut(k as usize - 1)
                        .ok_or_else(|| Error::ProtocolOrder(format!("no data node {k}")))?;
                    let round = msg.round;
                    match node.handle(msg) {
                        Ok(out) => out,
                        Err(e) => vec![ProtocolMessage {
                            msg_id: vertical_msg_id(k_total, round, PayloadKind::Abort),
                            eval_id,
                            round,
                            sender: NodeId::Data(k),
                            receiver: NodeId::Central,
                            payload: Payload::Abort { reason: e.to_string() },
                        }],
                    }
                }
            };
            queue.extend(out);
        }
        self.central
            .take_result(eval_id)
            .ok_or_else(|| Error::ProtocolAborted(format!("evaluation {eval_id} stalled: {}", self.central.awaiting(eval_id))))
    }
}

impl VerticalTransport for InProcessBus {
    fn run_evaluation(&mut self, eval_id: u64, params: &ParameterSet) -> Result<EvalOutcome> {
        let mut transcript = Transcript::default();
        match self.run(eval_id, params, &mut transcript) {
            Ok(ll) => {
                transcript.sort();
                Ok(EvalOutcome { ll, transcript })
            }
            Err(e) => {
                self.discard_all(eval_id);
                Err(e)
            }
        }
    }

    fn k_total(&self) -> u32 {
        self.central.k_total()
    }
}
