use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mvn::{check_column_cover, ParameterSet};
use crate::protocol::message::{vertical_msg_id, NodeId, Payload, ProtocolMessage};
use crate::protocol::noise::NoiseLedger;
use crate::protocol::steps::{cn_adjust, cn_final, cn_initiate, CentralInit};
use crate::protocol::NodeLogic;

/// The coordinating node. Holds no data; proposes parameters and removes the
/// masks from the final total.
#[derive(Debug)]
pub struct CentralNode {
    n: usize,
    chain_cols: Vec<Vec<usize>>,
    order: Vec<usize>,
    ledger: NoiseLedger,
    band: u32,
    sessions: HashMap<u64, CentralSession>,
    results: HashMap<u64, f64>,
}

#[derive(Debug)]
struct CentralSession {
    init: CentralInit,
    bundles: Vec<Option<(DMatrix<f64>, DMatrix<f64>)>>,
    tail_means: Vec<Option<DMatrix<f64>>>,
    /// Over TCP the clean request can overtake the last bundle.
    ll_star: Option<f64>,
}

pub(crate) fn make_msg(k_total: u32, eval_id: u64, round: u32, sender: NodeId, receiver: NodeId, payload: Payload) -> ProtocolMessage {
    ProtocolMessage { msg_id: vertical_msg_id(k_total, round, payload.kind()), eval_id, round, sender, receiver, payload }
}

impl CentralNode {
    /// `chain_cols[k]` lists the global variable indices held by data node `k+1`,
    /// in the order that node stores them. `p` is the total number of variables.
    pub fn new(n: usize, p: usize, chain_cols: Vec<Vec<usize>>, ledger: NoiseLedger, band: u32) -> Result<Self> {
        if chain_cols.len() < 2 {
            return Err(Error::Layout(format!("vertical protocol needs at least 2 data nodes, got {}", chain_cols.len())));
        }
        if n == 0 {
            return Err(Error::Layout("no rows".into()));
        }
        check_column_cover(p, &chain_cols)?;
        let order = chain_cols.iter().flatten().copied().collect();
        Ok(Self { n, chain_cols, order, ledger, band, sessions: HashMap::new(), results: HashMap::new() })
    }

    pub fn k_total(&self) -> u32 {
        self.chain_cols.len() as u32
    }

    pub fn chain_cols(&self) -> &[Vec<usize>] {
        &self.chain_cols
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Begin evaluation `eval_id`; returns the message to data node 1.
    pub fn start(&mut self, eval_id: u64, params: &ParameterSet) -> Result<Vec<ProtocolMessage>> {
        if params.dim() != self.order.len() {
            return Err(Error::Shape(format!("{} parameters for {} variables", params.dim(), self.order.len())));
        }
        if self.sessions.contains_key(&eval_id) || self.results.contains_key(&eval_id) {
            return Err(Error::ProtocolOrder(format!("evaluation {eval_id} already started")));
        }
        let chained = params.select(&self.order)?;
        let dims: Vec<usize> = self.chain_cols.iter().map(Vec::len).collect();
        let mut noise = self.ledger.source(self.band, 0, eval_id);
        let init = cn_initiate(&chained, &dims, self.n, &mut noise)?;
        let k = self.chain_cols.len();
        let msg = make_msg(
            self.k_total(),
            eval_id,
            1,
            NodeId::Central,
            NodeId::Data(1),
            Payload::MarginalParams {
                sigma: init.blocks[0].marginal.clone(),
                mu_tilde: init.first_mean.clone(),
                p_last: init.masks[k - 1].clone(),
            },
        );
        self.sessions.insert(eval_id, CentralSession { init, bundles: vec![None; k], tail_means: vec![None; k], ll_star: None });
        Ok(vec![msg])
    }

    /// Final log-likelihood of a finished evaluation.
    pub fn take_result(&mut self, eval_id: u64) -> Option<f64> {
        self.results.remove(&eval_id)
    }

    /// What the central node is still waiting for in `eval_id`.
    pub fn awaiting(&self, eval_id: u64) -> String {
        let Some(s) = self.sessions.get(&eval_id) else {
            return format!("evaluation {eval_id} is not open");
        };
        let k_total = s.bundles.len();
        for k in 1..=k_total {
            if s.bundles[k - 1].is_none() {
                return format!("round {k}: bundle from DN{k}");
            }
            if k > 1 && k < k_total && s.tail_means[k - 1].is_none() {
                return format!("round {k}: conditional means from DN{k}");
            }
        }
        format!("round {k_total}: clean request from DN1")
    }

    /// Send `B_k`, `C_k`, `P_k` and node `k+1`'s covariance block once both
    /// uploads of node `k` are in.
    fn forward(&self, eval_id: u64, k: usize) -> Result<Option<ProtocolMessage>> {
        let s = &self.sessions[&eval_id];
        let (Some((a1, _)), Some(tail)) = (&s.bundles[k - 1], &s.tail_means[k - 1]) else {
            return Ok(None);
        };
        let b = cn_adjust(a1, tail, &s.init.blocks[k - 1].cross)?;
        Ok(Some(make_msg(
            self.k_total(),
            eval_id,
            k as u32 + 1,
            NodeId::Central,
            NodeId::Data(k as u32 + 1),
            Payload::CentralForward {
                sigma: s.init.blocks[k].marginal.clone(),
                b,
                c: s.init.coefficients[k - 1].clone(),
                p: s.init.masks[k - 1].clone(),
            },
        )))
    }

    /// Remove the masks once the clean request and every bundle are in.
    fn try_finish(&mut self, eval_id: u64) -> Result<()> {
        let s = &self.sessions[&eval_id];
        let Some(ll_star) = s.ll_star else {
            return Ok(());
        };
        if s.bundles.iter().any(Option::is_none) {
            return Ok(());
        }
        let session = self.sessions.remove(&eval_id).expect("session checked above");
        let bundles: Vec<_> = session.bundles.into_iter().flatten().collect();
        let sigmas: Vec<DMatrix<f64>> = session.init.blocks.iter().map(|b| b.marginal.clone()).collect();
        let ll = cn_final(ll_star, &bundles, &session.init.masks, &sigmas)?;
        self.results.insert(eval_id, ll);
        Ok(())
    }

    fn handle_inner(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        let k_total = self.chain_cols.len();
        let eval_id = msg.eval_id;
        if msg.receiver != NodeId::Central {
            return Err(Error::ProtocolOrder(format!("message for {} delivered to CN", msg.receiver)));
        }
        if let Payload::Abort { reason } = msg.payload {
            self.sessions.remove(&eval_id);
            return Err(Error::ProtocolAborted(format!("{} aborted evaluation {eval_id}: {reason}", msg.sender)));
        }
        let NodeId::Data(k) = msg.sender else {
            return Err(Error::ProtocolOrder("CN received a message from itself".into()));
        };
        let k = k as usize;
        let session = self
            .sessions
            .get_mut(&eval_id)
            .ok_or_else(|| Error::ProtocolOrder(format!("no open evaluation {eval_id}")))?;
        if k > k_total || msg.round as usize != k && !matches!(msg.payload, Payload::CleanRequest { .. }) {
            return Err(Error::ProtocolOrder(format!("{} sent round {} message", msg.sender, msg.round)));
        }
        match msg.payload {
            Payload::BundleUp { a1, a2 } => {
                if session.bundles[k - 1].is_some() {
                    return Err(Error::ProtocolOrder(format!("duplicate bundle from DN{k}")));
                }
                session.bundles[k - 1] = Some((a1, a2));
                if k == 1 {
                    session.tail_means[0] = Some(session.init.first_tail_mean.clone());
                }
                if k < k_total {
                    return Ok(self.forward(eval_id, k)?.into_iter().collect());
                }
                self.try_finish(eval_id)?;
                Ok(vec![])
            }
            Payload::CondMeanUp { mu_star } => {
                if k == 1 || k == k_total || session.tail_means[k - 1].is_some() {
                    return Err(Error::ProtocolOrder(format!("unexpected conditional mean upload from DN{k}")));
                }
                session.tail_means[k - 1] = Some(mu_star);
                Ok(self.forward(eval_id, k)?.into_iter().collect())
            }
            Payload::CleanRequest { ll_star } => {
                if k != 1 || msg.round as usize != k_total {
                    return Err(Error::ProtocolOrder(format!("clean request from DN{k} in round {}", msg.round)));
                }
                if session.ll_star.replace(ll_star).is_some() {
                    return Err(Error::ProtocolOrder("duplicate clean request".into()));
                }
                self.try_finish(eval_id)?;
                Ok(vec![])
            }
            other => Err(Error::ProtocolOrder(format!("CN cannot accept {:?}", other.kind()))),
        }
    }
}

impl NodeLogic for CentralNode {
    fn id(&self) -> NodeId {
        NodeId::Central
    }

    fn handle(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        let eval_id = msg.eval_id;
        let out = self.handle_inner(msg);
        if out.is_err() {
            self.sessions.remove(&eval_id);
        }
        out
    }

    fn discard(&mut self, eval_id: u64) {
        self.sessions.remove(&eval_id);
        self.results.remove(&eval_id);
    }
}
