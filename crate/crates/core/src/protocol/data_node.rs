use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::protocol::central::make_msg;
use crate::protocol::message::{NodeId, Payload, ProtocolMessage};
use crate::protocol::noise::NoiseLedger;
use crate::protocol::steps::{en_adjust, en_compute, fn_adjust, Upstream};
use crate::protocol::NodeLogic;

/// A data-holding party at a fixed position in the vertical chain.
///
/// The node's data matrix never leaves this struct: no payload variant is
/// built from it directly, only from masked derived quantities.
#[derive(Debug)]
pub struct DataNode {
    position: u32,
    k_total: u32,
    x: DMatrix<f64>,
    ledger: NoiseLedger,
    band: u32,
    sessions: HashMap<u64, Session>,
}

#[derive(Debug, Default)]
struct Session {
    p_last: Option<DMatrix<f64>>,
    chain: Option<ChainIn>,
    central: Option<CentralIn>,
}

#[derive(Debug)]
struct ChainIn {
    ll_tilde: f64,
    r: DMatrix<f64>,
    q: DMatrix<f64>,
    m: Option<DMatrix<f64>>,
}

#[derive(Debug)]
struct CentralIn {
    sigma: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    p: DMatrix<f64>,
}

impl DataNode {
    /// `x` holds this node's columns for the band's rows, in row-id order.
    pub fn new(position: u32, k_total: u32, x: DMatrix<f64>, ledger: NoiseLedger, band: u32) -> Result<Self> {
        if k_total < 2 || position == 0 || position > k_total {
            return Err(Error::Layout(format!("position {position} in a chain of {k_total}")));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Layout(format!("DN{position} holds an empty {}x{} block", x.nrows(), x.ncols())));
        }
        Ok(Self { position, k_total, x, ledger, band, sessions: HashMap::new() })
    }

    pub fn position(&self) -> u32 {
        self.position
    }

    pub fn own_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Number of sessions still waiting for messages.
    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }

    fn me(&self) -> NodeId {
        NodeId::Data(self.position)
    }

    fn msg(&self, eval_id: u64, round: u32, to: NodeId, payload: Payload) -> ProtocolMessage {
        make_msg(self.k_total, eval_id, round, self.me(), to, payload)
    }

    fn expect(&self, ok: bool, msg: &ProtocolMessage) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::ProtocolOrder(format!(
                "DN{} cannot accept {:?} from {} in round {}",
                self.position,
                msg.payload.kind(),
                msg.sender,
                msg.round
            )))
        }
    }

    fn first_round(&mut self, eval_id: u64, sigma: DMatrix<f64>, mu_tilde: DMatrix<f64>, p_last: DMatrix<f64>) -> Result<Vec<ProtocolMessage>> {
        let (n, pk) = self.x.shape();
        let mut noise = self.ledger.source(self.band, self.position, eval_id);
        let r = noise.matrix(n, pk);
        let q = noise.matrix(pk, n);
        let out = en_compute(&self.x, &mu_tilde, &sigma, None, &r, &q)?;
        let session = self.sessions.entry(eval_id).or_default();
        session.p_last = Some(p_last);
        Ok(vec![
            self.msg(eval_id, 1, NodeId::Central, Payload::BundleUp { a1: out.a1, a2: out.a2 }),
            self.msg(eval_id, 1, NodeId::Data(2), Payload::ChainForward { ll_tilde: out.ll_tilde, r, q, m: None }),
        ])
    }

    fn later_round(&mut self, eval_id: u64) -> Result<Vec<ProtocolMessage>> {
        let session = self.sessions.get(&eval_id).expect("caller inserted session");
        let (Some(chain), Some(central)) = (&session.chain, &session.central) else {
            return Ok(vec![]);
        };
        let k = self.position;
        if (k >= 3) != chain.m.is_some() {
            return Err(Error::ProtocolOrder(format!("DN{k} expected {} M mask", if k >= 3 { "an" } else { "no" })));
        }
        let adjusted = en_adjust(
            Upstream {
                ll_tilde: chain.ll_tilde,
                b: &central.b,
                c: &central.c,
                r: &chain.r,
                p: &central.p,
                q: &chain.q,
                m: chain.m.as_ref(),
            },
            self.own_dim(),
        )?;
        let (n, pk) = self.x.shape();
        let mut noise = self.ledger.source(self.band, k, eval_id);
        let r = noise.matrix(n, pk);
        let q = noise.matrix(pk, n);
        let out = en_compute(&self.x, &adjusted.own_mean, &central.sigma, Some(adjusted.ll_star), &r, &q)?;
        self.sessions.remove(&eval_id);
        let mut msgs = vec![self.msg(eval_id, k, NodeId::Central, Payload::BundleUp { a1: out.a1, a2: out.a2 })];
        if k < self.k_total {
            let m = noise.matrix(n, adjusted.tail_mean.ncols());
            let mu_star = &adjusted.tail_mean + &m;
            msgs.push(self.msg(eval_id, k, NodeId::Central, Payload::CondMeanUp { mu_star }));
            msgs.push(self.msg(eval_id, k, NodeId::Data(k + 1), Payload::ChainForward { ll_tilde: out.ll_tilde, r, q, m: Some(m) }));
        } else {
            msgs.push(self.msg(eval_id, k, NodeId::Data(1), Payload::FinalToFirst { ll_tilde: out.ll_tilde, q }));
        }
        Ok(msgs)
    }

    fn handle_inner(&mut self, msg: ProtocolMessage) -> Result<Vec<ProtocolMessage>> {
        let k = self.position;
        self.expect(msg.receiver == self.me(), &msg)?;
        let eval_id = msg.eval_id;
        match msg.payload {
            Payload::MarginalParams { .. } => {
                self.expect(k == 1 && msg.sender == NodeId::Central && msg.round == 1, &msg)?;
                self.expect(!self.sessions.contains_key(&eval_id), &msg)?;
                let Payload::MarginalParams { sigma, mu_tilde, p_last } = msg.payload else { unreachable!() };
                self.first_round(eval_id, sigma, mu_tilde, p_last)
            }
            Payload::ChainForward { .. } => {
                self.expect(k >= 2 && msg.sender == NodeId::Data(k - 1) && msg.round == k - 1, &msg)?;
                let session = self.sessions.entry(eval_id).or_default();
                if session.chain.is_some() {
                    return Err(Error::ProtocolOrder(format!("duplicate chain forward at DN{k}")));
                }
                let Payload::ChainForward { ll_tilde, r, q, m } = msg.payload else { unreachable!() };
                session.chain = Some(ChainIn { ll_tilde, r, q, m });
                self.later_round(eval_id)
            }
            Payload::CentralForward { .. } => {
                self.expect(k >= 2 && msg.sender == NodeId::Central && msg.round == k, &msg)?;
                let session = self.sessions.entry(eval_id).or_default();
                if session.central.is_some() {
                    return Err(Error::ProtocolOrder(format!("duplicate central forward at DN{k}")));
                }
                let Payload::CentralForward { sigma, b, c, p } = msg.payload else { unreachable!() };
                session.central = Some(CentralIn { sigma, b, c, p });
                self.later_round(eval_id)
            }
            Payload::FinalToFirst { .. } => {
                self.expect(k == 1 && msg.sender == NodeId::Data(self.k_total) && msg.round == self.k_total, &msg)?;
                let Payload::FinalToFirst { ll_tilde, q } = msg.payload else { unreachable!() };
                let p_last = self
                    .sessions
                    .remove(&eval_id)
                    .and_then(|s| s.p_last)
                    .ok_or_else(|| Error::ProtocolOrder(format!("DN1 got the final total of {eval_id} before its first round")))?;
                let ll_star = fn_adjust(ll_tilde, &p_last, &q)?;
                Ok(vec![self.msg(eval_id, self.k_total, NodeId::Central, Payload::CleanRequest { ll_star })])
            }
            _ => Err(Error::ProtocolOrder(format!("DN{k} cannot accept {:?}", msg.payload.kind()))),
        }
    }
}

impl NodeLogic for DataNode {
    fn id(&self) -> NodeId {
        self.me()
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
    }
}
