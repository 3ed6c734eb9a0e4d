//! Node runtimes wired together by a transport, and transcript replay.

pub mod inproc;
pub mod tcp;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use inproc::InProcessBus;
pub use tcp::{NodeServer, TcpConfig, TcpFederation};

use crate::error::{Error, Result};
use crate::mvn::ParameterSet;
use crate::protocol::message::vertical_message_count;
use crate::protocol::steps::cn_final;
use crate::protocol::{NodeId, Payload, Transcript};

/// Result of one vertical evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub ll: f64,
    /// Every message of the evaluation in canonical order.
    pub transcript: Transcript,
}

/// Something that can carry one vertical evaluation end to end.
pub trait VerticalTransport: Send {
    /// Run `eval_id` for `params` (global variable order). No state of a
    /// failed evaluation survives the call.
    fn run_evaluation(&mut self, eval_id: u64, params: &ParameterSet) -> Result<EvalOutcome>;

    fn k_total(&self) -> u32;
}

/// Which transport a federation uses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp(TcpConfig),
}

/// Recompute the central node's final de-noising from a transcript of one
/// complete evaluation.
pub fn replay(transcript: &Transcript) -> Result<f64> {
    let first = transcript.entries.first().ok_or_else(|| Error::Replay("empty transcript".into()))?;
    let eval_id = first.message.eval_id;
    let mut by_id = BTreeMap::new();
    let mut k_total = 0u32;
    for e in &transcript.entries {
        let m = &e.message;
        if m.eval_id != eval_id {
            return Err(Error::Replay(format!("transcript mixes evaluations {eval_id} and {}", m.eval_id)));
        }
        for id in [m.sender, m.receiver] {
            if let NodeId::Data(k) = id {
                k_total = k_total.max(k);
            }
        }
        if by_id.insert(m.msg_id, m).is_some() {
            return Err(Error::Replay(format!("duplicate message {}", m.msg_id)));
        }
    }
    if k_total < 2 {
        return Err(Error::Replay("transcript does not describe a vertical evaluation".into()));
    }
    let expected = vertical_message_count(k_total);
    if by_id.len() != expected || by_id.keys().copied().ne(0..expected as u64) {
        return Err(Error::Replay(format!("expected messages 0..{expected}, found {} (truncated transcript)", by_id.len())));
    }
    let k = k_total as usize;
    let mut sigmas: Vec<Option<DMatrix<f64>>> = vec![None; k];
    let mut masks: Vec<Option<DMatrix<f64>>> = vec![None; k];
    let mut bundles: Vec<Option<(DMatrix<f64>, DMatrix<f64>)>> = vec![None; k];
    let mut ll_star = None;
    for m in by_id.values() {
        match (&m.payload, m.sender, m.receiver) {
            (Payload::MarginalParams { sigma, p_last, .. }, NodeId::Central, NodeId::Data(1)) => {
                sigmas[0] = Some(sigma.clone());
                masks[k - 1] = Some(p_last.clone());
            }
            (Payload::CentralForward { sigma, p, .. }, NodeId::Central, NodeId::Data(j)) if (2..=k_total).contains(&j) => {
                let j = j as usize;
                sigmas[j - 1] = Some(sigma.clone());
                masks[j - 2] = Some(p.clone());
            }
            (Payload::BundleUp { a1, a2 }, NodeId::Data(j), NodeId::Central) => {
                bundles[j as usize - 1] = Some((a1.clone(), a2.clone()));
            }
            (Payload::CleanRequest { ll_star: v }, NodeId::Data(1), NodeId::Central) => ll_star = Some(*v),
            _ => {}
        }
    }
    let missing = |what: &str| Error::Replay(format!("transcript lacks {what}"));
    let sigmas = sigmas.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| missing("a covariance block"))?;
    let masks = masks.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| missing("a mean mask"))?;
    let bundles = bundles.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| missing("a bundle"))?;
    let ll_star = ll_star.ok_or_else(|| missing("the clean request"))?;
    cn_final(ll_star, &bundles, &masks, &sigmas).map_err(|e| Error::Replay(e.to_string()))
}
