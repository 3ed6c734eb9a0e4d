use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::mvn::{log_likelihood, DataPartition, ParameterSet};
use crate::primitives::secure_sum;
use crate::protocol::message::{NodeId, Payload, ProtocolMessage, Transcript};
use crate::protocol::noise::derive_seed;

/// Outcome of a horizontal evaluation.
#[derive(Debug, Clone)]
pub struct HorizontalOutcome {
    pub ll: f64,
    /// Initiator's mask, kept for collusion demonstrations.
    pub mask: f64,
    pub transcript: Transcript,
}

/// Horizontal evaluation: every node holds all variables for its own rows,
/// computes its plain partial log-likelihood, and the partials are combined on
/// a summation ring started and closed by node 1.
pub fn horizontal_round(
    params: &ParameterSet,
    nodes: &[DataPartition],
    mask_scale: f64,
    seed: u64,
    eval_id: u64,
) -> Result<HorizontalOutcome> {
    if nodes.len() < 2 {
        return Err(Error::Layout(format!("horizontal evaluation needs at least 2 data nodes, got {}", nodes.len())));
    }
    let cols = &nodes[0].col_ids;
    if nodes.iter().any(|d| &d.col_ids != cols) {
        return Err(Error::Layout("horizontal nodes must share the same column set".into()));
    }
    let local = params.select(cols)?;
    let partials = nodes.iter().map(|d| log_likelihood(&local, &DataPartition::dense(d.rows.clone())?)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[seed, u64::MAX, 1, eval_id]));
    let sum = secure_sum(&partials, mask_scale, &mut rng)?;

    let k = nodes.len() as u32;
    let mut transcript = Transcript::default();
    let mut tick = 0u64;
    let mut push = |msg_id: u64, round: u32, sender: NodeId, receiver: NodeId, payload: Payload| {
        transcript.push(tick, ProtocolMessage { msg_id, eval_id, round, sender, receiver, payload });
        tick += 1;
    };
    for j in 1..=k {
        push(
            (j - 1) as u64,
            0,
            NodeId::Central,
            NodeId::Data(j),
            Payload::HorizontalParams { mean: local.mean.iter().copied().collect(), cov: local.cov.clone() },
        );
    }
    for (i, &masked) in sum.transmitted.iter().enumerate() {
        let from = i as u32 + 1;
        let to = if from == k { 1 } else { from + 1 };
        push(k as u64 + i as u64, from, NodeId::Data(from), NodeId::Data(to), Payload::SumForward { masked });
    }
    push(2 * k as u64, k + 1, NodeId::Data(1), NodeId::Central, Payload::SumResult { total: sum.total });
    Ok(HorizontalOutcome { ll: sum.total, mask: sum.mask, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvn::LN_2PI;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn one_zero_row_per_node() {
        let params = ParameterSet::unnamed(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let nodes: Vec<_> = (0..3).map(|i| DataPartition::new(DMatrix::zeros(1, 1), vec![0], vec![i]).unwrap()).collect();
        let out = horizontal_round(&params, &nodes, 1e12, 1, 0).unwrap();
        assert!((out.ll + 1.5 * LN_2PI).abs() < 1e-6);
        assert_eq!(out.transcript.len(), 3 + 3 + 1);
    }

    #[test]
    fn single_node_is_rejected() {
        let params = ParameterSet::unnamed(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let nodes = vec![DataPartition::dense(DMatrix::zeros(2, 1)).unwrap()];
        assert!(matches!(horizontal_round(&params, &nodes, 1e12, 0, 0), Err(Error::Layout(_))));
    }
}
