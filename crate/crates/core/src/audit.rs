//! Offline leakage audit of recorded transcripts.
//!
//! The audit has oracle access to the pooled data. It checks who received
//! which kind of object, scans every transmitted matrix for raw data columns,
//! and measures how far each transmitted value is from the protected truth
//! it masks, taking the receiver's own knowledge into account.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvn::{cholesky, ParameterSet};
use crate::oracle::{chain_blocks, nonsecure_pass};
use crate::primitives::from_fixed;
use crate::protocol::steps::trace_coupling;
use crate::protocol::{NodeId, Payload, ProtocolMessage, Transcript};

/// Masking margins at or below `MARGIN_FRACTION · S` count as exposure.
pub const MARGIN_FRACTION: f64 = 0.01;
/// Margins this small are treated as zero regardless of `S`.
const MARGIN_FLOOR: f64 = 1e-6;

/// Objects a node can receive, at the granularity of individual payload fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Received {
    SigmaBlock,
    MuTilde,
    PLast,
    LlTilde,
    QLast,
    B,
    C,
    P,
    R,
    Q,
    M,
    A1,
    A2,
    MuStar,
    LlStar,
    Other,
}

fn received_fields(msg: &ProtocolMessage) -> Vec<Received> {
    use Received::*;
    match &msg.payload {
        Payload::MarginalParams { .. } => vec![SigmaBlock, MuTilde, PLast],
        Payload::BundleUp { .. } => vec![A1, A2],
        Payload::CondMeanUp { .. } => vec![MuStar],
        Payload::ChainForward { m, .. } => {
            let mut v = vec![LlTilde, R, Q];
            if m.is_some() {
                v.push(M);
            }
            v
        }
        Payload::CentralForward { .. } => vec![SigmaBlock, B, C, P],
        Payload::FinalToFirst { .. } => vec![LlTilde, QLast],
        Payload::CleanRequest { .. } => vec![LlStar],
        _ => vec![Other],
    }
}

/// Objects each participant is expected to receive in a `K`-node evaluation.
pub fn allowed_objects(node: NodeId, k_total: u32) -> BTreeSet<Received> {
    use Received::*;
    match node {
        NodeId::Central => {
            let mut s: BTreeSet<_> = [A1, A2, LlStar].into();
            if k_total >= 3 {
                s.insert(MuStar);
            }
            s
        }
        NodeId::Data(1) => [SigmaBlock, MuTilde, PLast, LlTilde, QLast].into(),
        NodeId::Data(k) => {
            let mut s: BTreeSet<_> = [SigmaBlock, B, C, P, LlTilde, R, Q].into();
            if k >= 3 {
                s.insert(M);
            }
            s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectedClass {
    /// Conditional means of data blocks.
    ConditionalMean,
    /// Partial log-likelihood sums.
    PartialLikelihood,
    /// Unmasked adjustment bundles `S⁻¹(X − μ)ᵀ`.
    AdjustmentBundle,
    /// The `R` mask recovered by differencing `A¹ − A²`.
    Differencing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReceipts {
    pub node: NodeId,
    pub observed: BTreeSet<Received>,
    pub allowed: BTreeSet<Received>,
}

impl NodeReceipts {
    pub fn conforms(&self) -> bool {
        self.observed == self.allowed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub msg_id: u64,
    pub field: String,
    pub reason: String,
}

/// Distance between what a receiver can reconstruct and the protected truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub class: ProtectedClass,
    pub receiver: NodeId,
    pub msg_id: u64,
    /// Root-mean-square distance (absolute distance for scalars).
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub eval_id: u64,
    pub noise_scale: f64,
    pub threshold: f64,
    pub nodes: Vec<NodeReceipts>,
    pub violations: Vec<Violation>,
    pub margins: Vec<Margin>,
    /// Classes with at least one margin at or below the threshold.
    pub exposed: BTreeSet<ProtectedClass>,
    /// Channels noted but not treated as violations.
    pub notes: Vec<String>,
}

impl LeakageReport {
    /// Smallest margin per protected class.
    pub fn min_margins(&self) -> BTreeMap<ProtectedClass, f64> {
        let mut out = BTreeMap::new();
        for m in &self.margins {
            let e = out.entry(m.class).or_insert(f64::INFINITY);
            *e = f64::min(*e, m.value);
        }
        out
    }

    /// Smallest margin over all classes.
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.value).fold(f64::INFINITY, f64::min)
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.nodes.iter().all(NodeReceipts::conforms)
    }
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "evaluation {}  noise scale {:e}  threshold {:e}", self.eval_id, self.noise_scale, self.threshold)?;
        writeln!(f, "{:<6} {:<8} received", "node", "status")?;
        for n in &self.nodes {
            let kinds: Vec<String> = n.observed.iter().map(|k| format!("{k:?}")).collect();
            writeln!(f, "{:<6} {:<8} {}", n.node.to_string(), if n.conforms() { "ok" } else { "MISMATCH" }, kinds.join(", "))?;
        }
        writeln!(f, "{:<20} {:>14}", "protected class", "min margin")?;
        for (class, m) in self.min_margins() {
            let flag = if self.exposed.contains(&class) { "  EXPOSED" } else { "" };
            writeln!(f, "{:<20} {:>14.6e}{flag}", format!("{class:?}"), m)?;
        }
        if self.violations.is_empty() {
            writeln!(f, "no violations")?;
        }
        for v in &self.violations {
            writeln!(f, "violation in message {} ({}): {}", v.msg_id, v.field, v.reason)?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

/// Oracle-side inputs for one vertical evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AuditContext<'a> {
    pub params: &'a ParameterSet,
    /// Pooled data of the evaluated rows, columns in global variable order.
    pub pooled: &'a DMatrix<f64>,
    /// Global column indices of each chain node.
    pub chain_cols: &'a [Vec<usize>],
    pub noise_scale: f64,
}

fn rms(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Audit(format!("comparing {}x{} with {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols())));
    }
    if a.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(((a - b).norm_squared() / a.len() as f64).sqrt())
}

fn payload_matrices(p: &Payload) -> Vec<(&'static str, &DMatrix<f64>)> {
    match p {
        Payload::MarginalParams { sigma, mu_tilde, p_last } => vec![("sigma", sigma), ("mu_tilde", mu_tilde), ("p_last", p_last)],
        Payload::BundleUp { a1, a2 } => vec![("a1", a1), ("a2", a2)],
        Payload::CondMeanUp { mu_star } => vec![("mu_star", mu_star)],
        Payload::ChainForward { r, q, m, .. } => {
            let mut v = vec![("r", r), ("q", q)];
            if let Some(m) = m {
                v.push(("m", m));
            }
            v
        }
        Payload::CentralForward { sigma, b, c, p } => vec![("sigma", sigma), ("b", b), ("c", c), ("p", p)],
        Payload::FinalToFirst { q, .. } => vec![("q", q)],
        Payload::HorizontalParams { cov, .. } => vec![("cov", cov)],
        _ => vec![],
    }
}

/// Audit one complete vertical evaluation.
pub fn audit_transcript(transcript: &Transcript, ctx: &AuditContext<'_>) -> Result<LeakageReport> {
    let msgs: Vec<&ProtocolMessage> = transcript.messages().collect();
    let first = msgs.first().ok_or_else(|| Error::Audit("empty transcript".into()))?;
    let eval_id = first.eval_id;
    if msgs.iter().any(|m| m.eval_id != eval_id) {
        return Err(Error::Audit("transcript mixes evaluations".into()));
    }
    let k_total = ctx.chain_cols.len() as u32;
    let n = ctx.pooled.nrows();
    if ctx.pooled.ncols() != ctx.params.dim() || k_total < 2 {
        return Err(Error::Audit(format!("{}x{} pooled data for {} variables and {k_total} nodes", n, ctx.pooled.ncols(), ctx.params.dim())));
    }
    let blocks = chain_blocks(ctx.pooled, ctx.chain_cols);
    let truth = nonsecure_pass(ctx.params, ctx.chain_cols, &blocks).map_err(|e| Error::Audit(e.to_string()))?;
    let threshold = MARGIN_FRACTION * ctx.noise_scale;
    let mut violations = Vec::new();

    // (a) received objects per participant
    let mut observed: BTreeMap<NodeId, BTreeSet<Received>> = BTreeMap::new();
    for m in &msgs {
        let fields = received_fields(m);
        let allowed = allowed_objects(m.receiver, k_total);
        for f in &fields {
            if !allowed.contains(f) {
                violations.push(Violation { msg_id: m.msg_id, field: format!("{f:?}"), reason: format!("{} may not receive this object", m.receiver) });
            }
        }
        observed.entry(m.receiver).or_default().extend(fields);
    }
    let mut participants: Vec<NodeId> = vec![NodeId::Central];
    participants.extend((1..=k_total).map(NodeId::Data));
    let nodes: Vec<NodeReceipts> = participants
        .into_iter()
        .map(|node| NodeReceipts { node, observed: observed.remove(&node).unwrap_or_default(), allowed: allowed_objects(node, k_total) })
        .collect();

    // raw data scan: any transmitted n-long column equal to a data column
    for m in &msgs {
        for (field, mat) in payload_matrices(&m.payload) {
            let cols: Vec<DMatrix<f64>> = if mat.nrows() == n {
                mat.column_iter().map(|c| DMatrix::from_iterator(n, 1, c.iter().copied())).collect()
            } else if mat.ncols() == n {
                mat.row_iter().map(|r| DMatrix::from_iterator(n, 1, r.iter().copied())).collect()
            } else {
                continue;
            };
            for c in &cols {
                for j in 0..ctx.pooled.ncols() {
                    let data_col = DMatrix::from_iterator(n, 1, ctx.pooled.column(j).iter().copied());
                    let scale = 1e-9 * (1.0 + data_col.amax());
                    if rms(c, &data_col)? <= scale {
                        violations.push(Violation {
                            msg_id: m.msg_id,
                            field: field.to_string(),
                            reason: format!("carries raw data column {} to {}", ctx.params.var_names[j], m.receiver),
                        });
                    }
                }
            }
        }
    }

    // what each receiver knows; masks keyed by node number
    let mut masks: HashMap<usize, DMatrix<f64>> = HashMap::new();
    let mut sigmas: HashMap<usize, DMatrix<f64>> = HashMap::new();
    let mut chain_in: HashMap<u32, &ProtocolMessage> = HashMap::new();
    for m in &msgs {
        match (&m.payload, m.receiver) {
            (Payload::MarginalParams { sigma, p_last, .. }, _) => {
                masks.insert(k_total as usize, p_last.clone());
                sigmas.insert(1, sigma.clone());
            }
            (Payload::CentralForward { sigma, p, .. }, NodeId::Data(k)) => {
                masks.insert(k as usize - 1, p.clone());
                sigmas.insert(k as usize, sigma.clone());
            }
            (Payload::ChainForward { .. }, NodeId::Data(k)) => {
                chain_in.insert(k, m);
            }
            _ => {}
        }
    }
    let mask = |j: usize| masks.get(&j).ok_or_else(|| Error::Audit(format!("mean mask of DN{j} never transmitted")));
    let mut margins = Vec::new();
    let mut push = |class, receiver, msg_id, value: f64| margins.push(Margin { class, receiver, msg_id, value });

    for m in &msgs {
        match (&m.payload, m.sender, m.receiver) {
            // node 1's masked marginal mean
            (Payload::MarginalParams { mu_tilde, .. }, _, r) => {
                push(ProtectedClass::ConditionalMean, r, m.msg_id, rms(mu_tilde, &truth.cond_means[0])?);
            }
            // node k strips everything it knows from B
            (Payload::CentralForward { b, c, p, .. }, _, NodeId::Data(k)) => {
                let up = chain_in.get(&k).ok_or_else(|| Error::Audit(format!("DN{k} has no chain forward")))?;
                let Payload::ChainForward { r, m: mk, .. } = &up.payload else { unreachable!() };
                let mut recovered = b - (r - p) * c;
                if let Some(mk) = mk {
                    recovered -= mk;
                }
                push(ProtectedClass::ConditionalMean, m.receiver, m.msg_id, rms(&recovered, &truth.tail_means[k as usize - 2])?);
            }
            // central removes the mean masks it generated
            (Payload::CondMeanUp { mu_star }, NodeId::Data(k), r) => {
                let k = k as usize;
                let tail = (k + 1..=k_total as usize).map(mask).collect::<Result<Vec<_>>>()?;
                let p_tail = DMatrix::from_fn(n, mu_star.ncols(), |i, c| {
                    let mut c = c;
                    for t in &tail {
                        if c < t.ncols() {
                            return t[(i, c)];
                        }
                        c -= t.ncols();
                    }
                    f64::NAN
                });
                push(ProtectedClass::ConditionalMean, r, m.msg_id, rms(&(mu_star - p_tail), &truth.tail_means[k - 1])?);
            }
            // running total as seen by the next node, after the removable term
            (Payload::ChainForward { ll_tilde, q, .. }, NodeId::Data(k), r) => {
                let best = ll_tilde + 0.5 * trace_coupling(mask(k as usize)?, q)?;
                push(ProtectedClass::PartialLikelihood, r, m.msg_id, (best - truth.running[k as usize - 1]).abs());
            }
            (Payload::FinalToFirst { ll_tilde, q }, _, r) => {
                let best = ll_tilde + 0.5 * trace_coupling(mask(k_total as usize)?, q)?;
                push(ProtectedClass::PartialLikelihood, r, m.msg_id, (best - truth.total).abs());
            }
            // central: unmask what it can from the bundles
            (Payload::BundleUp { a1, a2 }, NodeId::Data(k), r) => {
                let k = k as usize;
                let sigma = sigmas.get(&k).ok_or_else(|| Error::Audit(format!("no covariance block for DN{k}")))?;
                let chol = cholesky(sigma).map_err(|e| Error::Audit(e.to_string()))?;
                let wp = chol.solve(&mask(k)?.transpose());
                let own_cols = &ctx.chain_cols[k - 1];
                let x = crate::mvn::select_columns(ctx.pooled, own_cols);
                let true_bundle = chol.solve(&(x - &truth.cond_means[k - 1]).transpose());
                let e1 = a1 + &wp;
                let e2 = a2 + &wp;
                let avg = (&e1 + &e2) * 0.5;
                let best = rms(&e1, &true_bundle)?.min(rms(&e2, &true_bundle)?).min(rms(&avg, &true_bundle)?);
                push(ProtectedClass::AdjustmentBundle, r, m.msg_id, best);
                if let Some(up) = chain_in.get(&(k as u32 + 1)) {
                    let Payload::ChainForward { r: true_r, .. } = &up.payload else { unreachable!() };
                    let est = sigma * (a1 - a2) * 0.5;
                    push(ProtectedClass::Differencing, r, m.msg_id, rms(&est, &true_r.transpose())?);
                }
            }
            _ => {}
        }
    }
    let floor = threshold.max(MARGIN_FLOOR);
    let exposed: BTreeSet<ProtectedClass> = margins.iter().filter(|m| m.value <= floor).map(|m| m.class).collect();
    if ctx.noise_scale > 0.0 {
        for mg in margins.iter().filter(|m| m.value <= floor) {
            violations.push(Violation {
                msg_id: mg.msg_id,
                field: format!("{:?}", mg.class),
                reason: format!("{} recovers a protected value to within {:e}", mg.receiver, mg.value),
            });
        }
    }
    let notes = vec![
        "node 1 can estimate its own mean mask from the masked marginal mean and its sample means; not treated as disclosive".into(),
    ];
    Ok(LeakageReport { eval_id, noise_scale: ctx.noise_scale, threshold, nodes, violations, margins, exposed, notes })
}

/// What a colluding coalition learns from a horizontal summation transcript.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollusionOutcome {
    /// Partial log-likelihoods of non-members, keyed by node number.
    pub recovered: BTreeMap<u32, f64>,
    /// The joint total, if some member sees it.
    pub total: Option<f64>,
}

/// Pool the views of `coalition` over a horizontal summation transcript.
/// A non-member's partial is exposed when the coalition sees both the ring
/// value entering and the value leaving that node.
pub fn collusion_demo(transcript: &Transcript, coalition: &[NodeId]) -> CollusionOutcome {
    let members: BTreeSet<NodeId> = coalition.iter().copied().collect();
    let seen: Vec<&ProtocolMessage> = transcript.messages().filter(|m| members.contains(&m.sender) || members.contains(&m.receiver)).collect();
    let mut into: BTreeMap<u32, i128> = BTreeMap::new();
    let mut out_of: BTreeMap<u32, i128> = BTreeMap::new();
    let mut total = None;
    for m in &seen {
        match (&m.payload, m.sender, m.receiver) {
            (Payload::SumForward { masked }, NodeId::Data(from), NodeId::Data(to)) => {
                out_of.insert(from, *masked);
                into.insert(to, *masked);
            }
            (Payload::SumResult { total: t }, _, _) => total = Some(*t),
            _ => {}
        }
    }
    let mut recovered = BTreeMap::new();
    for (&node, &out) in &out_of {
        // node 1's incoming ring value is the closed sum, not its input
        if node == 1 || members.contains(&NodeId::Data(node)) {
            continue;
        }
        if let Some(&inp) = into.get(&node) {
            recovered.insert(node, from_fixed(out.wrapping_sub(inp)));
        }
    }
    CollusionOutcome { recovered, total }
}
