//! Typed protocol messages, their canonical binary encoding, and the JSON
//! transcript format.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! msg_id u64 | eval_id u64 | round u32 | sender u32 | receiver u32 | tag u8 | payload
//! ```
//!
//! Node ids encode the central node as 0 and data node `k` as `k`. Matrices
//! are `rows u32 | cols u32 | rows*cols f64` in row-major order.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Protocol participant. Data nodes are numbered by chain position, from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Central,
    Data(u32),
}

impl NodeId {
    pub fn wire(self) -> u32 {
        match self {
            NodeId::Central => 0,
            NodeId::Data(k) => k,
        }
    }

    pub fn from_wire(v: u32) -> Self {
        if v == 0 {
            NodeId::Central
        } else {
            NodeId::Data(v)
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Central => write!(f, "CN"),
            NodeId::Data(k) => write!(f, "DN{k}"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "CN" {
            return Ok(NodeId::Central);
        }
        s.strip_prefix("DN")
            .and_then(|k| k.parse::<u32>().ok())
            .filter(|&k| k > 0)
            .map(NodeId::Data)
            .ok_or_else(|| Error::Codec(format!("bad node id {s:?}")))
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One payload variant per arrow of the vertical protocol, plus the
/// horizontal secure-summation ring and an abort notice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// CN → DN1: `Σ_{x1x1}`, `μ̃_{x1}`, `P_K`.
    MarginalParams {
        #[serde(with = "mat_serde")]
        sigma: DMatrix<f64>,
        #[serde(with = "mat_serde")]
        mu_tilde: DMatrix<f64>,
        #[serde(with = "mat_serde")]
        p_last: DMatrix<f64>,
    },
    /// DN_k → CN: `A¹_k`, `A²_k`.
    BundleUp {
        #[serde(with = "mat_serde")]
        a1: DMatrix<f64>,
        #[serde(with = "mat_serde")]
        a2: DMatrix<f64>,
    },
    /// DN_k → CN (1 < k < K): re-noised tail conditional mean `μ̃*`.
    CondMeanUp {
        #[serde(with = "mat_serde")]
        mu_star: DMatrix<f64>,
    },
    /// DN_k → DN_{k+1}: running `LL̃`, `R_k`, `Q_k`, `M_k`.
    ChainForward {
        ll_tilde: f64,
        #[serde(with = "mat_serde")]
        r: DMatrix<f64>,
        #[serde(with = "mat_serde")]
        q: DMatrix<f64>,
        #[serde(with = "mat_serde::option")]
        m: Option<DMatrix<f64>>,
    },
    /// CN → DN_k: `Σ_{kk|k⁻}`, `B_{k−1}`, `C_{k−1}`, `P_{k−1}`.
    CentralForward {
        #[serde(with = "mat_serde")]
        sigma: DMatrix<f64>,
        #[serde(with = "mat_serde")]
        b: DMatrix<f64>,
        #[serde(with = "mat_serde")]
        c: DMatrix<f64>,
        #[serde(with = "mat_serde")]
        p: DMatrix<f64>,
    },
    /// DN_K → DN1: total `LL̃` and `Q_K`.
    FinalToFirst {
        ll_tilde: f64,
        #[serde(with = "mat_serde")]
        q: DMatrix<f64>,
    },
    /// DN1 → CN: `LL̃*` ready for final de-noising.
    CleanRequest { ll_star: f64 },
    /// Any node → CN: the evaluation cannot complete.
    Abort { reason: String },
    /// CN → DN_k (horizontal): the full parameter set.
    HorizontalParams {
        mean: Vec<f64>,
        #[serde(with = "mat_serde")]
        cov: DMatrix<f64>,
    },
    /// Ring hop of a secure sum: masked fixed-point accumulator.
    SumForward {
        #[serde(with = "i128_string")]
        masked: i128,
    },
    /// Initiator → CN: unmasked total.
    SumResult { total: f64 },
}

/// Payload discriminant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    MarginalParams,
    BundleUp,
    CondMeanUp,
    ChainForward,
    CentralForward,
    FinalToFirst,
    CleanRequest,
    Abort,
    HorizontalParams,
    SumForward,
    SumResult,
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::MarginalParams { .. } => PayloadKind::MarginalParams,
            Payload::BundleUp { .. } => PayloadKind::BundleUp,
            Payload::CondMeanUp { .. } => PayloadKind::CondMeanUp,
            Payload::ChainForward { .. } => PayloadKind::ChainForward,
            Payload::CentralForward { .. } => PayloadKind::CentralForward,
            Payload::FinalToFirst { .. } => PayloadKind::FinalToFirst,
            Payload::CleanRequest { .. } => PayloadKind::CleanRequest,
            Payload::Abort { .. } => PayloadKind::Abort,
            Payload::HorizontalParams { .. } => PayloadKind::HorizontalParams,
            Payload::SumForward { .. } => PayloadKind::SumForward,
            Payload::SumResult { .. } => PayloadKind::SumResult,
        }
    }

    fn tag(&self) -> u8 {
        self.kind() as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub msg_id: u64,
    pub eval_id: u64,
    pub round: u32,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: Payload,
}

/// Position of a vertical-protocol message in the fixed arrow order.
///
/// With `K` data nodes an evaluation carries exactly `4K − 1` messages:
/// three in round 1, four per interior round, two in round `K`, then the
/// return to node 1 and the clean request.
pub fn vertical_msg_id(k_total: u32, round: u32, kind: PayloadKind) -> u64 {
    let k_total = k_total as u64;
    let round = round as u64;
    match (round, kind) {
        (1, PayloadKind::MarginalParams) => 0,
        (1, PayloadKind::BundleUp) => 1,
        (1, PayloadKind::ChainForward) => 2,
        (_, PayloadKind::FinalToFirst) => 4 * k_total - 3,
        (_, PayloadKind::CleanRequest) => 4 * k_total - 2,
        (r, kind) => {
            let base = 3 + 4 * (r.saturating_sub(2));
            base + match kind {
                PayloadKind::CentralForward => 0,
                PayloadKind::BundleUp => 1,
                PayloadKind::CondMeanUp => 2,
                PayloadKind::ChainForward => 3,
                // Aborts sort after everything a round could legitimately send.
                _ => 4 * k_total,
            }
        }
    }
}

/// Number of messages in one complete vertical evaluation.
pub fn vertical_message_count(k_total: u32) -> usize {
    4 * k_total as usize - 1
}

// ---------------------------------------------------------------------------
// binary encoding

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i128(&mut self, v: i128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn mat(&mut self, m: &DMatrix<f64>) {
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Codec(format!("truncated message: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i128(&mut self) -> Result<i128> {
        Ok(i128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn mat(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Codec(format!("matrix {rows}x{cols} exceeds message size")))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::Codec(e.to_string()))
    }
}

impl ProtocolMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(64));
        w.u64(self.msg_id);
        w.u64(self.eval_id);
        w.u32(self.round);
        w.u32(self.sender.wire());
        w.u32(self.receiver.wire());
        w.u8(self.payload.tag());
        match &self.payload {
            Payload::MarginalParams { sigma, mu_tilde, p_last } => {
                w.mat(sigma);
                w.mat(mu_tilde);
                w.mat(p_last);
            }
            Payload::BundleUp { a1, a2 } => {
                w.mat(a1);
                w.mat(a2);
            }
            Payload::CondMeanUp { mu_star } => w.mat(mu_star),
            Payload::ChainForward { ll_tilde, r, q, m } => {
                w.f64(*ll_tilde);
                w.mat(r);
                w.mat(q);
                match m {
                    Some(m) => {
                        w.u8(1);
                        w.mat(m);
                    }
                    None => w.u8(0),
                }
            }
            Payload::CentralForward { sigma, b, c, p } => {
                w.mat(sigma);
                w.mat(b);
                w.mat(c);
                w.mat(p);
            }
            Payload::FinalToFirst { ll_tilde, q } => {
                w.f64(*ll_tilde);
                w.mat(q);
            }
            Payload::CleanRequest { ll_star } => w.f64(*ll_star),
            Payload::Abort { reason } => w.str(reason),
            Payload::HorizontalParams { mean, cov } => {
                w.u32(mean.len() as u32);
                for v in mean {
                    w.f64(*v);
                }
                w.mat(cov);
            }
            Payload::SumForward { masked } => w.i128(*masked),
            Payload::SumResult { total } => w.f64(*total),
        }
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let msg_id = r.u64()?;
        let eval_id = r.u64()?;
        let round = r.u32()?;
        let sender = NodeId::from_wire(r.u32()?);
        let receiver = NodeId::from_wire(r.u32()?);
        let tag = r.u8()?;
        let payload = match tag {
            0 => Payload::MarginalParams { sigma: r.mat()?, mu_tilde: r.mat()?, p_last: r.mat()? },
            1 => Payload::BundleUp { a1: r.mat()?, a2: r.mat()? },
            2 => Payload::CondMeanUp { mu_star: r.mat()? },
            3 => {
                let ll_tilde = r.f64()?;
                let rm = r.mat()?;
                let q = r.mat()?;
                let m = match r.u8()? {
                    0 => None,
                    1 => Some(r.mat()?),
                    f => return Err(Error::Codec(format!("bad option flag {f}"))),
                };
                Payload::ChainForward { ll_tilde, r: rm, q, m }
            }
            4 => Payload::CentralForward { sigma: r.mat()?, b: r.mat()?, c: r.mat()?, p: r.mat()? },
            5 => Payload::FinalToFirst { ll_tilde: r.f64()?, q: r.mat()? },
            6 => Payload::CleanRequest { ll_star: r.f64()? },
            7 => Payload::Abort { reason: r.str()? },
            8 => {
                let len = r.u32()? as usize;
                if len.saturating_mul(8) > buf.len() {
                    return Err(Error::Codec("mean vector exceeds message size".into()));
                }
                let mean = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Payload::HorizontalParams { mean, cov: r.mat()? }
            }
            9 => Payload::SumForward { masked: r.i128()? },
            10 => Payload::SumResult { total: r.f64()? },
            t => return Err(Error::Codec(format!("unknown payload tag {t}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Codec(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { msg_id, eval_id, round, sender, receiver, payload })
    }
}

// ---------------------------------------------------------------------------
// transcripts

/// A recorded message with the time it was sent (microseconds since the
/// session started; a logical counter on the in-process transport).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub timestamp_us: u64,
    pub message: ProtocolMessage,
}

/// Ordered log of every message of one or more evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn push(&mut self, timestamp_us: u64, message: ProtocolMessage) {
        self.entries.push(TranscriptEntry { timestamp_us, message });
    }

    pub fn messages(&self) -> impl Iterator<Item = &ProtocolMessage> {
        self.entries.iter().map(|e| &e.message)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical order: by evaluation, then message position.
    pub fn sort(&mut self) {
        self.entries.sort_by_key(|e| (e.message.eval_id, e.message.msg_id));
    }

    /// Entries belonging to one evaluation.
    pub fn for_eval(&self, eval_id: u64) -> Transcript {
        Transcript {
            entries: self.entries.iter().filter(|e| e.message.eval_id == eval_id).cloned().collect(),
        }
    }

    pub fn extend(&mut self, other: Transcript) {
        self.entries.extend(other.entries);
    }

    /// Same messages in the same order, ignoring timestamps.
    pub fn same_messages(&self, other: &Transcript) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.message == b.message)
    }

    /// Newline-delimited JSON, one entry per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { entries })
    }
}

/// Row-major `{rows, cols, data}` JSON form for matrices.
pub(crate) mod mat_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wire {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    fn to_wire(m: &DMatrix<f64>) -> Wire {
        Wire { rows: m.nrows(), cols: m.ncols(), data: m.transpose().as_slice().to_vec() }
    }

    fn from_wire<E: serde::de::Error>(w: Wire) -> Result<DMatrix<f64>, E> {
        if w.rows * w.cols != w.data.len() {
            return Err(E::custom(format!("{}x{} matrix with {} entries", w.rows, w.cols, w.data.len())));
        }
        Ok(DMatrix::from_row_slice(w.rows, w.cols, &w.data))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_wire(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        from_wire(Wire::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
            m.as_ref().map(to_wire).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
            Option::<Wire>::deserialize(d)?.map(from_wire).transpose()
        }
    }
}

mod i128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &i128, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<i128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn sample_messages() -> Vec<ProtocolMessage> {
        let m = dmatrix![1.5, -2.25; 3.0, 1e-300];
        let payloads = vec![
            Payload::MarginalParams { sigma: m.clone(), mu_tilde: m.clone(), p_last: m.clone() },
            Payload::BundleUp { a1: m.clone(), a2: m.transpose() },
            Payload::CondMeanUp { mu_star: m.clone() },
            Payload::ChainForward { ll_tilde: -12.5, r: m.clone(), q: m.clone(), m: None },
            Payload::ChainForward { ll_tilde: 0.1 + 0.2, r: m.clone(), q: m.clone(), m: Some(m.clone()) },
            Payload::CentralForward { sigma: m.clone(), b: m.clone(), c: m.clone(), p: m.clone() },
            Payload::FinalToFirst { ll_tilde: 1e300, q: m.clone() },
            Payload::CleanRequest { ll_star: -0.0 },
            Payload::Abort { reason: "node crashed".into() },
            Payload::HorizontalParams { mean: vec![1.0, 2.0], cov: m.clone() },
            Payload::SumForward { masked: -(1i128 << 100) + 7 },
            Payload::SumResult { total: std::f64::consts::PI },
        ];
        payloads
            .into_iter()
            .enumerate()
            .map(|(i, payload)| ProtocolMessage {
                msg_id: i as u64,
                eval_id: 42,
                round: 2,
                sender: NodeId::Data(1),
                receiver: NodeId::Central,
                payload,
            })
            .collect()
    }

    #[test]
    fn binary_and_json_round_trip_every_variant() {
        for msg in sample_messages() {
            let bytes = msg.encode();
            assert_eq!(ProtocolMessage::decode(&bytes).unwrap(), msg);
            let json = serde_json::to_string(&msg).unwrap();
            assert_eq!(serde_json::from_str::<ProtocolMessage>(&json).unwrap(), msg);
        }
    }

    #[test]
    fn json_field_order_is_fixed() {
        let msg = &sample_messages()[7];
        let json = serde_json::to_string(msg).unwrap();
        assert_eq!(
            json,
            r#"{"msg_id":7,"eval_id":42,"round":2,"sender":"DN1","receiver":"CN","payload":{"kind":"clean_request","ll_star":-0.0}}"#
        );
    }

    #[test]
    fn decode_rejects_garbage() {
        let bytes = sample_messages()[0].encode();
        assert!(ProtocolMessage::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ProtocolMessage::decode(&extra).is_err());
        let mut bad_tag = bytes;
        bad_tag[28] = 200;
        assert!(ProtocolMessage::decode(&bad_tag).is_err());
    }

    #[test]
    fn message_positions_are_dense() {
        for k in 2..7u32 {
            let mut ids = vec![
                vertical_msg_id(k, 1, PayloadKind::MarginalParams),
                vertical_msg_id(k, 1, PayloadKind::BundleUp),
                vertical_msg_id(k, 1, PayloadKind::ChainForward),
            ];
            for r in 2..=k {
                ids.push(vertical_msg_id(k, r, PayloadKind::CentralForward));
                ids.push(vertical_msg_id(k, r, PayloadKind::BundleUp));
                if r != k {
                    ids.push(vertical_msg_id(k, r, PayloadKind::CondMeanUp));
                    ids.push(vertical_msg_id(k, r, PayloadKind::ChainForward));
                }
            }
            ids.push(vertical_msg_id(k, k, PayloadKind::FinalToFirst));
            ids.push(vertical_msg_id(k, k, PayloadKind::CleanRequest));
            let expected: Vec<u64> = (0..vertical_message_count(k) as u64).collect();
            assert_eq!(ids, expected);
        }
    }

    proptest! {
        #[test]
        fn chain_forward_round_trips_bit_exactly(
            ll in proptest::num::f64::ANY,
            vals in proptest::collection::vec(proptest::num::f64::NORMAL, 6),
            with_m in any::<bool>(),
        ) {
            let r = DMatrix::from_row_slice(3, 2, &vals);
            let msg = ProtocolMessage {
                msg_id: 5, eval_id: 9, round: 2,
                sender: NodeId::Data(2), receiver: NodeId::Data(3),
                payload: Payload::ChainForward { ll_tilde: ll, r: r.clone(), q: r.transpose(), m: with_m.then(|| r.clone()) },
            };
            let back = ProtocolMessage::decode(&msg.encode()).unwrap();
            prop_assert_eq!(back.encode(), msg.encode());
            let json = serde_json::to_string(&ProtocolMessage { payload: Payload::CondMeanUp { mu_star: r.clone() }, ..msg.clone() }).unwrap();
            let parsed: ProtocolMessage = serde_json::from_str(&json).unwrap();
            match parsed.payload {
                Payload::CondMeanUp { mu_star } => {
                    for (a, b) in mu_star.iter().zip(r.iter()) {
                        prop_assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
                _ => prop_assert!(false),
            }
        }
    }
}
