//! Loopback/remote TCP transport.
//!
//! Frames are a 4-byte big-endian length followed by the binary message
//! encoding. Every new connection starts with a handshake: one version byte
//! and the connecting node's wire id (`u32`, little-endian).

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvn::ParameterSet;
use crate::protocol::message::vertical_msg_id;
use crate::protocol::{CentralNode, NodeId, NodeLogic, Payload, PayloadKind, ProtocolMessage, Transcript, TranscriptEntry};
use crate::transport::{EvalOutcome, VerticalTransport};

pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcpConfig {
    pub timeout_ms: u64,
    pub max_frame: usize,
}

impl Default for TcpConfig {
    fn default() -> Self {
        Self { timeout_ms: 30_000, max_frame: 256 << 20 }
    }
}

impl TcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 || self.max_frame < 64 {
            return Err(Error::Config(format!("invalid tcp settings {self:?}")));
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Read one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read, max_frame: usize) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max_frame {
        return Err(Error::Codec(format!("frame of {len} bytes exceeds limit {max_frame}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn send_handshake(stream: &mut TcpStream, me: NodeId) -> io::Result<()> {
    let mut hello = [0u8; 5];
    hello[0] = PROTOCOL_VERSION;
    hello[1..].copy_from_slice(&me.wire().to_le_bytes());
    stream.write_all(&hello)
}

fn read_handshake(stream: &mut TcpStream) -> Result<NodeId> {
    let mut hello = [0u8; 5];
    stream.read_exact(&mut hello)?;
    if hello[0] != PROTOCOL_VERSION {
        return Err(Error::Codec(format!("peer speaks protocol version {}, expected {PROTOCOL_VERSION}", hello[0])));
    }
    Ok(NodeId::from_wire(u32::from_le_bytes(hello[1..].try_into().unwrap())))
}

enum Inbound {
    Msg(ProtocolMessage),
    Fault(String),
    Shutdown,
}

/// Shared message log with a common clock.
#[derive(Clone)]
struct Tap {
    start: Instant,
    log: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl Tap {
    fn new() -> Self {
        Self { start: Instant::now(), log: Arc::new(Mutex::new(Vec::new())) }
    }

    fn record(&self, msg: &ProtocolMessage) {
        let timestamp_us = self.start.elapsed().as_micros() as u64;
        self.log.lock().expect("tap lock").push(TranscriptEntry { timestamp_us, message: msg.clone() });
    }

    fn drain(&self, eval_id: u64) -> Transcript {
        let mut log = self.log.lock().expect("tap lock");
        let (mine, rest): (Vec<_>, Vec<_>) = log.drain(..).partition(|e| e.message.eval_id == eval_id);
        *log = rest;
        Transcript { entries: mine }
    }
}

/// Cached outbound connections of one node.
struct Outbox {
    me: NodeId,
    book: HashMap<NodeId, SocketAddr>,
    conns: HashMap<NodeId, TcpStream>,
    tap: Option<Tap>,
    config: TcpConfig,
}

impl Outbox {
    fn connect(&self, to: NodeId) -> Result<TcpStream> {
        let addr = self.book.get(&to).ok_or_else(|| Error::Config(format!("{} has no address for {to}", self.me)))?;
        let deadline = Instant::now() + self.config.timeout();
        loop {
            match TcpStream::connect_timeout(addr, self.config.timeout()) {
                Ok(mut s) => {
                    s.set_nodelay(true)?;
                    send_handshake(&mut s, self.me)?;
                    return Ok(s);
                }
                Err(e) if Instant::now() < deadline && e.kind() == io::ErrorKind::ConnectionRefused => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(_) => {
                    return Err(Error::TransportTimeout {
                        timeout_ms: self.config.timeout_ms,
                        context: format!("{} connecting to {to} at {addr}", self.me),
                    })
                }
            }
        }
    }

    fn send(&mut self, msg: &ProtocolMessage) -> Result<()> {
        if let Some(tap) = &self.tap {
            tap.record(msg);
        }
        let bytes = msg.encode();
        if bytes.len() > self.config.max_frame {
            return Err(Error::Codec(format!("message of {} bytes exceeds frame limit", bytes.len())));
        }
        if !self.conns.contains_key(&msg.receiver) {
            let s = self.connect(msg.receiver)?;
            self.conns.insert(msg.receiver, s);
        }
        let stream = self.conns.get_mut(&msg.receiver).expect("inserted above");
        if let Err(e) = write_frame(stream, &bytes) {
            self.conns.remove(&msg.receiver);
            return Err(e.into());
        }
        Ok(())
    }
}

/// Accepts connections and funnels decoded frames into `inbox`.
fn spawn_acceptor(listener: TcpListener, inbox: Sender<Inbound>, stop: Arc<AtomicBool>, max_frame: usize) -> JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut stream) = stream else { continue };
            let inbox = inbox.clone();
            thread::spawn(move || {
                let peer = match read_handshake(&mut stream) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("rejected connection: {e}");
                        return;
                    }
                };
                loop {
                    let item = match read_frame(&mut stream, max_frame) {
                        Ok(Some(buf)) => match ProtocolMessage::decode(&buf) {
                            Ok(m) if m.sender == peer => Inbound::Msg(m),
                            Ok(m) => Inbound::Fault(format!("{peer} sent a message claiming to be from {}", m.sender)),
                            Err(e) => Inbound::Fault(e.to_string()),
                        },
                        Ok(None) => return,
                        Err(e) => Inbound::Fault(format!("connection from {peer}: {e}")),
                    };
                    let fatal = matches!(item, Inbound::Fault(_));
                    if inbox.send(item).is_err() || fatal {
                        return;
                    }
                }
            });
        }
    })
}

fn abort_for(msg: &ProtocolMessage, me: NodeId, k_total: u32, reason: String) -> ProtocolMessage {
    ProtocolMessage {
        msg_id: vertical_msg_id(k_total, msg.round, PayloadKind::Abort),
        eval_id: msg.eval_id,
        round: msg.round,
        sender: me,
        receiver: NodeId::Central,
        payload: Payload::Abort { reason },
    }
}

/// Message loop of a data node: handle each inbound message in arrival order.
fn node_loop<N: NodeLogic>(mut node: N, k_total: u32, inbox: Receiver<Inbound>, mut out: Outbox) {
    while let Ok(item) = inbox.recv() {
        match item {
            Inbound::Msg(msg) => {
                let replies = match node.handle(msg.clone()) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("{} failed on {:?}: {e}", node.id(), msg.payload.kind());
                        vec![abort_for(&msg, node.id(), k_total, e.to_string())]
                    }
                };
                for r in replies {
                    if let Err(e) = out.send(&r) {
                        log::warn!("{} could not deliver to {}: {e}", node.id(), r.receiver);
                        if r.receiver != NodeId::Central {
                            let _ = out.send(&abort_for(&r, node.id(), k_total, e.to_string()));
                        }
                    }
                }
            }
            Inbound::Fault(e) => log::warn!("{}: {e}", node.id()),
            Inbound::Shutdown => break,
        }
    }
}

/// A data node served over TCP on a background thread.
pub struct NodeServer {
    addr: SocketAddr,
    control: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
    acceptor: Option<JoinHandle<()>>,
}

impl NodeServer {
    /// Serve `node` on `listener`; `peers` maps every node it may send to
    /// (the central node and its chain neighbours) to an address.
    pub fn spawn<N: NodeLogic + 'static>(
        node: N,
        k_total: u32,
        listener: TcpListener,
        peers: HashMap<NodeId, SocketAddr>,
        config: TcpConfig,
    ) -> Result<Self> {
        Self::spawn_tapped(node, k_total, listener, peers, config, None)
    }

    fn spawn_tapped<N: NodeLogic + 'static>(
        node: N,
        k_total: u32,
        listener: TcpListener,
        peers: HashMap<NodeId, SocketAddr>,
        config: TcpConfig,
        tap: Option<Tap>,
    ) -> Result<Self> {
        config.validate()?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(listener, tx.clone(), stop.clone(), config.max_frame);
        let out = Outbox { me: node.id(), book: peers, conns: HashMap::new(), tap, config };
        let worker = thread::spawn(move || node_loop(node, k_total, rx, out));
        Ok(Self { addr, control: tx, stop, worker: Some(worker), acceptor: Some(acceptor) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the node stops (it only stops through [`NodeServer::shutdown`]).
    pub fn join(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.control.send(Inbound::Shutdown);
        // wake the acceptor so it notices the stop flag
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }
}

impl Drop for NodeServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Central node driving data nodes over TCP.
pub struct TcpFederation {
    central: CentralNode,
    inbox: Receiver<Inbound>,
    out: Outbox,
    tap: Tap,
    /// Set when the data nodes run elsewhere and only the central view is recorded.
    record_receipts: bool,
    config: TcpConfig,
    servers: Vec<NodeServer>,
    stop: Arc<AtomicBool>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpFederation {
    /// Bind every node to an ephemeral loopback port and run the data nodes
    /// on background threads. The transcript covers every message.
    pub fn spawn_local<N: NodeLogic + 'static>(central: CentralNode, nodes: Vec<N>, config: TcpConfig) -> Result<Self> {
        config.validate()?;
        let k_total = central.k_total();
        if nodes.len() != k_total as usize {
            return Err(Error::Layout(format!("{} data nodes for a chain of {k_total}", nodes.len())));
        }
        let loopback: SocketAddr = "127.0.0.1:0".parse().expect("valid address");
        let central_listener = TcpListener::bind(loopback)?;
        let listeners = (0..nodes.len()).map(|_| TcpListener::bind(loopback)).collect::<io::Result<Vec<_>>>()?;
        let mut book = HashMap::new();
        book.insert(NodeId::Central, central_listener.local_addr()?);
        for (i, l) in listeners.iter().enumerate() {
            book.insert(NodeId::Data(i as u32 + 1), l.local_addr()?);
        }
        let tap = Tap::new();
        let mut servers = Vec::with_capacity(nodes.len());
        for (node, listener) in nodes.into_iter().zip(listeners) {
            servers.push(NodeServer::spawn_tapped(node, k_total, listener, book.clone(), config.clone(), Some(tap.clone()))?);
        }
        Self::with_listener(central, central_listener, book, config, tap, false, servers)
    }

    /// Connect to data nodes running elsewhere. `bind` is where the central
    /// node listens; `endpoints` must list every data node. Only messages the
    /// central node sends or receives are recorded.
    pub fn connect_remote(central: CentralNode, bind: SocketAddr, endpoints: HashMap<NodeId, SocketAddr>, config: TcpConfig) -> Result<Self> {
        config.validate()?;
        for k in 1..=central.k_total() {
            if !endpoints.contains_key(&NodeId::Data(k)) {
                return Err(Error::Config(format!("no endpoint for DN{k}")));
            }
        }
        let listener = TcpListener::bind(bind)?;
        Self::with_listener(central, listener, endpoints, config, Tap::new(), true, Vec::new())
    }

    fn with_listener(
        central: CentralNode,
        listener: TcpListener,
        book: HashMap<NodeId, SocketAddr>,
        config: TcpConfig,
        tap: Tap,
        record_receipts: bool,
        servers: Vec<NodeServer>,
    ) -> Result<Self> {
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(listener, tx, stop.clone(), config.max_frame);
        let out = Outbox { me: NodeId::Central, book, conns: HashMap::new(), tap: Some(tap.clone()), config: config.clone() };
        Ok(Self { central, inbox: rx, out, tap, record_receipts, config, servers, stop, addr, acceptor: Some(acceptor) })
    }

    /// Address the central node listens on.
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn run(&mut self, eval_id: u64, params: &ParameterSet) -> Result<f64> {
        for m in self.central.start(eval_id, params)? {
            self.out.send(&m)?;
        }
        loop {
            if let Some(ll) = self.central.take_result(eval_id) {
                return Ok(ll);
            }
            match self.inbox.recv_timeout(self.config.timeout()) {
                Ok(Inbound::Msg(msg)) => {
                    if msg.eval_id != eval_id {
                        log::warn!("dropping stale message for evaluation {}", msg.eval_id);
                        continue;
                    }
                    if self.record_receipts {
                        self.tap.record(&msg);
                    }
                    for m in self.central.handle(msg)? {
                        self.out.send(&m)?;
                    }
                }
                Ok(Inbound::Fault(e)) => return Err(Error::ProtocolAborted(e)),
                Ok(Inbound::Shutdown) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::ProtocolAborted("central inbox closed".into()))
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::TransportTimeout {
                        timeout_ms: self.config.timeout_ms,
                        context: format!("evaluation {eval_id}, awaiting {}", self.central.awaiting(eval_id)),
                    })
                }
            }
        }
    }
}

impl VerticalTransport for TcpFederation {
    fn run_evaluation(&mut self, eval_id: u64, params: &ParameterSet) -> Result<EvalOutcome> {
        let result = self.run(eval_id, params);
        let mut transcript = self.tap.drain(eval_id);
        match result {
            Ok(ll) => {
                transcript.sort();
                Ok(EvalOutcome { ll, transcript })
            }
            Err(e) => {
                self.central.discard(eval_id);
                Err(e)
            }
        }
    }

    fn k_total(&self) -> u32 {
        self.central.k_total()
    }
}

impl Drop for TcpFederation {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.out.conns.clear();
        for s in &mut self.servers {
            s.shutdown();
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }
}
