//! Simulated lossless, ordered point-to-point channels.
//!
//! Each `(from, to)` pair gets its own FIFO. Every payload sent is charged to
//! a shared per-round byte ledger, which is how communication cost shows up
//! in the trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{mpsc, Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Server,
    Node(u32),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Server => f.write_str("server"),
            Endpoint::Node(id) => write!(f, "node {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("endpoint {0} is not registered")]
    NotRegistered(Endpoint),
    #[error("channel {0} -> {1} already exists")]
    AlreadyConnected(Endpoint, Endpoint),
    #[error("channel closed: protocol shutdown")]
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub round: u32,
    pub from: Endpoint,
    pub payload: Vec<u8>,
}

/// Bytes sent per round, shared by every channel of a hub.
#[derive(Debug, Clone, Default)]
pub struct ByteLedger(Arc<Mutex<BTreeMap<u32, u64>>>);

impl ByteLedger {
    fn charge(&self, round: u32, bytes: usize) {
        *self.0.lock().expect("ledger lock").entry(round).or_default() += bytes as u64;
    }

    pub fn round(&self, round: u32) -> u64 {
        self.0.lock().expect("ledger lock").get(&round).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.lock().expect("ledger lock").values().sum()
    }
}

#[derive(Debug)]
pub struct ChannelTx {
    from: Endpoint,
    to: Endpoint,
    tx: mpsc::Sender<Envelope>,
    ledger: ByteLedger,
}

impl ChannelTx {
    pub fn send(&self, round: u32, payload: Vec<u8>) -> Result<(), ChannelError> {
        let n = payload.len();
        self.tx.send(Envelope { round, from: self.from, payload }).map_err(|_| ChannelError::Shutdown)?;
        self.ledger.charge(round, n);
        Ok(())
    }

    pub fn to(&self) -> Endpoint {
        self.to
    }
}

#[derive(Debug)]
pub struct ChannelRx {
    rx: mpsc::Receiver<Envelope>,
}

impl ChannelRx {
    /// Blocks for the next message; fails once every sender is gone and the
    /// queue is drained.
    pub fn recv(&self) -> Result<Envelope, ChannelError> {
        self.rx.recv().map_err(|_| ChannelError::Shutdown)
    }

    pub fn try_recv(&self) -> Option<Envelope> {
        self.rx.try_recv().ok()
    }
}

#[derive(Debug, Default)]
pub struct Hub {
    endpoints: BTreeSet<Endpoint>,
    links: BTreeSet<(Endpoint, Endpoint)>,
    ledger: ByteLedger,
}

impl Hub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, ep: Endpoint) {
        self.endpoints.insert(ep);
    }

    pub fn connect(&mut self, from: Endpoint, to: Endpoint) -> Result<(ChannelTx, ChannelRx), ChannelError> {
        for ep in [from, to] {
            if !self.endpoints.contains(&ep) {
                return Err(ChannelError::NotRegistered(ep));
            }
        }
        if !self.links.insert((from, to)) {
            return Err(ChannelError::AlreadyConnected(from, to));
        }
        let (tx, rx) = mpsc::channel();
        Ok((ChannelTx { from, to, tx, ledger: self.ledger.clone() }, ChannelRx { rx }))
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }
}
