//! Multi-threaded network: each node's round runs on a worker thread and
//! talks to the server only through serialized messages on [`crate::channel`]
//! links.

use eflsim_core::codec::{decode_broadcast, decode_report, encode_broadcast, encode_report, GlobalBroadcast};
use eflsim_core::node::{NodeReport, NodeState};
use eflsim_core::server::{Network, NodeStep, StepKind};
use eflsim_core::{EflError, Result};
use rayon::prelude::*;

use crate::channel::{ByteLedger, ChannelError, ChannelRx, ChannelTx, Endpoint, Hub};

/// Environment variable read by [`thread_count`].
pub const THREADS_ENV: &str = "EFLSIM_THREADS";

#[derive(Debug)]
struct Link {
    node_id: u32,
    down_tx: ChannelTx,
    down_rx: ChannelRx,
    up_tx: ChannelTx,
    up_rx: ChannelRx,
}

#[derive(Debug)]
pub struct ThreadedNetwork {
    pool: rayon::ThreadPool,
    links: Vec<Link>,
    ledger: ByteLedger,
}

fn shutdown(_: ChannelError) -> EflError {
    EflError::Shutdown
}

/// Worker count: `requested`, else `EFLSIM_THREADS`, else the machine's
/// parallelism, always within `1..=n_nodes`.
pub fn thread_count(requested: Option<usize>, n_nodes: usize) -> usize {
    let from_env = || std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
    let n = requested.or_else(from_env).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    n.clamp(1, n_nodes.max(1))
}

impl ThreadedNetwork {
    pub fn new(node_ids: impl IntoIterator<Item = u32>, threads: usize) -> Result<Self> {
        let mut ids: Vec<u32> = node_ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let mut hub = Hub::new();
        hub.register(Endpoint::Server);
        let mut links = Vec::with_capacity(ids.len());
        for &id in &ids {
            let node = Endpoint::Node(id);
            hub.register(node);
            let link_err = |e: ChannelError| EflError::contract(e.to_string());
            let (down_tx, down_rx) = hub.connect(Endpoint::Server, node).map_err(link_err)?;
            let (up_tx, up_rx) = hub.connect(node, Endpoint::Server).map_err(link_err)?;
            links.push(Link { node_id: id, down_tx, down_rx, up_tx, up_rx });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .thread_name(|i| format!("eflsim-node-{i}"))
            .build()
            .map_err(|e| EflError::InvalidConfig(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool, links, ledger: hub.ledger().clone() })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }
}

fn node_turn(link: &Link, node: &mut NodeState, step: &NodeStep<'_>) -> Result<()> {
    let gel = match step.kind {
        StepKind::First { .. } => None,
        StepKind::Next { .. } => {
            let env = link.down_rx.recv().map_err(shutdown)?;
            Some(decode_broadcast(&env.payload)?.gel)
        }
    };
    let report = step.run(node, gel.as_deref())?;
    link.up_tx.send(step.round, encode_report(&report)).map_err(shutdown)
}

impl Network for ThreadedNetwork {
    fn run_round(&mut self, nodes: &mut [NodeState], step: &NodeStep<'_>) -> Result<Vec<NodeReport>> {
        let ids: Vec<u32> = nodes.iter().map(NodeState::node_id).collect();
        let linked: Vec<u32> = self.links.iter().map(|l| l.node_id).collect();
        if ids != linked {
            return Err(EflError::contract(format!("nodes {ids:?} do not match network endpoints {linked:?}")));
        }
        let links = &mut self.links;
        let outcomes: Vec<Result<()>> = self
            .pool
            .install(|| links.par_iter_mut().zip(nodes.par_iter_mut()).map(|(l, n)| node_turn(l, n, step)).collect());
        outcomes.into_iter().collect::<Result<Vec<()>>>()?;
        self.links
            .iter()
            .map(|l| {
                let env = l.up_rx.recv().map_err(shutdown)?;
                if env.round != step.round {
                    return Err(EflError::contract(format!(
                        "node {} answered round {} during round {}",
                        l.node_id, env.round, step.round
                    )));
                }
                decode_report(&env.payload)
            })
            .collect()
    }

    fn broadcast(&mut self, msg: &GlobalBroadcast) -> Result<()> {
        let bytes = encode_broadcast(msg);
        for l in &self.links {
            l.down_tx.send(msg.round, bytes.clone()).map_err(shutdown)?;
        }
        Ok(())
    }

    fn round_bytes(&self, round: u32) -> u64 {
        self.ledger.round(round)
    }
}
