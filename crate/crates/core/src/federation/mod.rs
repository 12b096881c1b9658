//! Message schema, transports and round orchestration between one server
//! and K clients. No message type carries samples: only parameter
//! matrices, masked statistics and counts.

pub mod barrier;
pub mod codec;
pub mod orchestrate;
pub mod transport;

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use barrier::RoundBarrier;
pub use codec::{decode, encode, Broadcast, Message, MessageType};
pub use orchestrate::{
    collect_shares, join, send_share, serve, ClientReport, FederationOptions, DEFAULT_TIMEOUT,
};
pub use transport::{
    bind_address, inproc_links, ClientLink, InprocClient, InprocServer, ServerLink, TcpClient,
    TcpServer, BIND_ENV,
};

use crate::admm_linear::{check_datasets, check_shapes, AdmmResult, LinearClient, LinearServer};
use crate::admm_mlp::{mlp_server, MlpAdmmResult, MlpClient, MlpParams};
use crate::baselines::LocalEstimate;
use crate::consensus::{
    AdmmConfig, ConsensusClient, ConsensusOutcome, ConsensusServer, GlobalModel, LocalModel,
    ModelFamily,
};
use crate::error::{Error, Result};
use crate::graph::{threshold_graph, ClientDataset};
use crate::suffstats::{
    assemble_covariance, local_stats, mask_share, solve_from_suffstats, LocalStatistics, MaskKeys,
};

/// How a single-process federated run connects its parties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Transport {
    Inproc,
    /// Loopback TCP; `bind` is overridden by `FBNSL_BIND`.
    Tcp {
        bind: String,
    },
}

impl Transport {
    pub fn tcp_loopback() -> Self {
        Transport::Tcp {
            bind: "127.0.0.1:0".into(),
        }
    }
}

const CONNECT_PATIENCE: Duration = Duration::from_secs(10);

/// A client yet to be built: id, local sample count and a constructor
/// taking the total sample count.
pub struct PendingClient<F> {
    pub client_id: u32,
    pub sample_count: u64,
    pub make: F,
}

fn client_links(
    transport: &Transport,
    ids: &[u32],
) -> Result<(Box<dyn ServerLink + Send>, Vec<Box<dyn ClientLink + Send>>)> {
    match transport {
        Transport::Inproc => {
            let (server, clients) = inproc_links(ids);
            let clients = clients
                .into_iter()
                .map(|c| Box::new(c) as Box<dyn ClientLink + Send>)
                .collect();
            Ok((Box::new(server), clients))
        }
        Transport::Tcp { bind } => {
            let server = TcpServer::bind(bind_address(bind), ids.len())?;
            let addr = server.local_addr();
            let clients = ids
                .iter()
                .map(|_| {
                    TcpClient::connect(addr, CONNECT_PATIENCE)
                        .map(|c| Box::new(c) as Box<dyn ClientLink + Send>)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((Box::new(server), clients))
        }
    }
}

impl<T: ServerLink + ?Sized> ServerLink for Box<T> {
    fn recv_until(&mut self, deadline: std::time::Instant) -> Result<Option<Message>> {
        (**self).recv_until(deadline)
    }

    fn send(&mut self, client_id: u32, msg: &Message) -> Result<()> {
        (**self).send(client_id, msg)
    }
}

impl<T: ClientLink + ?Sized> ClientLink for Box<T> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        (**self).send(msg)
    }

    fn recv(&mut self) -> Result<Message> {
        (**self).recv()
    }
}

fn join_all<T>(handles: Vec<thread::ScopedJoinHandle<'_, Result<T>>>) -> Result<Vec<T>> {
    handles
        .into_iter()
        .map(|h| {
            h.join()
                .unwrap_or_else(|_| Err(Error::Protocol("client thread panicked".into())))
        })
        .collect()
}

/// Runs server and clients in one process, each client on its own thread,
/// talking over `transport`.
pub fn run_federation<L, G, F>(
    server: ConsensusServer<G>,
    clients: Vec<PendingClient<F>>,
    transport: &Transport,
    opts: &FederationOptions,
) -> Result<ConsensusOutcome>
where
    L: LocalModel,
    G: GlobalModel,
    F: FnOnce(usize) -> Result<ConsensusClient<L>> + Send,
{
    let ids: Vec<u32> = clients.iter().map(|c| c.client_id).collect();
    let (server_link, links) = client_links(transport, &ids)?;
    thread::scope(|scope| {
        let handles = clients
            .into_iter()
            .zip(links)
            .map(|(c, mut link)| {
                scope.spawn(move || join(&mut link, c.client_id, c.sample_count, c.make))
            })
            .collect();
        // The server link is dropped on return so clients unblock on failure.
        let outcome = {
            let mut link = server_link;
            serve(&mut link, server, &ids, opts)
        };
        let reports = join_all(handles);
        let outcome = outcome?;
        reports?;
        Ok(outcome)
    })
}

/// Linear consensus ADMM over a transport. Same result as
/// [`crate::admm_linear::run_admm`].
pub fn federated_linear(
    datasets: &[ClientDataset],
    config: &AdmmConfig,
    transport: &Transport,
    opts: &FederationOptions,
) -> Result<AdmmResult> {
    config.validate()?;
    let d = check_datasets(datasets)?;
    let server = ConsensusServer::new(
        LinearServer::new(d, config.lambda, config.global_solver),
        datasets.len(),
        config,
        ModelFamily::Linear,
    )?;
    let clients = datasets
        .iter()
        .map(|ds| PendingClient {
            client_id: ds.client_id,
            sample_count: ds.sample_count() as u64,
            make: move |total_n: usize| {
                Ok(ConsensusClient::new(
                    ds.client_id,
                    LinearClient::new(ds, total_n),
                    config,
                ))
            },
        })
        .collect();
    let outcome = run_federation(server, clients, transport, opts)?;
    Ok(AdmmResult {
        graph: threshold_graph(&outcome.adjacency, config.threshold_tau),
        weights: outcome.adjacency,
        trace: outcome.trace,
    })
}

/// MLP consensus ADMM over a transport. Same result as
/// [`crate::admm_mlp::run_admm_mlp`].
pub fn federated_mlp(
    datasets: &[ClientDataset],
    config: &AdmmConfig,
    init_seed: u64,
    transport: &Transport,
    opts: &FederationOptions,
) -> Result<MlpAdmmResult> {
    config.validate()?;
    let d = check_datasets(datasets)?;
    let server = ConsensusServer::new(
        mlp_server(d, config, init_seed),
        datasets.len(),
        config,
        ModelFamily::Mlp,
    )?;
    let clients = datasets
        .iter()
        .map(|ds| PendingClient {
            client_id: ds.client_id,
            sample_count: ds.sample_count() as u64,
            make: move |total_n: usize| {
                let model = MlpClient::new(ds, total_n, config.hidden_units, config.local_solver);
                Ok(ConsensusClient::new(ds.client_id, model, config))
            },
        })
        .collect();
    let outcome = run_federation(server, clients, transport, opts)?;
    Ok(MlpAdmmResult {
        params: MlpParams::from_flat(d, config.hidden_units, outcome.global)?,
        graph: threshold_graph(&outcome.adjacency, config.threshold_tau),
        adjacency: outcome.adjacency,
        trace: outcome.trace,
    })
}

/// Each client masks its raw (uncentered) sums with pairwise seeds derived from `session`
/// and sends one `StatShare`; the server unmasks the total.
pub fn federated_statistics(
    datasets: &[ClientDataset],
    session: u64,
    transport: &Transport,
    opts: &FederationOptions,
) -> Result<LocalStatistics> {
    check_shapes(datasets)?;
    let ids: Vec<u32> = datasets.iter().map(|d| d.client_id).collect();
    let (server_link, links) = client_links(transport, &ids)?;
    thread::scope(|scope| {
        let handles = datasets
            .iter()
            .zip(links)
            .map(|(ds, mut link)| {
                let ids = &ids;
                scope.spawn(move || {
                    let keys = MaskKeys::from_session(session, ds.client_id, ids);
                    send_share(&mut link, &mask_share(&local_stats(&ds.data), &keys, 0))
                })
            })
            .collect();
        let total = {
            let mut link = server_link;
            collect_shares(&mut link, &ids, 0, opts)
        };
        join_all(handles)?;
        total
    })
}

/// Centralized solve on securely pooled statistics.
pub fn federated_suffstats(
    datasets: &[ClientDataset],
    config: &AdmmConfig,
    session: u64,
    transport: &Transport,
    opts: &FederationOptions,
) -> Result<LocalEstimate> {
    let total = federated_statistics(datasets, session, transport, opts)?;
    let (sigma, n) = assemble_covariance(&total)?;
    solve_from_suffstats(&sigma, n, config)
}
