//! Server and client state machines over a [`ServerLink`] / [`ClientLink`].
//!
//! Setup: every client sends `SetupCount(n_k)`, the server answers each
//! with `SetupCount(n)`. Each round the server broadcasts `W`, waits for
//! all `ClientUpdate`s of that round, then steps. The last broadcast has
//! its status byte set.

use std::time::{Duration, Instant};

use super::barrier::RoundBarrier;
use super::codec::{Message, MessageType};
use super::transport::{ClientLink, ServerLink};
use crate::consensus::{
    ConsensusClient, ConsensusOutcome, ConsensusServer, GlobalModel, LocalModel,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::suffstats::{secure_sum, LocalStatistics, MaskedShare};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FederationOptions {
    /// How long the server waits for a round's messages.
    pub timeout: Duration,
}

impl Default for FederationOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// Parameters as sent on the wire: `d×d` when they are a square weight
/// matrix, otherwise a single row.
pub fn params_matrix(params: &[f64], d: usize) -> Matrix {
    let (rows, cols) = if params.len() == d * d {
        (d, d)
    } else {
        (1, params.len())
    };
    Matrix::from_vec(rows, cols, params.to_vec()).expect("shape matches length")
}

fn sorted_participants(participants: &[u32]) -> Result<Vec<u32>> {
    let mut ids = participants.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != participants.len() {
        return Err(Error::Argument("participant ids must be distinct".into()));
    }
    if ids.is_empty() {
        return Err(Error::Argument(
            "at least one participant is required".into(),
        ));
    }
    Ok(ids)
}

/// Collects one `ty` message per participant for `round`. Stray,
/// duplicate and stale messages are logged and dropped.
fn gather<S: ServerLink, T>(
    link: &mut S,
    round: u32,
    participants: &[u32],
    ty: MessageType,
    opts: &FederationOptions,
    parse: impl Fn(&Message) -> Result<T>,
) -> Result<Vec<T>> {
    let mut barrier = RoundBarrier::new(round, participants.iter().copied());
    let deadline = Instant::now() + opts.timeout;
    while !barrier.is_complete() {
        let Some(msg) = link.recv_until(deadline)? else {
            return Err(Error::Timeout {
                round,
                clients: barrier.missing(),
                seconds: opts.timeout.as_secs(),
            });
        };
        if msg.msg_type != ty {
            log::warn!(
                "round {round}: dropped {:?} from client {}",
                msg.msg_type,
                msg.client_id
            );
            continue;
        }
        let value = parse(&msg)?;
        if let Err(e) = barrier.offer(msg.client_id, msg.round, value) {
            log::warn!("rejected: {e}");
        }
    }
    barrier.into_values()
}

/// Setup handshake, server side. Returns the total sample count.
pub fn setup_server<S: ServerLink>(
    link: &mut S,
    participants: &[u32],
    opts: &FederationOptions,
) -> Result<u64> {
    let ids = sorted_participants(participants)?;
    let counts = gather(link, 0, &ids, MessageType::SetupCount, opts, Message::count)?;
    let total = counts
        .iter()
        .try_fold(0u64, |acc, &n| acc.checked_add(n))
        .ok_or_else(|| Error::Protocol("sample counts overflow".into()))?;
    for &id in &ids {
        link.send(id, &Message::setup_count(id, total))?;
    }
    Ok(total)
}

/// Setup handshake, client side. Returns the total sample count.
pub fn setup_client<C: ClientLink>(link: &mut C, client_id: u32, sample_count: u64) -> Result<u64> {
    link.send(&Message::setup_count(client_id, sample_count))?;
    link.recv()?.count()
}

/// Runs the server role to termination.
///
/// On failure after setup the error is [`Error::Aborted`] carrying the
/// rounds completed so far.
pub fn serve<S, G>(
    link: &mut S,
    mut server: ConsensusServer<G>,
    participants: &[u32],
    opts: &FederationOptions,
) -> Result<ConsensusOutcome>
where
    S: ServerLink,
    G: GlobalModel,
{
    let ids = sorted_participants(participants)?;
    if ids.len() != server.client_count() {
        return Err(Error::Argument(format!(
            "server expects {} clients, got {} participants",
            server.client_count(),
            ids.len()
        )));
    }
    let total = setup_server(link, &ids, opts)?;
    log::info!("setup complete: {} clients, n = {total}", ids.len());
    let d = server.model.node_count();
    let p = server.model.param_len();

    let mut run = || -> Result<()> {
        loop {
            let round = u32::try_from(server.round + 1)
                .map_err(|_| Error::Protocol("round counter overflow".into()))?;
            let global = params_matrix(&server.global, d);
            for &id in &ids {
                link.send(id, &Message::server_broadcast(round, id, &global, false))?;
            }
            let locals = gather(link, round, &ids, MessageType::ClientUpdate, opts, |m| {
                let local = m.client_update_matrix()?;
                if local.as_slice().len() != p {
                    return Err(Error::Protocol(format!(
                        "client {} sent {} parameters, expected {p}",
                        m.client_id,
                        local.as_slice().len()
                    )));
                }
                Ok(local.into_vec())
            })?;
            if server.step(&locals)?.finished {
                let global = params_matrix(&server.global, d);
                for &id in &ids {
                    link.send(id, &Message::server_broadcast(round, id, &global, true))?;
                }
                return Ok(());
            }
        }
    };
    if let Err(e) = run() {
        return Err(Error::Aborted {
            trace: Box::new(server.trace().clone()),
            source: Box::new(e),
        });
    }
    let adjacency = server.model.adjacency(&server.global)?;
    let (_, global, trace) = server.into_parts();
    Ok(ConsensusOutcome {
        global,
        adjacency,
        trace,
    })
}

/// What a client knows when the run ends.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: u32,
    pub total_count: u64,
    pub rounds: u32,
    pub global: Vec<f64>,
}

/// Runs the client role to termination. `make` builds the client state
/// once the total sample count is known.
pub fn join<C, L>(
    link: &mut C,
    client_id: u32,
    sample_count: u64,
    make: impl FnOnce(usize) -> Result<ConsensusClient<L>>,
) -> Result<ClientReport>
where
    C: ClientLink,
    L: LocalModel,
{
    let total = setup_client(link, client_id, sample_count)?;
    let total_n = usize::try_from(total)
        .map_err(|_| Error::Protocol(format!("total count {total} does not fit")))?;
    let mut client = make(total_n)?;
    let mut rounds = 0;
    loop {
        let msg = link.recv()?;
        let b = msg.broadcast()?;
        if b.finished {
            client.on_final(b.global.as_slice());
            return Ok(ClientReport {
                client_id,
                total_count: total,
                rounds,
                global: b.global.into_vec(),
            });
        }
        let local = client.on_broadcast(b.global.as_slice())?;
        let local = Matrix::from_vec(b.global.rows(), b.global.cols(), local)?;
        link.send(&Message::client_update(msg.round, client_id, &local))?;
        rounds = msg.round;
    }
}

/// Collects one masked share per participant and unmasks their sum.
pub fn collect_shares<S: ServerLink>(
    link: &mut S,
    participants: &[u32],
    round: u32,
    opts: &FederationOptions,
) -> Result<LocalStatistics> {
    let ids = sorted_participants(participants)?;
    let shares = gather(
        link,
        round,
        &ids,
        MessageType::StatShare,
        opts,
        Message::masked_share,
    )?;
    secure_sum(&shares, &ids)
}

pub fn send_share<C: ClientLink>(link: &mut C, share: &MaskedShare) -> Result<()> {
    link.send(&Message::stat_share(share))
}
