//! Message transports. Both implementations move encoded bytes, so every
//! message goes through the codec regardless of transport.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::codec::{decode, encode, read_message, write_message, Message};
use crate::error::{Error, Result};

/// Environment variable overriding the server bind address.
pub const BIND_ENV: &str = "FBNSL_BIND";

/// `FBNSL_BIND` if set, else `default`.
pub fn bind_address(default: &str) -> String {
    std::env::var(BIND_ENV).unwrap_or_else(|_| default.to_string())
}

/// Server end: one inbound stream from all clients, one outbound per client.
pub trait ServerLink {
    /// Next inbound message, or `None` if nothing arrives before `deadline`.
    fn recv_until(&mut self, deadline: Instant) -> Result<Option<Message>>;

    fn send(&mut self, client_id: u32, msg: &Message) -> Result<()>;
}

pub trait ClientLink {
    fn send(&mut self, msg: &Message) -> Result<()>;

    /// Blocks until the server sends something.
    fn recv(&mut self) -> Result<Message>;
}

pub struct InprocServer {
    uplink: Receiver<Vec<u8>>,
    downlinks: BTreeMap<u32, Sender<Vec<u8>>>,
}

pub struct InprocClient {
    client_id: u32,
    uplink: Sender<Vec<u8>>,
    downlink: Receiver<Vec<u8>>,
}

impl InprocClient {
    pub fn client_id(&self) -> u32 {
        self.client_id
    }
}

/// Channel-backed links for `ids`, returned in the same order.
pub fn inproc_links(ids: &[u32]) -> (InprocServer, Vec<InprocClient>) {
    let (up_tx, up_rx) = mpsc::channel();
    let mut downlinks = BTreeMap::new();
    let clients = ids
        .iter()
        .map(|&client_id| {
            let (tx, rx) = mpsc::channel();
            downlinks.insert(client_id, tx);
            InprocClient {
                client_id,
                uplink: up_tx.clone(),
                downlink: rx,
            }
        })
        .collect();
    (
        InprocServer {
            uplink: up_rx,
            downlinks,
        },
        clients,
    )
}

impl ServerLink for InprocServer {
    fn recv_until(&mut self, deadline: Instant) -> Result<Option<Message>> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.uplink.recv_timeout(wait) {
            Ok(bytes) => decode(&bytes).map(Some),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => Ok(None),
        }
    }

    fn send(&mut self, client_id: u32, msg: &Message) -> Result<()> {
        let tx = self
            .downlinks
            .get(&client_id)
            .ok_or_else(|| Error::Protocol(format!("no link to client {client_id}")))?;
        tx.send(encode(msg))
            .map_err(|_| Error::Protocol(format!("client {client_id} disconnected")))
    }
}

impl ClientLink for InprocClient {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.uplink
            .send(encode(msg))
            .map_err(|_| Error::Protocol("server disconnected".into()))
    }

    fn recv(&mut self) -> Result<Message> {
        let bytes = self
            .downlink
            .recv()
            .map_err(|_| Error::Protocol("server disconnected".into()))?;
        decode(&bytes)
    }
}

enum Event {
    Joined(u32, TcpStream),
    Message(Message),
    Closed(u32, String),
}

/// TCP server end. Each connection identifies itself by the client id of
/// its first message; later messages must carry the same id.
pub struct TcpServer {
    local_addr: SocketAddr,
    events: Receiver<Event>,
    writers: BTreeMap<u32, TcpStream>,
    closed: BTreeSet<u32>,
}

impl TcpServer {
    /// Binds and accepts up to `client_count` connections in the background.
    pub fn bind(addr: impl ToSocketAddrs, client_count: usize) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for _ in 0..client_count {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let tx = tx.clone();
                        thread::spawn(move || serve_connection(stream, peer, tx));
                    }
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        return;
                    }
                }
            }
        });
        Ok(Self {
            local_addr,
            events: rx,
            writers: BTreeMap::new(),
            closed: BTreeSet::new(),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }
}

fn serve_connection(stream: TcpStream, peer: SocketAddr, tx: Sender<Event>) {
    let _ = stream.set_nodelay(true);
    let writer = match stream.try_clone() {
        Ok(w) => w,
        Err(e) => {
            log::warn!("{peer}: {e}");
            return;
        }
    };
    let mut reader = BufReader::new(stream);
    let first = match read_message(&mut reader) {
        Ok(Some(m)) => m,
        Ok(None) => return,
        Err(e) => {
            log::warn!("{peer}: {e}");
            return;
        }
    };
    let id = first.client_id;
    if tx.send(Event::Joined(id, writer)).is_err() || tx.send(Event::Message(first)).is_err() {
        return;
    }
    loop {
        let reason = match read_message(&mut reader) {
            Ok(Some(m)) if m.client_id == id => {
                if tx.send(Event::Message(m)).is_err() {
                    return;
                }
                continue;
            }
            Ok(Some(m)) => format!("connection of client {id} sent id {}", m.client_id),
            Ok(None) => "connection closed".to_string(),
            Err(e) => e.to_string(),
        };
        let _ = tx.send(Event::Closed(id, reason));
        return;
    }
}

impl ServerLink for TcpServer {
    fn recv_until(&mut self, deadline: Instant) -> Result<Option<Message>> {
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(wait) {
                Ok(Event::Joined(id, stream)) => {
                    self.closed.remove(&id);
                    if self.writers.insert(id, stream).is_some() {
                        log::warn!("client {id} reconnected; replacing its connection");
                    }
                }
                Ok(Event::Message(m)) => return Ok(Some(m)),
                Ok(Event::Closed(id, reason)) => {
                    log::warn!("client {id}: {reason}");
                    self.closed.insert(id);
                }
                Err(_) => return Ok(None),
            }
        }
    }

    /// Sends to a client whose connection has dropped are logged and
    /// skipped; the round timeout then reports that client as missing.
    fn send(&mut self, client_id: u32, msg: &Message) -> Result<()> {
        if self.closed.contains(&client_id) {
            log::warn!("not sending to disconnected client {client_id}");
            return Ok(());
        }
        let stream = self
            .writers
            .get_mut(&client_id)
            .ok_or_else(|| Error::Protocol(format!("client {client_id} is not connected")))?;
        if let Err(e) = write_message(stream, msg) {
            log::warn!("client {client_id}: {e}");
            self.closed.insert(client_id);
        }
        Ok(())
    }
}

pub struct TcpClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpClient {
    /// Connects, retrying refused connections until `patience` has elapsed.
    pub fn connect(addr: impl ToSocketAddrs + Clone, patience: Duration) -> Result<Self> {
        let start = Instant::now();
        let stream = loop {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => break s,
                Err(e) if start.elapsed() < patience => {
                    log::debug!("connect failed ({e}); retrying");
                    thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(e.into()),
            }
        };
        stream.set_nodelay(true)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }
}

impl ClientLink for TcpClient {
    fn send(&mut self, msg: &Message) -> Result<()> {
        write_message(&mut self.writer, msg)
    }

    fn recv(&mut self) -> Result<Message> {
        read_message(&mut self.reader)?
            .ok_or_else(|| Error::Protocol("server closed the connection".into()))
    }
}

impl Drop for TcpServer {
    /// Shuts connections down so that clients blocked in `recv` see the
    /// end of stream even while reader threads still hold the sockets.
    fn drop(&mut self) {
        for stream in self.writers.values() {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
    }
}
