//! TCP registration: the head accepts workers, hands out ranks in arrival
//! order and announces the start of the world. Workers only ever talk to
//! the head; worker-to-worker traffic is relayed through it.

use std::fmt;
use std::fs;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info};

use crate::error::{CommError, Result};
use crate::runtime::{self, Mailbox};
use crate::wire::{read_frame, write_frame, MessageFrame, MsgType, Payload, StreamError, NO_RANK};

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

/// One line of a machinefile-style hosts file: `hostname[:port] [slots=N]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostEntry {
    pub host: String,
    pub port: Option<u16>,
    pub slots: u32,
}

impl HostEntry {
    pub fn is_local(&self) -> bool {
        matches!(self.host.as_str(), "localhost" | "127.0.0.1" | "::1")
    }
}

/// Parsed hosts file. Besides host lines it may carry one
/// `exec: <template>` directive naming the remote-execution command.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostsFile {
    pub entries: Vec<HostEntry>,
    pub exec_template: Option<String>,
}

impl HostsFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut out = HostsFile::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(tpl) = line.strip_prefix("exec:") {
                out.exec_template = Some(tpl.trim().to_string());
                continue;
            }
            let mut words = line.split_whitespace();
            let hostport = words.next().unwrap();
            let (host, port) = match hostport.rsplit_once(':') {
                Some((h, p)) => {
                    let port = p
                        .parse::<u16>()
                        .map_err(|_| format!("line {}: bad port {p:?}", lineno + 1))?;
                    (h.to_string(), Some(port))
                }
                None => (hostport.to_string(), None),
            };
            let mut slots = 1;
            for w in words {
                let n = w
                    .strip_prefix("slots=")
                    .ok_or_else(|| format!("line {}: unexpected {w:?}", lineno + 1))?;
                slots = n
                    .parse()
                    .map_err(|_| format!("line {}: bad slot count {n:?}", lineno + 1))?;
            }
            out.entries.push(HostEntry { host, port, slots });
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn total_slots(&self) -> u32 {
        self.entries.iter().map(|e| e.slots).sum()
    }

    /// Expands entries into one host per worker slot, in file order.
    pub fn slot_hosts(&self) -> impl Iterator<Item = &HostEntry> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat_n(e, e.slots as usize))
    }
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub head_address: String,
    pub expected_workers: u32,
    pub connect_timeout: Duration,
    pub hosts: Option<HostsFile>,
}

impl ClusterConfig {
    pub fn new(head_address: impl Into<String>, expected_workers: u32) -> Self {
        ClusterConfig {
            head_address: head_address.into(),
            expected_workers,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            hosts: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.connect_timeout = timeout;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    HeadParticipant,
    Worker,
}

pub(crate) struct Peer {
    pub(crate) writer: Mutex<TcpStream>,
}

pub(crate) enum Links {
    Solo,
    Head { peers: Arc<Vec<Peer>> },
    Worker { head: Mutex<TcpStream> },
}

/// A process's view of the single world communicator.
pub struct World {
    pub(crate) rank: u32,
    pub(crate) size: u32,
    pub(crate) role: Role,
    pub(crate) links: Links,
    pub(crate) mailbox: Arc<Mailbox>,
    pub(crate) readers: Vec<JoinHandle<()>>,
    pub(crate) closed: bool,
    pub(crate) transcript: Option<Box<dyn io::Write + Send>>,
}

impl fmt::Debug for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("World")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("role", &self.role)
            .field("closed", &self.closed)
            .finish()
    }
}

impl World {
    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    /// A world of one: rank 0, no sockets.
    pub fn solo() -> World {
        World {
            rank: 0,
            size: 1,
            role: Role::HeadParticipant,
            links: Links::Solo,
            mailbox: Arc::new(Mailbox::new(0)),
            readers: Vec::new(),
            closed: false,
            transcript: None,
        }
    }

    /// Records the raw bytes of every frame this process sends from now on.
    pub fn record_transcript(&mut self, sink: Box<dyn io::Write + Send>) {
        self.transcript = Some(sink);
    }
}

/// A bound but not yet registered head. Binding first lets a launcher learn
/// the actual port (for `:0` addresses) before spawning workers.
#[derive(Debug)]
pub struct HeadListener {
    listener: Option<TcpListener>,
    local_addr: Option<SocketAddr>,
    config: ClusterConfig,
}

impl HeadListener {
    pub fn bind(config: ClusterConfig) -> Result<Self> {
        if config.expected_workers == 0 {
            return Ok(HeadListener {
                listener: None,
                local_addr: None,
                config,
            });
        }
        let listener =
            TcpListener::bind(&config.head_address).map_err(|source| CommError::BindFailure {
                addr: config.head_address.clone(),
                source,
            })?;
        let local_addr = listener.local_addr()?;
        info!(
            "head listening on {local_addr}, expecting {} workers",
            config.expected_workers
        );
        Ok(HeadListener {
            listener: Some(listener),
            local_addr: Some(local_addr),
            config,
        })
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    /// Accepts `expected_workers` registrations, then broadcasts START.
    pub fn accept_workers(self) -> Result<World> {
        self.accept_workers_or_abort(|| None)
    }

    /// Like [`HeadListener::accept_workers`], but polls `abort` while
    /// waiting and gives up with [`CommError::Aborted`] once it returns a
    /// reason (for example, a spawned worker has already exited).
    pub fn accept_workers_or_abort(
        self,
        mut abort: impl FnMut() -> Option<String>,
    ) -> Result<World> {
        let Some(listener) = self.listener else {
            return Ok(World::solo());
        };
        let expected = self.config.expected_workers;
        let size = expected + 1;
        let deadline = Instant::now() + self.config.connect_timeout;
        listener.set_nonblocking(true)?;

        let mut streams: Vec<TcpStream> = Vec::with_capacity(expected as usize);
        while (streams.len() as u32) < expected {
            let timeout = || CommError::RegistrationTimeout {
                arrived: streams.len() as u32,
                expected,
            };
            let now = Instant::now();
            if now >= deadline {
                return Err(timeout());
            }
            let mut stream = match listener.accept() {
                Ok((s, peer)) => {
                    debug!("connection from {peer}");
                    s
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if let Some(why) = abort() {
                        return Err(CommError::Aborted(why));
                    }
                    thread::sleep(Duration::from_millis(2));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(deadline - now))?;
            let hello = match read_frame(&mut stream) {
                Ok(f) => f,
                Err(StreamError::Io(e))
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    return Err(timeout())
                }
                Err(e) => return Err(e.into()),
            };
            if hello.msg_type != MsgType::Hello {
                return Err(CommError::ProtocolViolation(format!(
                    "expected HELLO, got {:?}",
                    hello.msg_type
                )));
            }
            let rank = streams.len() as u32 + 1;
            let welcome = MessageFrame::new(
                MsgType::Welcome,
                0,
                rank,
                0,
                Payload::U64(vec![rank as u64, size as u64]),
            );
            write_frame(&mut stream, &welcome)?;
            stream.set_read_timeout(None)?;
            streams.push(stream);
        }

        // Every worker holds its WELCOME before anyone sees START.
        for (i, stream) in streams.iter_mut().enumerate() {
            write_frame(
                stream,
                &MessageFrame::control(MsgType::Start, 0, i as u32 + 1),
            )?;
        }
        info!("world of {size} started");

        let mailbox = Arc::new(Mailbox::new(size));
        let peers: Vec<Peer> = streams
            .iter()
            .map(|s| {
                Ok(Peer {
                    writer: Mutex::new(s.try_clone()?),
                })
            })
            .collect::<io::Result<_>>()?;
        let peers = Arc::new(peers);
        let readers = streams
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                runtime::spawn_head_reader(i as u32 + 1, s, peers.clone(), mailbox.clone())
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(World {
            rank: 0,
            size,
            role: Role::HeadParticipant,
            links: Links::Head { peers },
            mailbox,
            readers,
            closed: false,
            transcript: None,
        })
    }
}

/// Binds, registers every expected worker and returns the rank-0 handle.
pub fn head_start(config: ClusterConfig) -> Result<World> {
    HeadListener::bind(config)?.accept_workers()
}

fn connect_with_retry(addr: &str, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        let attempt = addr.to_socket_addrs().and_then(|mut addrs| {
            addrs
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))
                .and_then(|a| TcpStream::connect_timeout(&a, Duration::from_secs(1).min(timeout)))
        });
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(CommError::ConnectFailure {
                    addr: addr.to_string(),
                    source: e,
                })
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn expect_from_head(stream: &mut TcpStream, want: MsgType) -> Result<MessageFrame> {
    match read_frame(stream) {
        Ok(f) if f.msg_type == want => Ok(f),
        Ok(f) if f.msg_type == MsgType::Error => Err(CommError::ProtocolViolation(format!(
            "head reported error: {}",
            runtime::error_text(&f.payload)
        ))),
        Ok(f) => Err(CommError::ProtocolViolation(format!(
            "expected {want:?}, got {:?}",
            f.msg_type
        ))),
        Err(StreamError::Closed) => Err(CommError::HeadClosed),
        Err(StreamError::Io(e))
            if matches!(
                e.kind(),
                io::ErrorKind::UnexpectedEof
                    | io::ErrorKind::ConnectionReset
                    | io::ErrorKind::ConnectionAborted
            ) =>
        {
            Err(CommError::HeadClosed)
        }
        Err(e) => Err(e.into()),
    }
}

/// Connects to the head, registers, and blocks until the world starts.
pub fn worker_join(config: &ClusterConfig) -> Result<World> {
    let mut stream = connect_with_retry(&config.head_address, config.connect_timeout)?;
    stream.set_nodelay(true)?;
    write_frame(
        &mut stream,
        &MessageFrame::control(MsgType::Hello, NO_RANK, NO_RANK),
    )?;

    let welcome = expect_from_head(&mut stream, MsgType::Welcome)?;
    let (rank, size) = match &welcome.payload {
        Payload::U64(v) if v.len() == 2 && v[0] >= 1 && v[0] < v[1] && v[1] <= u32::MAX as u64 => {
            (v[0] as u32, v[1] as u32)
        }
        other => {
            return Err(CommError::ProtocolViolation(format!(
                "malformed WELCOME payload {other:?}"
            )))
        }
    };
    expect_from_head(&mut stream, MsgType::Start)?;
    debug!("joined as rank {rank} of {size}");

    let mailbox = Arc::new(Mailbox::new(size));
    let reader = runtime::spawn_worker_reader(rank, stream.try_clone()?, mailbox.clone())?;
    Ok(World {
        rank,
        size,
        role: Role::Worker,
        links: Links::Worker {
            head: Mutex::new(stream),
        },
        mailbox,
        readers: vec![reader],
        closed: false,
        transcript: None,
    })
}
