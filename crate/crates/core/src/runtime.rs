//! Point-to-point messaging and synchronization on a [`World`].
//!
//! Each process runs background reader threads that drain sockets into a
//! [`Mailbox`]. At the head, the reader for worker `w` also relays SEND
//! frames addressed to other workers, looking only at the header. Since a
//! single thread handles each source connection, per-pair FIFO order holds
//! end to end.
//!
//! Control frames use tag 0 and an empty payload:
//!
//! | frame            | source | dest       |
//! |------------------|--------|------------|
//! | BARRIER          | rank   | 0xFFFFFFFF |
//! | BARRIER_RELEASE  | 0      | rank       |
//! | SHUTDOWN         | 0      | rank       |
//! | ERROR (BYTES)    | rank   | 0xFFFFFFFF |

use std::collections::{BTreeSet, VecDeque};
use std::io::{self, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::error::{CommError, Result};
use crate::transport::{Links, Peer, World};
use crate::wire::{encode_frame, read_frame, MessageFrame, MsgType, Payload, StreamError, NO_RANK};

/// Which source a receive accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Any,
    Rank(u32),
}

impl From<u32> for Source {
    fn from(r: u32) -> Self {
        Source::Rank(r)
    }
}

/// Which tag a receive accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Any,
    Value(u32),
}

impl From<u32> for Tag {
    fn from(t: u32) -> Self {
        Tag::Value(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub source: u32,
    pub tag: u32,
    pub payload: Payload,
}

impl Envelope {
    fn matches(&self, source: Source, tag: Tag) -> bool {
        (source == Source::Any || source == Source::Rank(self.source))
            && (tag == Tag::Any || tag == Tag::Value(self.tag))
    }
}

#[derive(Default)]
struct MailState {
    messages: VecDeque<Envelope>,
    control: VecDeque<MessageFrame>,
    /// Why each link went down, indexed by link id. At the head a link id is
    /// the worker's rank; a worker has one link (id 0) to the head.
    down: Vec<Option<String>>,
}

pub(crate) struct Mailbox {
    state: Mutex<MailState>,
    cond: Condvar,
}

impl Mailbox {
    pub(crate) fn new(links: u32) -> Self {
        Mailbox {
            state: Mutex::new(MailState {
                down: vec![None; links.max(1) as usize],
                ..Default::default()
            }),
            cond: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, MailState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push_message(&self, env: Envelope) {
        self.lock().messages.push_back(env);
        self.cond.notify_all();
    }

    fn push_control(&self, frame: MessageFrame) {
        self.lock().control.push_back(frame);
        self.cond.notify_all();
    }

    fn mark_down(&self, link: u32, why: String) {
        let mut st = self.lock();
        let slot = &mut st.down[link as usize];
        if slot.is_none() {
            *slot = Some(why);
        }
        drop(st);
        self.cond.notify_all();
    }

    /// Blocks until `take` yields a value or `dead` reports a lost link.
    fn wait_for<T>(
        &self,
        deadline: Option<Instant>,
        mut take: impl FnMut(&mut MailState) -> Option<T>,
        dead: impl Fn(&MailState) -> Option<String>,
    ) -> Result<Option<T>> {
        let mut st = self.lock();
        loop {
            if let Some(v) = take(&mut st) {
                return Ok(Some(v));
            }
            if let Some(why) = dead(&st) {
                return Err(CommError::Disconnected(why));
            }
            st = match deadline {
                None => self.cond.wait(st).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    self.cond
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0
                }
            };
        }
    }
}

pub(crate) fn error_text(p: &Payload) -> String {
    match p {
        Payload::Bytes(b) => String::from_utf8_lossy(b).into_owned(),
        other => format!("{other:?}"),
    }
}

fn describe(e: &StreamError) -> String {
    match e {
        StreamError::Closed => "connection closed".into(),
        other => other.to_string(),
    }
}

pub(crate) fn spawn_head_reader(
    worker: u32,
    mut stream: TcpStream,
    peers: Arc<Vec<Peer>>,
    mailbox: Arc<Mailbox>,
) -> io::Result<JoinHandle<()>> {
    let size = peers.len() as u32 + 1;
    thread::Builder::new()
        .name(format!("mmpi-head-rx-{worker}"))
        .spawn(move || loop {
            let frame = match read_frame(&mut stream) {
                Ok(f) => f,
                Err(e) => {
                    debug!("link to rank {worker} ended: {}", describe(&e));
                    mailbox.mark_down(worker, format!("rank {worker}: {}", describe(&e)));
                    return;
                }
            };
            let violation = match frame.msg_type {
                MsgType::Send if frame.source != worker => {
                    Some(format!("rank {worker} sent with source {}", frame.source))
                }
                MsgType::Send if frame.dest == 0 => {
                    mailbox.push_message(Envelope {
                        source: frame.source,
                        tag: frame.tag,
                        payload: frame.payload,
                    });
                    None
                }
                MsgType::Send if frame.dest < size && frame.dest != worker => {
                    let dest = frame.dest;
                    let relayed = encode_frame(&frame)
                        .map_err(io::Error::other)
                        .and_then(|bytes| write_locked(&peers[dest as usize - 1].writer, &bytes));
                    if let Err(e) = relayed {
                        warn!("relay {worker} -> {dest} failed: {e}");
                        mailbox.mark_down(dest, format!("rank {dest}: relay failed: {e}"));
                    }
                    None
                }
                MsgType::Send => Some(format!("rank {worker} sent to invalid rank {}", frame.dest)),
                MsgType::Barrier => {
                    mailbox.push_control(frame);
                    None
                }
                MsgType::Error => {
                    let text = error_text(&frame.payload);
                    warn!("rank {worker} reported error: {text}");
                    mailbox.mark_down(worker, format!("rank {worker} reported error: {text}"));
                    return;
                }
                other => Some(format!("unexpected {other:?} from rank {worker}")),
            };
            if let Some(why) = violation {
                warn!("protocol violation: {why}");
                mailbox.mark_down(worker, format!("protocol violation: {why}"));
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        })
}

pub(crate) fn spawn_worker_reader(
    rank: u32,
    mut stream: TcpStream,
    mailbox: Arc<Mailbox>,
) -> io::Result<JoinHandle<()>> {
    thread::Builder::new()
        .name(format!("mmpi-rx-{rank}"))
        .spawn(move || loop {
            let frame = match read_frame(&mut stream) {
                Ok(f) => f,
                Err(e) => {
                    mailbox.mark_down(0, format!("head: {}", describe(&e)));
                    return;
                }
            };
            match frame.msg_type {
                MsgType::Send => mailbox.push_message(Envelope {
                    source: frame.source,
                    tag: frame.tag,
                    payload: frame.payload,
                }),
                MsgType::BarrierRelease | MsgType::Shutdown => mailbox.push_control(frame),
                MsgType::Error => {
                    let text = error_text(&frame.payload);
                    mailbox.mark_down(0, format!("head reported error: {text}"));
                    return;
                }
                other => {
                    mailbox.mark_down(0, format!("unexpected {other:?} from head"));
                    return;
                }
            }
        })
}

fn write_locked(writer: &Mutex<TcpStream>, bytes: &[u8]) -> io::Result<()> {
    let mut s = writer.lock().unwrap_or_else(|e| e.into_inner());
    s.write_all(bytes)
}

impl World {
    fn check_open(&self) -> Result<()> {
        if self.closed {
            Err(CommError::Disconnected("world has been shut down".into()))
        } else {
            Ok(())
        }
    }

    pub(crate) fn check_rank(&self, rank: u32) -> Result<()> {
        if rank >= self.size {
            Err(CommError::InvalidRank {
                rank,
                size: self.size,
            })
        } else {
            Ok(())
        }
    }

    /// Puts one frame on the wire toward `dest` (a rank, or the head's
    /// control endpoint when sent by a worker).
    fn emit(&mut self, frame: &MessageFrame) -> Result<()> {
        let bytes = encode_frame(frame)?;
        let written = match &self.links {
            Links::Solo => Ok(()),
            Links::Worker { head } => write_locked(head, &bytes),
            Links::Head { peers } => write_locked(&peers[frame.dest as usize - 1].writer, &bytes),
        };
        if let Err(e) = written {
            let link = if self.rank == 0 { frame.dest } else { 0 };
            let why = format!("write failed: {e}");
            self.mailbox.mark_down(link, why.clone());
            return Err(CommError::Disconnected(why));
        }
        if let Some(t) = self.transcript.as_mut() {
            t.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Reports a fatal error to the head (workers only; a no-op elsewhere).
    pub fn report_error(&mut self, message: &str) -> Result<()> {
        if let Links::Worker { .. } = self.links {
            let frame = MessageFrame::new(
                MsgType::Error,
                self.rank,
                NO_RANK,
                0,
                Payload::Bytes(message.as_bytes().to_vec()),
            );
            self.emit(&frame)?;
        }
        Ok(())
    }

    /// Reliable, FIFO-per-pair delivery of `payload` to `dest`.
    pub fn send(&mut self, dest: u32, tag: u32, payload: Payload) -> Result<()> {
        self.check_open()?;
        self.check_rank(dest)?;
        if dest == self.rank {
            return Err(CommError::SelfSend(dest));
        }
        let frame = MessageFrame::new(MsgType::Send, self.rank, dest, tag, payload);
        self.emit(&frame)
    }

    fn dead_link_for(&self, source: Source) -> impl Fn(&MailState) -> Option<String> {
        let (rank, size) = (self.rank, self.size);
        move |st: &MailState| match (rank, source) {
            (0, Source::Rank(r)) if r > 0 && r < size => st.down[r as usize].clone(),
            (0, Source::Rank(_)) => None,
            (0, Source::Any) => st.down.iter().skip(1).flatten().next().cloned(),
            (_, _) => st.down[0].clone(),
        }
    }

    fn recv_inner(
        &mut self,
        source: Source,
        tag: Tag,
        deadline: Option<Instant>,
    ) -> Result<Option<Envelope>> {
        self.check_open()?;
        if let Source::Rank(r) = source {
            self.check_rank(r)?;
            if r == self.rank {
                return Err(CommError::SelfSend(r));
            }
        }
        if self.size == 1 {
            // Nobody could ever send; waiting would hang forever.
            return Err(CommError::Disconnected("no peers in a world of one".into()));
        }
        let dead = self.dead_link_for(source);
        self.mailbox.wait_for(
            deadline,
            |st| {
                let pos = st.messages.iter().position(|e| e.matches(source, tag))?;
                st.messages.remove(pos)
            },
            dead,
        )
    }

    /// Blocks for the oldest queued message matching both filters.
    /// Non-matching messages stay queued for later receives.
    pub fn recv(&mut self, source: impl Into<Source>, tag: impl Into<Tag>) -> Result<Envelope> {
        let env = self.recv_inner(source.into(), tag.into(), None)?;
        Ok(env.expect("receive without deadline always yields a message"))
    }

    /// Like [`World::recv`] but gives up after `timeout`, returning `None`.
    pub fn recv_timeout(
        &mut self,
        source: impl Into<Source>,
        tag: impl Into<Tag>,
        timeout: Duration,
    ) -> Result<Option<Envelope>> {
        self.recv_inner(source.into(), tag.into(), Some(Instant::now() + timeout))
    }

    /// Number of received messages not yet consumed.
    pub fn pending(&self) -> usize {
        self.mailbox.lock().messages.len()
    }

    pub fn barrier(&mut self) -> Result<()> {
        self.check_open()?;
        match self.links {
            Links::Solo => Ok(()),
            Links::Head { .. } => {
                let need = self.size as usize - 1;
                let dead = self.dead_link_for(Source::Any);
                let mut seen = BTreeSet::new();
                self.mailbox.wait_for(
                    None,
                    |st| {
                        // Take at most one BARRIER per worker for this round.
                        while let Some(pos) = st.control.iter().position(|f| {
                            f.msg_type == MsgType::Barrier && !seen.contains(&f.source)
                        }) {
                            let f = st.control.remove(pos).unwrap();
                            seen.insert(f.source);
                        }
                        (seen.len() == need).then_some(())
                    },
                    dead,
                )?;
                for r in 1..self.size {
                    self.emit(&MessageFrame::control(MsgType::BarrierRelease, 0, r))?;
                }
                Ok(())
            }
            Links::Worker { .. } => {
                self.emit(&MessageFrame::control(MsgType::Barrier, self.rank, NO_RANK))?;
                self.wait_control(MsgType::BarrierRelease)
            }
        }
    }

    fn wait_control(&self, want: MsgType) -> Result<()> {
        let dead = self.dead_link_for(Source::Any);
        self.mailbox
            .wait_for(
                None,
                |st| {
                    let pos = st.control.iter().position(|f| f.msg_type == want)?;
                    st.control.remove(pos)
                },
                dead,
            )
            .map(|_| ())
    }

    /// Collective teardown. All ranks pass a final barrier (so every
    /// relayed message has been delivered), the head sends one SHUTDOWN to
    /// each worker, and sockets close. Errors on broken links are ignored.
    pub fn shutdown(&mut self) {
        if self.closed {
            return;
        }
        if let Err(e) = self.barrier() {
            debug!("rank {}: shutdown barrier failed: {e}", self.rank);
        }
        match &self.links {
            Links::Solo => {}
            Links::Head { .. } => {
                for r in 1..self.size {
                    if let Err(e) = self.emit(&MessageFrame::control(MsgType::Shutdown, 0, r)) {
                        debug!("SHUTDOWN to rank {r} failed: {e}");
                    }
                }
                // Workers close after SHUTDOWN; the readers then see EOF.
                self.join_readers(Some(Duration::from_secs(5)));
            }
            Links::Worker { .. } => {
                if let Err(e) = self.wait_control(MsgType::Shutdown) {
                    debug!("rank {}: no SHUTDOWN from head: {e}", self.rank);
                }
            }
        }
        self.close_sockets();
        self.join_readers(None);
        if let Some(t) = self.transcript.as_mut() {
            let _ = t.flush();
        }
        self.closed = true;
    }

    fn close_sockets(&self) {
        let close = |m: &Mutex<TcpStream>| {
            let _ = m
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .shutdown(Shutdown::Both);
        };
        match &self.links {
            Links::Solo => {}
            Links::Worker { head } => close(head),
            Links::Head { peers } => peers.iter().for_each(|p| close(&p.writer)),
        }
    }

    fn join_readers(&mut self, grace: Option<Duration>) {
        if let Some(grace) = grace {
            let deadline = Instant::now() + grace;
            while self.readers.iter().any(|h| !h.is_finished()) && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(1));
            }
            if self.readers.iter().any(|h| !h.is_finished()) {
                return;
            }
        }
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for World {
    fn drop(&mut self) {
        if !self.closed {
            self.close_sockets();
            self.join_readers(None);
        }
    }
}
