#![allow(dead_code)]

use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::Duration;

use mmpi::wire::{read_frame, write_frame, MessageFrame, MsgType, NO_RANK};
use mmpi::{worker_join, ClusterConfig, HeadListener, Payload, World};

pub fn bind_head(workers: u32) -> (HeadListener, String) {
    let head = HeadListener::bind(
        ClusterConfig::new("127.0.0.1:0", workers).with_timeout(Duration::from_secs(20)),
    )
    .unwrap();
    let addr = head
        .local_addr()
        .map_or_else(String::new, |a| a.to_string());
    (head, addr)
}

/// Builds a world of `n` ranks inside this process, one handle per rank,
/// indexed by rank.
pub fn world_of(n: u32) -> Vec<World> {
    let (head, addr) = bind_head(n - 1);
    let joins: Vec<_> = (1..n)
        .map(|_| {
            let addr = addr.clone();
            thread::spawn(move || worker_join(&ClusterConfig::new(addr, 0)).unwrap())
        })
        .collect();
    let mut worlds = vec![head.accept_workers().unwrap()];
    worlds.extend(joins.into_iter().map(|j| j.join().unwrap()));
    worlds.sort_by_key(|w| w.rank());
    worlds
}

/// Runs `f` on every rank of a fresh world concurrently, shuts each rank
/// down afterwards and returns the per-rank results in rank order.
pub fn run_world<T, F>(n: u32, f: F) -> Vec<T>
where
    T: Send + 'static,
    F: Fn(&mut World) -> T + Send + Sync + Clone + 'static,
{
    let handles: Vec<_> = world_of(n)
        .into_iter()
        .map(|mut w| {
            let f = f.clone();
            thread::spawn(move || {
                let out = f(&mut w);
                w.shutdown();
                out
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

/// A worker driven frame by frame, for checking exactly what crosses the wire.
pub struct RawWorker {
    pub stream: TcpStream,
    pub rank: u32,
    pub size: u32,
}

impl RawWorker {
    pub fn join(addr: SocketAddr) -> RawWorker {
        let mut stream = TcpStream::connect(addr).unwrap();
        write_frame(
            &mut stream,
            &MessageFrame::control(MsgType::Hello, NO_RANK, NO_RANK),
        )
        .unwrap();
        let welcome = read_frame(&mut stream).unwrap();
        assert_eq!(welcome.msg_type, MsgType::Welcome);
        let Payload::U64(v) = welcome.payload else {
            panic!("WELCOME payload {:?}", welcome.payload)
        };
        let start = read_frame(&mut stream).unwrap();
        assert_eq!(start.msg_type, MsgType::Start);
        RawWorker {
            stream,
            rank: v[0] as u32,
            size: v[1] as u32,
        }
    }

    pub fn send(&mut self, f: &MessageFrame) {
        write_frame(&mut self.stream, f).unwrap();
    }

    pub fn recv(&mut self) -> MessageFrame {
        read_frame(&mut self.stream).unwrap()
    }

    /// All frames until the head closes the connection.
    pub fn drain(&mut self) -> Vec<MessageFrame> {
        let mut out = Vec::new();
        while let Ok(f) = read_frame(&mut self.stream) {
            out.push(f);
        }
        out
    }
}

/// Sieve of Eratosthenes over [0, hi).
pub fn sieve(hi: u64) -> Vec<u64> {
    let hi = hi as usize;
    let mut composite = vec![false; hi];
    let mut out = Vec::new();
    for i in 2..hi {
        if !composite[i] {
            out.push(i as u64);
            let mut j = i * i;
            while j < hi {
                composite[j] = true;
                j += i;
            }
        }
    }
    out
}

/// Hits for the stream-concatenation oracle: rank r's points come from
/// seed + r, with the first `n % p` ranks drawing one extra point. Uses its
/// own LCG and hit test, not the library's.
pub fn concat_oracle_hits(n: u64, seed: u64, p: u64) -> u64 {
    let mut hits = 0;
    for r in 0..p {
        let share = n / p + u64::from(r < n % p);
        let mut s = seed.wrapping_add(r);
        let mut draw = || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / 9007199254740992.0
        };
        for _ in 0..share {
            let x = draw();
            let y = draw();
            if x * x + y * y <= 1.0 {
                hits += 1;
            }
        }
    }
    hits
}

/// A golden frame file: the frame described by its header comment plus the
/// exact bytes the encoder must produce.
pub struct Golden {
    pub name: String,
    pub frame: MessageFrame,
    pub bytes: Vec<u8>,
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn load_goldens() -> Vec<Golden> {
    let mut paths: Vec<_> = std::fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "hex"))
        .collect();
    paths.sort();
    paths.iter().map(|p| parse_golden(p)).collect()
}

fn parse_golden(path: &std::path::Path) -> Golden {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().strip_prefix("# ").unwrap();
    let field = |key: &str| {
        header
            .split(' ')
            .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .unwrap_or_else(|| panic!("{}: missing {key}", path.display()))
    };
    let msg_type = match field("type") {
        "HELLO" => MsgType::Hello,
        "WELCOME" => MsgType::Welcome,
        "START" => MsgType::Start,
        "SEND" => MsgType::Send,
        "BARRIER" => MsgType::Barrier,
        "BARRIER_RELEASE" => MsgType::BarrierRelease,
        "SHUTDOWN" => MsgType::Shutdown,
        "ERROR" => MsgType::Error,
        t => panic!("unknown type {t}"),
    };
    let values: Vec<&str> = field("values")
        .split(',')
        .filter(|s| !s.is_empty())
        .collect();
    let payload = match field("kind") {
        "EMPTY" => Payload::Empty,
        "BYTES" => Payload::Bytes(values.iter().map(|v| v.parse().unwrap()).collect()),
        "U64_ARRAY" => Payload::U64(values.iter().map(|v| v.parse().unwrap()).collect()),
        "F64_ARRAY" => Payload::F64(values.iter().map(|v| v.parse().unwrap()).collect()),
        k => panic!("unknown kind {k}"),
    };
    let bytes = lines
        .flat_map(|l| l.split_whitespace())
        .map(|b| u8::from_str_radix(b, 16).unwrap())
        .collect();
    Golden {
        name: path.file_stem().unwrap().to_string_lossy().into_owned(),
        frame: MessageFrame {
            msg_type,
            source: field("source").parse().unwrap(),
            dest: field("dest").parse().unwrap(),
            tag: field("tag").parse().unwrap(),
            payload,
        },
        bytes,
    }
}

pub fn vectors_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/vectors/kernel_vectors.csv")
}
