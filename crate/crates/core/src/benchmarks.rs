//! The two benchmark kernels, Monte Carlo pi estimation and partitioned
//! prime generation, in parallel and sequential form.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::collectives::Scalar;
use crate::error::CommError;
use crate::transport::World;
use crate::wire::Payload;

pub const LCG_MULTIPLIER: u64 = 6364136223846793005;
pub const LCG_INCREMENT: u64 = 1442695040888963407;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("cannot estimate pi from zero samples")]
    EmptySampleSet,
    #[error("rank {rank} is outside a world of size {size}")]
    InvalidRank { rank: u32, size: u32 },
    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: u64, hi: u64 },
    #[error("malformed kernel parameters: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Comm(#[from] CommError),
}

/// 64-bit linear congruential generator (Knuth MMIX constants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState(pub u64);

impl RngState {
    pub fn next_u64(&mut self) -> u64 {
        let (s, out) = lcg_next(*self);
        *self = s;
        out
    }

    pub fn next_unit(&mut self) -> f64 {
        unit_float(self.next_u64())
    }
}

pub fn lcg_next(s: RngState) -> (RngState, u64) {
    let next = s.0.wrapping_mul(LCG_MULTIPLIER).wrapping_add(LCG_INCREMENT);
    (RngState(next), next)
}

/// Top 53 bits scaled into [0, 1); exact in binary64.
pub fn unit_float(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counts first-quadrant samples with x² + y² ≤ 1 over `n` trials, drawing
/// x then y from the stream seeded with `seed`.
pub fn mc_hits(n: u64, seed: u64) -> u64 {
    let mut rng = RngState(seed);
    let mut hits = 0;
    for _ in 0..n {
        let x = rng.next_unit();
        let y = rng.next_unit();
        if x * x + y * y <= 1.0 {
            hits += 1;
        }
    }
    hits
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiEstimate {
    pub hits: u64,
    pub tries: u64,
    pub estimate: f64,
}

impl PiEstimate {
    pub fn from_counts(hits: u64, tries: u64) -> Result<Self, KernelError> {
        if tries == 0 {
            return Err(KernelError::EmptySampleSet);
        }
        debug_assert!(hits <= tries);
        Ok(PiEstimate {
            hits,
            tries,
            estimate: 4.0 * hits as f64 / tries as f64,
        })
    }
}

/// Samples assigned to `rank`: an even split, with the first
/// `n_total % size` ranks taking one extra.
pub fn pi_share(n_total: u64, size: u32, rank: u32) -> u64 {
    let size = size as u64;
    n_total / size + u64::from((rank as u64) < n_total % size)
}

pub fn estimate_pi_seq(n: u64, seed: u64) -> Result<PiEstimate, KernelError> {
    PiEstimate::from_counts(mc_hits(n, seed), n)
}

/// Collective. Rank `r` samples `pi_share(r)` points from seed
/// `base_seed + r`; hits and tries are summed at rank 0, which alone
/// returns the estimate. Parameters on non-root ranks are ignored.
pub fn estimate_pi_parallel(
    world: &mut World,
    n_total: u64,
    base_seed: u64,
) -> Result<Option<PiEstimate>, KernelError> {
    let params = world.broadcast(0, root_only(world, Payload::U64(vec![n_total, base_seed])))?;
    let [n_total, base_seed] = two_words(&params)?;
    let (rank, size) = (world.rank(), world.size());
    let tries = pi_share(n_total, size, rank);
    let hits = mc_hits(tries, base_seed.wrapping_add(rank as u64));
    let hits = world.reduce_sum(0, Scalar::U64(hits))?;
    let tries = world.reduce_sum(0, Scalar::U64(tries))?;
    match (hits, tries) {
        (Some(Scalar::U64(h)), Some(Scalar::U64(t))) => PiEstimate::from_counts(h, t).map(Some),
        _ => Ok(None),
    }
}

/// Half-open `[start, end)` slice of a prime search range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangePartition {
    pub start: u64,
    pub end: u64,
}

impl RangePartition {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Rank `r` gets `[lo + r·chunk, lo + (r+1)·chunk)` with
/// `chunk = ⌊(hi − lo) / world_size⌋`; the last rank also takes the remainder.
pub fn partition_range(
    lo: u64,
    hi: u64,
    world_size: u32,
    rank: u32,
) -> Result<RangePartition, KernelError> {
    if lo > hi {
        return Err(KernelError::InvalidRange { lo, hi });
    }
    if rank >= world_size {
        return Err(KernelError::InvalidRank {
            rank,
            size: world_size,
        });
    }
    let chunk = (hi - lo) / world_size as u64;
    let start = lo + rank as u64 * chunk;
    let end = if rank == world_size - 1 {
        hi
    } else {
        start + chunk
    };
    Ok(RangePartition { start, end })
}

/// Trial division by every d in [2, ⌊√n⌋].
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2u64;
    while d <= n / d {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

pub fn primes_in_range(p: RangePartition) -> Vec<u64> {
    (p.start..p.end).filter(|&n| is_prime(n)).collect()
}

pub fn generate_primes_seq(lo: u64, hi: u64) -> Result<Vec<u64>, KernelError> {
    Ok(primes_in_range(partition_range(lo, hi, 1, 0)?))
}

/// Collective. Each rank searches its partition of `[lo, hi)`; rank 0
/// gathers the lists and concatenates them in rank order, which is already
/// ascending.
pub fn generate_primes_parallel(
    world: &mut World,
    lo: u64,
    hi: u64,
) -> Result<Option<Vec<u64>>, KernelError> {
    let params = world.broadcast(0, root_only(world, Payload::U64(vec![lo, hi])))?;
    let [lo, hi] = two_words(&params)?;
    let part = partition_range(lo, hi, world.size(), world.rank())?;
    let mine = Payload::U64(primes_in_range(part));
    let Some(lists) = world.gather(0, mine)? else {
        return Ok(None);
    };
    let mut all = Vec::new();
    for p in lists {
        match p {
            Payload::U64(v) => all.extend(v),
            other => {
                return Err(KernelError::BadParameters(format!(
                    "gathered {:?} payload, expected U64_ARRAY",
                    other.kind()
                )))
            }
        }
    }
    Ok(Some(all))
}

fn root_only(world: &World, p: Payload) -> Payload {
    if world.is_root() {
        p
    } else {
        Payload::Empty
    }
}

fn two_words(p: &Payload) -> Result<[u64; 2], KernelError> {
    match p {
        Payload::U64(v) if v.len() == 2 => Ok([v[0], v[1]]),
        other => Err(KernelError::BadParameters(format!("{other:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    Pi,
    Primes,
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Pi => "pi",
            Kernel::Primes => "primes",
        })
    }
}

impl FromStr for Kernel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pi" => Ok(Kernel::Pi),
            "primes" => Ok(Kernel::Primes),
            other => Err(format!("unknown kernel: {other}")),
        }
    }
}

/// A kernel plus its parameters: `pi <n> <seed>` or `primes <lo> <hi>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSpec {
    Pi { n: u64, seed: u64 },
    Primes { lo: u64, hi: u64 },
}

impl KernelSpec {
    pub fn kernel(&self) -> Kernel {
        match self {
            KernelSpec::Pi { .. } => Kernel::Pi,
            KernelSpec::Primes { .. } => Kernel::Primes,
        }
    }

    /// Problem size as reported in benchmark tables.
    pub fn problem_size(&self) -> u64 {
        match *self {
            KernelSpec::Pi { n, .. } => n,
            KernelSpec::Primes { lo, hi } => hi - lo,
        }
    }

    /// Parses `<kernel> [a] [b]`; missing numbers take the defaults
    /// (pi: 1000000 42, primes: 0 20000).
    pub fn parse_args<S: AsRef<str>>(args: &[S]) -> Result<Self, String> {
        let (name, rest) = args.split_first().ok_or("missing kernel name")?;
        let kernel: Kernel = name.as_ref().parse()?;
        if rest.len() > 2 {
            return Err(format!("{kernel} takes at most two arguments"));
        }
        let num = |i: usize, default: u64| -> Result<u64, String> {
            rest.get(i).map_or(Ok(default), |s| {
                let s = s.as_ref().replace('_', "");
                s.parse()
                    .map_err(|_| format!("{kernel}: {s:?} is not a non-negative integer"))
            })
        };
        Ok(match kernel {
            Kernel::Pi => KernelSpec::Pi {
                n: num(0, 1_000_000)?,
                seed: num(1, 42)?,
            },
            Kernel::Primes => {
                let (lo, hi) = (num(0, 0)?, num(1, 20_000)?);
                if lo > hi {
                    return Err(format!("primes: lo {lo} > hi {hi}"));
                }
                KernelSpec::Primes { lo, hi }
            }
        })
    }

    pub fn to_args(&self) -> Vec<String> {
        match *self {
            KernelSpec::Pi { n, seed } => vec!["pi".into(), n.to_string(), seed.to_string()],
            KernelSpec::Primes { lo, hi } => vec!["primes".into(), lo.to_string(), hi.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelOutput {
    Pi(PiEstimate),
    Primes(Vec<u64>),
}

impl KernelOutput {
    /// Bytes the result digest is computed over: `hits ‖ tries` for pi, the
    /// prime list for primes, each value as u64 big-endian.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        match self {
            KernelOutput::Pi(e) => [e.hits, e.tries]
                .iter()
                .flat_map(|v| v.to_be_bytes())
                .collect(),
            KernelOutput::Primes(v) => v.iter().flat_map(|p| p.to_be_bytes()).collect(),
        }
    }

    /// One-line human summary printed by rank 0.
    pub fn summary_line(&self) -> String {
        match self {
            KernelOutput::Pi(e) => format!(
                "pi hits={} tries={} estimate={:.10}",
                e.hits, e.tries, e.estimate
            ),
            KernelOutput::Primes(v) => format!(
                "primes count={} first={} last={}",
                v.len(),
                v.first().map_or("-".into(), u64::to_string),
                v.last().map_or("-".into(), u64::to_string)
            ),
        }
    }
}

/// Outcome of one barrier-delimited kernel execution on this rank.
#[derive(Debug, Clone)]
pub struct KernelRun {
    /// Present on rank 0 only.
    pub output: Option<KernelOutput>,
    pub compute_seconds: f64,
}

/// Runs `spec` collectively between two barriers and times the window.
pub fn run_kernel(world: &mut World, spec: &KernelSpec) -> Result<KernelRun, KernelError> {
    world.barrier()?;
    let t0 = Instant::now();
    let output = match *spec {
        KernelSpec::Pi { n, seed } => estimate_pi_parallel(world, n, seed)?.map(KernelOutput::Pi),
        KernelSpec::Primes { lo, hi } => {
            generate_primes_parallel(world, lo, hi)?.map(KernelOutput::Primes)
        }
    };
    world.barrier()?;
    Ok(KernelRun {
        output,
        compute_seconds: t0.elapsed().as_secs_f64(),
    })
}
