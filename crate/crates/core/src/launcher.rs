//! Starts an N-process world: rank 0 runs in the calling process, workers
//! are spawned as local subprocesses or through a remote-exec template from
//! the hosts file.

use std::collections::HashMap;
use std::env;
use std::fmt;
use std::io;
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::benchmarks::{run_kernel, KernelError, KernelOutput, KernelSpec};
use crate::error::CommError;
use crate::transport::{
    ClusterConfig, HeadListener, HostEntry, HostsFile, DEFAULT_CONNECT_TIMEOUT,
};

/// Environment variable naming the head address a worker connects to.
pub const HEAD_ENV: &str = "MMPI_HEAD";
/// Environment variable with the command that starts an interpreted worker.
pub const PYWORKER_ENV: &str = "MMPI_PYWORKER";
pub const DEFAULT_PYWORKER: &str = "pyworker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorkerKind {
    Native,
    Interpreted,
}

/// How worker slots are filled across a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorkerMix {
    Native,
    Interpreted,
    /// Odd ranks interpreted, even ranks native (rank 0 is always native).
    Mixed,
}

impl WorkerMix {
    pub fn kind_for_rank(self, rank: u32) -> WorkerKind {
        match self {
            WorkerMix::Native => WorkerKind::Native,
            WorkerMix::Interpreted => WorkerKind::Interpreted,
            WorkerMix::Mixed if rank % 2 == 1 => WorkerKind::Interpreted,
            WorkerMix::Mixed => WorkerKind::Native,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WorkerMix::Native => "native",
            WorkerMix::Interpreted => "interpreted",
            WorkerMix::Mixed => "mixed",
        }
    }
}

impl fmt::Display for WorkerMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkerMix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(WorkerMix::Native),
            "interpreted" => Ok(WorkerMix::Interpreted),
            "mixed" => Ok(WorkerMix::Mixed),
            other => Err(format!("unknown worker kind: {other}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("invalid launch: {0}")]
    InvalidSpec(String),
    #[error("failed to spawn rank {rank} ({command}): {source}")]
    SpawnFailure {
        rank: u32,
        command: String,
        source: io::Error,
    },
    #[error("rank {rank} exited with {status}")]
    NonzeroWorkerExit { rank: u32, status: ExitStatus },
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Everything needed to start one world and run one kernel in it.
#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub nprocs: u32,
    pub hosts: Option<HostsFile>,
    pub workers: WorkerMix,
    /// Port the head listens on; 0 picks a free one.
    pub head_port: u16,
    pub kernel: KernelSpec,
    /// Binary run as `<exe> worker --head <addr> -- <kernel args>`.
    pub native_exe: PathBuf,
    /// Command prefix run as `<cmd...> --head <addr> -- <kernel args>`.
    pub interpreter: Vec<String>,
    pub connect_timeout: Duration,
}

impl LaunchSpec {
    pub fn new(nprocs: u32, kernel: KernelSpec, native_exe: impl Into<PathBuf>) -> Self {
        LaunchSpec {
            nprocs,
            hosts: None,
            workers: WorkerMix::Native,
            head_port: 0,
            kernel,
            native_exe: native_exe.into(),
            interpreter: default_interpreter(),
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }
}

/// `$MMPI_PYWORKER` split on whitespace, or `pyworker`.
pub fn default_interpreter() -> Vec<String> {
    env::var(PYWORKER_ENV)
        .ok()
        .map(|s| s.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|v| !v.is_empty())
        .unwrap_or_else(|| vec![DEFAULT_PYWORKER.to_string()])
}

#[derive(Debug, Clone)]
pub struct LaunchOutcome {
    pub output: KernelOutput,
    /// Barrier-to-barrier kernel time measured at rank 0.
    pub compute_seconds: f64,
    /// The line rank 0 prints.
    pub stdout: String,
}

/// Spawned workers; any still running when this drops are killed and reaped.
struct Workers(Vec<(u32, Child)>);

impl Workers {
    fn first_failure(&mut self) -> Option<String> {
        self.0.iter_mut().find_map(|(rank, c)| match c.try_wait() {
            Ok(Some(status)) if !status.success() => {
                Some(format!("rank {rank} exited with {status}"))
            }
            _ => None,
        })
    }

    /// Waits for every worker, killing stragglers after `grace`.
    fn wait_all(&mut self, grace: Duration) -> Result<(), LaunchError> {
        let deadline = Instant::now() + grace;
        let mut failure = None;
        for (rank, child) in self.0.iter_mut() {
            let status = loop {
                match child.try_wait() {
                    Ok(Some(s)) => break Some(s),
                    Ok(None) if Instant::now() < deadline => {
                        thread::sleep(Duration::from_millis(2))
                    }
                    Ok(None) => {
                        warn!("rank {rank} did not exit in time, killing it");
                        let _ = child.kill();
                        break child.wait().ok();
                    }
                    Err(e) => {
                        warn!("cannot wait for rank {rank}: {e}");
                        break None;
                    }
                }
            };
            if let Some(status) = status.filter(|s| !s.success()) {
                failure.get_or_insert(LaunchError::NonzeroWorkerExit {
                    rank: *rank,
                    status,
                });
            }
        }
        self.0.clear();
        failure.map_or(Ok(()), Err)
    }
}

impl Drop for Workers {
    fn drop(&mut self) {
        for (rank, child) in self.0.iter_mut() {
            if let Ok(None) = child.try_wait() {
                debug!("tearing down rank {rank}");
                let _ = child.kill();
            }
            let _ = child.wait();
        }
    }
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_./:=,@%+".contains(c))
    {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

fn worker_argv(spec: &LaunchSpec, kind: WorkerKind, head: &str) -> Vec<String> {
    let mut argv = match kind {
        WorkerKind::Native => vec![
            spec.native_exe.to_string_lossy().into_owned(),
            "worker".to_string(),
        ],
        WorkerKind::Interpreted => spec.interpreter.clone(),
    };
    argv.extend(["--head".to_string(), head.to_string(), "--".to_string()]);
    argv.extend(spec.kernel.to_args());
    argv
}

/// Expands `{host}`, `{port}` and `{cmd}` in a remote-exec template.
pub fn expand_template(template: &str, host: &HostEntry, argv: &[String]) -> String {
    let cmd = argv
        .iter()
        .map(|a| shell_quote(a))
        .collect::<Vec<_>>()
        .join(" ");
    let vars: HashMap<&str, String> = [
        ("host", host.host.clone()),
        ("port", host.port.map_or(String::new(), |p| p.to_string())),
        ("cmd", cmd),
    ]
    .into();
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), &v);
    }
    out
}

fn spawn_worker(
    spec: &LaunchSpec,
    rank: u32,
    host: Option<&HostEntry>,
    head: &str,
) -> Result<Child, LaunchError> {
    let argv = worker_argv(spec, spec.workers.kind_for_rank(rank), head);
    let mut cmd = match host.filter(|h| !h.is_local()) {
        None => {
            let mut c = Command::new(&argv[0]);
            c.args(&argv[1..]);
            c
        }
        Some(h) => {
            let template = spec
                .hosts
                .as_ref()
                .and_then(|hf| hf.exec_template.as_deref())
                .ok_or_else(|| {
                    LaunchError::InvalidSpec(format!(
                        "host {} is remote but the hosts file has no `exec:` template",
                        h.host
                    ))
                })?;
            let line = expand_template(template, h, &argv);
            let mut c = Command::new("sh");
            c.arg("-c").arg(line);
            c
        }
    };
    // Workers inherit stderr for diagnostics; only rank 0 reports results.
    cmd.stdin(Stdio::null()).stdout(Stdio::null());
    debug!("spawning rank {rank}: {cmd:?}");
    cmd.spawn().map_err(|source| LaunchError::SpawnFailure {
        rank,
        command: argv.join(" "),
        source,
    })
}

/// Starts the world, runs the kernel, tears everything down and returns
/// rank 0's result. No worker process outlives this call.
pub fn launch(spec: &LaunchSpec) -> Result<LaunchOutcome, LaunchError> {
    if spec.nprocs == 0 {
        return Err(LaunchError::InvalidSpec("nprocs must be at least 1".into()));
    }
    let nworkers = spec.nprocs - 1;
    let remote = spec
        .hosts
        .as_ref()
        .is_some_and(|hf| hf.entries.iter().any(|e| !e.is_local()));
    if let Some(hf) = &spec.hosts {
        if hf.total_slots() < nworkers {
            return Err(LaunchError::InvalidSpec(format!(
                "hosts file has {} slots but {nworkers} workers were requested",
                hf.total_slots()
            )));
        }
    }

    let bind_host = if remote { "0.0.0.0" } else { "127.0.0.1" };
    let config = ClusterConfig {
        head_address: format!("{bind_host}:{}", spec.head_port),
        expected_workers: nworkers,
        connect_timeout: spec.connect_timeout,
        hosts: spec.hosts.clone(),
    };
    let listener = HeadListener::bind(config)?;

    let mut workers = Workers(Vec::with_capacity(nworkers as usize));
    if let Some(addr) = listener.local_addr() {
        let advertised = match env::var(HEAD_ENV) {
            Ok(a) if !a.is_empty() => a,
            _ if remote => {
                return Err(LaunchError::InvalidSpec(format!(
                    "set {HEAD_ENV} to a head address reachable from the remote hosts"
                )))
            }
            _ => addr.to_string(),
        };
        let mut hosts = spec.hosts.as_ref().map(|hf| hf.slot_hosts());
        for rank in 1..=nworkers {
            let host = hosts.as_mut().and_then(|h| h.next());
            workers
                .0
                .push((rank, spawn_worker(spec, rank, host, &advertised)?));
        }
        info!("spawned {nworkers} workers, head at {advertised}");
    }

    let mut world = listener.accept_workers_or_abort(|| workers.first_failure())?;
    let run = run_kernel(&mut world, &spec.kernel);
    if run.is_ok() {
        world.shutdown();
    }
    drop(world);
    let run = run?;
    workers.wait_all(Duration::from_secs(10))?;

    let output = run.output.expect("rank 0 always holds the kernel output");
    Ok(LaunchOutcome {
        stdout: output.summary_line(),
        output,
        compute_seconds: run.compute_seconds,
    })
}
