use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use log::error;

use mmpi::benchmarks::{
    estimate_pi_seq, generate_primes_seq, run_kernel, Kernel, KernelOutput, KernelSpec,
};
use mmpi::harness::{self, LaunchSettings, SweepSpec};
use mmpi::launcher::{self, LaunchSpec, WorkerMix, HEAD_ENV};
use mmpi::transport::{worker_join, ClusterConfig, HostsFile};

#[derive(Parser)]
#[command(
    name = "mmpi",
    version,
    about = "Miniature message-passing runtime and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start an N-process world and run one kernel in it.
    Launch {
        #[arg(long = "np")]
        nprocs: u32,
        #[arg(long)]
        hosts: Option<PathBuf>,
        #[arg(long, default_value = "native")]
        workers: WorkerMix,
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Command that starts an interpreted worker (default: $MMPI_PYWORKER or `pyworker`).
        #[arg(long)]
        pyworker: Option<String>,
        /// Seconds to wait for worker registration.
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
        /// Kernel and its arguments: `pi [n] [seed]` or `primes [lo] [hi]`.
        #[arg(last = true, required = true)]
        kernel: Vec<String>,
    },
    /// Join a running world as a worker (normally started by `launch`).
    Worker {
        /// Head address; $MMPI_HEAD takes precedence when set.
        #[arg(long)]
        head: Option<String>,
        /// Append the raw bytes of every frame this worker sends to a file.
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
        #[arg(last = true, required = true)]
        kernel: Vec<String>,
    },
    /// Sweep process counts and worker kinds, writing timing CSVs.
    Bench {
        #[arg(long)]
        kernel: Kernel,
        #[arg(long)]
        size: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "np", value_delimiter = ',', default_value = "1,2,4,8")]
        nprocs: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "native")]
        kinds: Vec<WorkerMix>,
        #[arg(long, default_value_t = 3)]
        reps: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        pyworker: Option<String>,
    },
    /// Run a kernel's sequential baseline in this process.
    Seq {
        #[arg(required = true)]
        kernel: Vec<String>,
    },
}

fn interpreter(arg: Option<String>) -> Vec<String> {
    arg.map(|s| s.split_whitespace().map(String::from).collect())
        .unwrap_or_else(launcher::default_interpreter)
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Cmd::Launch {
            nprocs,
            hosts,
            workers,
            port,
            pyworker,
            timeout,
            kernel,
        } => {
            let kernel = KernelSpec::parse_args(&kernel)?;
            let exe = std::env::current_exe().map_err(|e| e.to_string())?;
            let mut spec = LaunchSpec::new(nprocs, kernel, exe);
            spec.hosts = hosts.map(|p| HostsFile::load(&p)).transpose()?;
            spec.workers = workers;
            spec.head_port = port;
            spec.interpreter = interpreter(pyworker);
            spec.connect_timeout = Duration::from_secs_f64(timeout);
            let out = launcher::launch(&spec).map_err(|e| e.to_string())?;
            println!("{}", out.stdout);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Worker {
            head,
            transcript,
            timeout,
            kernel,
        } => {
            let head = std::env::var(HEAD_ENV)
                .ok()
                .filter(|s| !s.is_empty())
                .or(head)
                .ok_or_else(|| format!("no head address: pass --head or set {HEAD_ENV}"))?;
            let config = ClusterConfig::new(head, 0).with_timeout(Duration::from_secs_f64(timeout));
            let mut world = worker_join(&config).map_err(|e| e.to_string())?;
            if let Some(path) = transcript {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                world.record_transcript(Box::new(file));
            }
            let spec = match KernelSpec::parse_args(&kernel) {
                Ok(s) => s,
                Err(e) => {
                    let _ = world.report_error(&e);
                    return Err(e);
                }
            };
            run_kernel(&mut world, &spec).map_err(|e| e.to_string())?;
            world.shutdown();
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench {
            kernel,
            size,
            seed,
            nprocs,
            kinds,
            reps,
            out,
            summary,
            pyworker,
        } => {
            let spec = SweepSpec {
                kernel,
                problem_size: size,
                seed,
                nprocs,
                kinds,
                repetitions: reps,
            };
            let exe = std::env::current_exe().map_err(|e| e.to_string())?;
            let mut settings = LaunchSettings::new(exe);
            settings.interpreter = interpreter(pyworker);
            let results = harness::run_sweep(&spec, &settings);
            harness::emit_results_csv(&out, &results).map_err(|e| e.to_string())?;
            if let Some(path) = summary {
                let rows = harness::summarize(&results).map_err(|e| e.to_string())?;
                harness::emit_summary_csv(&path, &rows).map_err(|e| e.to_string())?;
            }
            let failed = results.iter().filter(|r| !r.is_ok()).count();
            if failed > 0 {
                error!("{failed} of {} cells failed", results.len());
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Seq { kernel } => {
            let out = match KernelSpec::parse_args(&kernel)? {
                KernelSpec::Pi { n, seed } => {
                    KernelOutput::Pi(estimate_pi_seq(n, seed).map_err(|e| e.to_string())?)
                }
                KernelSpec::Primes { lo, hi } => {
                    KernelOutput::Primes(generate_primes_seq(lo, hi).map_err(|e| e.to_string())?)
                }
            };
            println!("{}", out.summary_line());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mmpi: {e}");
            ExitCode::from(2)
        }
    }
}
