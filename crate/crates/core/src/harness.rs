//! Benchmark sweeps over process counts and worker kinds, with median
//! speedup/efficiency summaries and CSV output.
//!
//! Each cell is one launch. Two times are recorded: total wall time around
//! the whole launch (spawn, registration, teardown) and the compute window
//! between the barriers that bracket the kernel on rank 0. Speedup and
//! efficiency use the compute window.

use std::collections::BTreeMap;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use thiserror::Error;

use crate::benchmarks::{Kernel, KernelOutput, KernelSpec};
use crate::launcher::{default_interpreter, launch, LaunchSpec, WorkerMix};
use crate::transport::DEFAULT_CONNECT_TIMEOUT;

pub const RAW_HEADER: [&str; 8] = [
    "kernel",
    "nprocs",
    "worker_kind",
    "problem_size",
    "repetition",
    "total_wall_s",
    "compute_wall_s",
    "result_digest",
];

pub const SUMMARY_HEADER: [&str; 6] = [
    "kernel",
    "nprocs",
    "worker_kind",
    "median_compute_s",
    "speedup",
    "efficiency",
];

/// Written in the digest column for a cell whose launch failed.
pub const ERROR_MARKER: &str = "ERROR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no successful nprocs=1 baseline for {kernel}/{kind}")]
    MissingBaseline { kernel: Kernel, kind: WorkerMix },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

pub fn result_digest(output: &KernelOutput) -> u64 {
    fnv1a64(&output.canonical_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub kernel: Kernel,
    pub nprocs: u32,
    pub worker_kind: WorkerMix,
    pub problem_size: u64,
    pub total_wall_seconds: f64,
    pub compute_wall_seconds: f64,
    /// `None` when the cell failed; see `error`.
    pub result_digest: Option<u64>,
    pub repetition_index: u32,
    pub error: Option<String>,
}

impl BenchmarkResult {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn sort_key(&self) -> (Kernel, WorkerMix, u32, u32) {
        (
            self.kernel,
            self.worker_kind,
            self.nprocs,
            self.repetition_index,
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub kernel: Kernel,
    pub problem_size: u64,
    pub seed: u64,
    pub nprocs: Vec<u32>,
    pub kinds: Vec<WorkerMix>,
    pub repetitions: u32,
}

impl SweepSpec {
    /// The kernel invocation for this sweep: pi samples `problem_size`
    /// points, primes searches `[0, problem_size)`.
    pub fn kernel_spec(&self) -> KernelSpec {
        match self.kernel {
            Kernel::Pi => KernelSpec::Pi {
                n: self.problem_size,
                seed: self.seed,
            },
            Kernel::Primes => KernelSpec::Primes {
                lo: 0,
                hi: self.problem_size,
            },
        }
    }
}

/// Process-level settings shared by every cell of a sweep.
#[derive(Debug, Clone)]
pub struct LaunchSettings {
    pub native_exe: PathBuf,
    pub interpreter: Vec<String>,
    pub head_port: u16,
    pub connect_timeout: Duration,
}

impl LaunchSettings {
    pub fn new(native_exe: impl Into<PathBuf>) -> Self {
        LaunchSettings {
            native_exe: native_exe.into(),
            interpreter: default_interpreter(),
            head_port: 0,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }
}

/// Runs every (nprocs, kind, repetition) cell strictly one after another.
/// Failed cells are kept, with `error` set.
pub fn run_sweep(spec: &SweepSpec, settings: &LaunchSettings) -> Vec<BenchmarkResult> {
    let kernel = spec.kernel_spec();
    let mut rows = Vec::new();
    for &kind in &spec.kinds {
        for &nprocs in &spec.nprocs {
            for rep in 0..spec.repetitions {
                let launch_spec = LaunchSpec {
                    nprocs,
                    hosts: None,
                    workers: kind,
                    head_port: settings.head_port,
                    kernel,
                    native_exe: settings.native_exe.clone(),
                    interpreter: settings.interpreter.clone(),
                    connect_timeout: settings.connect_timeout,
                };
                let t0 = Instant::now();
                let outcome = launch(&launch_spec);
                let total = t0.elapsed().as_secs_f64();
                let mut row = BenchmarkResult {
                    kernel: spec.kernel,
                    nprocs,
                    worker_kind: kind,
                    problem_size: spec.problem_size,
                    total_wall_seconds: total,
                    compute_wall_seconds: f64::NAN,
                    result_digest: None,
                    repetition_index: rep,
                    error: None,
                };
                match outcome {
                    Ok(out) => {
                        row.compute_wall_seconds = out.compute_seconds;
                        row.result_digest = Some(result_digest(&out.output));
                        info!(
                            "{} np={nprocs} {kind} rep={rep}: compute {:.4}s total {total:.4}s",
                            spec.kernel, out.compute_seconds
                        );
                    }
                    Err(e) => {
                        warn!("{} np={nprocs} {kind} rep={rep} failed: {e}", spec.kernel);
                        row.error = Some(e.to_string());
                    }
                }
                rows.push(row);
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub kernel: Kernel,
    pub nprocs: u32,
    pub worker_kind: WorkerMix,
    pub median_compute_seconds: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty set");
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Median compute time per (kernel, kind, nprocs) cell over successful
/// repetitions; speedup(P) = median(1) / median(P), efficiency = speedup / P.
pub fn summarize(results: &[BenchmarkResult]) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut cells: BTreeMap<(Kernel, WorkerMix, u32), Vec<f64>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.is_ok()) {
        cells
            .entry((r.kernel, r.worker_kind, r.nprocs))
            .or_default()
            .push(r.compute_wall_seconds);
    }
    let medians: BTreeMap<_, f64> = cells
        .into_iter()
        .map(|(k, mut v)| (k, median(&mut v)))
        .collect();
    medians
        .iter()
        .map(|(&(kernel, kind, nprocs), &m)| {
            let base = medians
                .get(&(kernel, kind, 1))
                .ok_or(HarnessError::MissingBaseline { kernel, kind })?;
            let speedup = base / m;
            Ok(SummaryRow {
                kernel,
                nprocs,
                worker_kind: kind,
                median_compute_seconds: m,
                speedup,
                efficiency: speedup / nprocs as f64,
            })
        })
        .collect()
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros trimmed,
/// scientific notation outside [1e-4, 1e6).
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    }
}

fn sorted(results: &[BenchmarkResult]) -> Vec<&BenchmarkResult> {
    let mut rows: Vec<_> = results.iter().collect();
    rows.sort_by_key(|r| r.sort_key());
    rows
}

pub fn write_results_csv<W: io::Write>(
    out: W,
    results: &[BenchmarkResult],
) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(RAW_HEADER)?;
    for r in sorted(results) {
        w.write_record([
            r.kernel.to_string(),
            r.nprocs.to_string(),
            r.worker_kind.to_string(),
            r.problem_size.to_string(),
            r.repetition_index.to_string(),
            format_sig6(r.total_wall_seconds),
            format_sig6(r.compute_wall_seconds),
            r.result_digest
                .map_or(ERROR_MARKER.to_string(), |d| format!("{d:016x}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: io::Write>(out: W, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    let mut rows: Vec<_> = rows.iter().collect();
    rows.sort_by_key(|r| (r.kernel, r.worker_kind, r.nprocs));
    for r in rows {
        w.write_record([
            r.kernel.to_string(),
            r.nprocs.to_string(),
            r.worker_kind.to_string(),
            format_sig6(r.median_compute_seconds),
            format_sig6(r.speedup),
            format_sig6(r.efficiency),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_results_csv(path: &Path, results: &[BenchmarkResult]) -> Result<(), HarnessError> {
    write_results_csv(File::create(path)?, results)
}

pub fn emit_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    write_summary_csv(File::create(path)?, rows)
}

/// True when every successful row sharing (kernel, problem_size) has the
/// same digest. Pi draws from one stream per rank, so its result also
/// depends on the world size; pi rows are compared only within one nprocs.
pub fn digests_consistent(results: &[BenchmarkResult]) -> bool {
    let mut seen: BTreeMap<(Kernel, u64, Option<u32>), u64> = BTreeMap::new();
    results
        .iter()
        .filter_map(|r| Some((r, r.result_digest?)))
        .all(|(r, d)| {
            let nprocs = (r.kernel == Kernel::Pi).then_some(r.nprocs);
            *seen.entry((r.kernel, r.problem_size, nprocs)).or_insert(d) == d
        })
}
