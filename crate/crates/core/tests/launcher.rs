mod common;

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use common::{bind_head, sieve};
use mmpi::benchmarks::{estimate_pi_seq, KernelOutput, KernelSpec};
use mmpi::launcher::{launch, LaunchSpec, WorkerMix};
use mmpi::CommError;

const EXE: &str = env!("CARGO_BIN_EXE_mmpi");

fn mmpi(args: &[&str]) -> Output {
    Command::new(EXE)
        .args(args)
        .env_remove("MMPI_HEAD")
        .env_remove("MMPI_PYWORKER")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Live `mmpi worker` processes whose arguments mention `marker`.
fn survivors(marker: &str) -> Vec<String> {
    let mut found = Vec::new();
    for entry in fs::read_dir("/proc").unwrap().flatten() {
        let Ok(raw) = fs::read(entry.path().join("cmdline")) else {
            continue;
        };
        let argv: Vec<_> = raw
            .split(|&b| b == 0)
            .map(String::from_utf8_lossy)
            .collect();
        if argv.first().is_some_and(|a| a == EXE)
            && argv.get(1).is_some_and(|a| a == "worker")
            && argv.iter().any(|a| a == marker)
        {
            found.push(argv.join(" "));
        }
    }
    found
}

/// A stand-in for the interpreted worker: a script with the same CLI shape
/// (`<cmd> --head addr -- kernel args`) that execs the native worker,
/// optionally recording a frame transcript.
fn stand_in(dir: &Path, transcript: Option<&Path>) -> PathBuf {
    let path = dir.join("fake-pyworker");
    let record = transcript.map_or(String::new(), |t| {
        format!("--transcript '{}' ", t.display())
    });
    fs::write(
        &path,
        format!("#!/bin/sh\nexec '{EXE}' worker {record}\"$@\"\n"),
    )
    .unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn read_hex(path: &Path) -> Vec<u8> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .map(|b| u8::from_str_radix(b, 16).unwrap())
        .collect()
}

fn transcript_oracle(name: &str) -> Vec<u8> {
    read_hex(&Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("tests/transcripts/{name}.hex")))
}

#[test]
fn cli_launch_pi_four_processes() {
    let out = mmpi(&["launch", "--np", "4", "--", "pi", "100000", "42"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1, "{text}");
    let line = text.trim();
    assert!(
        line.starts_with("pi hits=") && line.contains("tries=100000"),
        "{line}"
    );
}

#[test]
fn cli_launch_primes_matches_seq() {
    let par = mmpi(&["launch", "--np", "3", "--", "primes", "0", "20000"]);
    let seq = mmpi(&["seq", "primes", "0", "20000"]);
    assert!(par.status.success() && seq.status.success());
    assert_eq!(stdout(&par), stdout(&seq));
    assert_eq!(stdout(&seq).trim(), "primes count=2262 first=2 last=19997");
}

#[test]
fn single_rank_pi_equals_sequential() {
    let spec = LaunchSpec::new(1, KernelSpec::Pi { n: 50_000, seed: 3 }, EXE);
    let out = launch(&spec).unwrap();
    assert_eq!(
        out.output,
        KernelOutput::Pi(estimate_pi_seq(50_000, 3).unwrap())
    );
}

#[test]
fn no_workers_outlive_the_launch() {
    let marker = "918273645";
    let out = mmpi(&["launch", "--np", "4", "--", "pi", "20000", marker]);
    assert!(out.status.success());
    assert_eq!(survivors(marker), Vec::<String>::new());
}

#[test]
fn failed_launch_leaves_no_workers() {
    // A worker that can never reach the head: registration times out and
    // the launcher must reap the one that did start.
    let marker = "192837465";
    let out = Command::new(EXE)
        .args([
            "launch",
            "--np",
            "3",
            "--workers",
            "mixed",
            "--pyworker",
            "/nonexistent/py",
        ])
        .args(["--timeout", "3", "--", "pi", "1000", marker])
        .env_remove("MMPI_HEAD")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(survivors(marker), Vec::<String>::new());
}

#[test]
fn mixed_world_matches_native() {
    let dir = tempfile::tempdir().unwrap();
    let py = stand_in(dir.path(), None);
    for kernel in [
        KernelSpec::Primes { lo: 0, hi: 20_000 },
        KernelSpec::Pi {
            n: 200_000,
            seed: 11,
        },
    ] {
        let mut native = LaunchSpec::new(4, kernel, EXE);
        native.workers = WorkerMix::Native;
        let mut mixed = native.clone();
        mixed.workers = WorkerMix::Mixed;
        mixed.interpreter = vec![py.to_string_lossy().into_owned()];
        let a = launch(&native).unwrap();
        let b = launch(&mixed).unwrap();
        assert_eq!(a.output, b.output);
        if let KernelOutput::Primes(v) = &a.output {
            assert_eq!(v, &sieve(20_000));
        }
    }
}

/// Frames sent by rank 1 of a two-process world, recorded by the worker.
fn recorded_transcript(kernel: KernelSpec) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frames.bin");
    let py = stand_in(dir.path(), Some(&path));
    let mut spec = LaunchSpec::new(2, kernel, EXE);
    spec.workers = WorkerMix::Interpreted;
    spec.interpreter = vec![py.to_string_lossy().into_owned()];
    launch(&spec).unwrap();
    fs::read(&path).unwrap()
}

#[test]
fn worker_frames_match_transcript_oracle() {
    assert_eq!(
        recorded_transcript(KernelSpec::Pi { n: 1000, seed: 7 }),
        transcript_oracle("pi_1000_7_ws2_rank1")
    );
    assert_eq!(
        recorded_transcript(KernelSpec::Primes { lo: 0, hi: 100 }),
        transcript_oracle("primes_0_100_ws2_rank1")
    );
}

#[test]
fn unknown_kernel_reports_error_frame() {
    let (head, addr) = bind_head(1);
    let mut child = Command::new(EXE)
        .args(["worker", "--head", &addr, "--", "fft"])
        .env_remove("MMPI_HEAD")
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut world = head.accept_workers().unwrap();
    match world.barrier().unwrap_err() {
        CommError::Disconnected(why) => assert!(why.contains("fft"), "{why}"),
        other => panic!("{other}"),
    }
    let status = child.wait().unwrap();
    assert!(!status.success());
}

#[test]
fn unknown_kernel_rejected_by_launch() {
    let out = mmpi(&["launch", "--np", "2", "--", "fft"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn head_env_overrides_flag() {
    let (head, addr) = bind_head(1);
    let mut child = Command::new(EXE)
        .args([
            "worker",
            "--head",
            "127.0.0.1:1",
            "--",
            "primes",
            "0",
            "100",
        ])
        .env("MMPI_HEAD", &addr)
        .spawn()
        .unwrap();
    let mut world = head.accept_workers().unwrap();
    let run =
        mmpi::benchmarks::run_kernel(&mut world, &KernelSpec::Primes { lo: 0, hi: 100 }).unwrap();
    world.shutdown();
    assert_eq!(run.output, Some(KernelOutput::Primes(sieve(100))));
    assert!(child.wait().unwrap().success());
}

#[test]
fn worker_without_head_fails() {
    let out = mmpi(&["worker", "--", "pi"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MMPI_HEAD"));
}
