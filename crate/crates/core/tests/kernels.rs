mod common;

use common::{concat_oracle_hits, run_world, sieve};
use mmpi::benchmarks::{
    estimate_pi_parallel, estimate_pi_seq, generate_primes_parallel, generate_primes_seq,
    run_kernel, KernelOutput, KernelSpec,
};

#[test]
fn sieve_oracle_counts() {
    assert_eq!(sieve(20_000).len(), 2262);
    assert_eq!(sieve(100).len(), 25);
}

#[test]
fn sequential_primes_match_sieve() {
    assert_eq!(generate_primes_seq(0, 20_000).unwrap(), sieve(20_000));
    assert_eq!(generate_primes_seq(0, 100).unwrap(), sieve(100));
}

#[test]
fn parallel_primes_small_range() {
    for p in [1, 3] {
        let out = run_world(p, |w| generate_primes_parallel(w, 0, 10).unwrap());
        assert_eq!(out[0].as_deref(), Some(&[2, 3, 5, 7][..]));
    }
}

#[test]
fn parallel_primes_match_across_world_sizes() {
    let expected = sieve(20_000);
    let four = run_world(4, |w| generate_primes_parallel(w, 0, 20_000).unwrap());
    let seven = run_world(7, |w| generate_primes_parallel(w, 0, 20_000).unwrap());
    assert_eq!(four[0].as_ref().unwrap(), &expected);
    assert_eq!(seven[0], four[0]);
    assert!(four[1..].iter().all(Option::is_none));
}

#[test]
fn parallel_primes_offset_range() {
    let expected: Vec<u64> = sieve(5_000).into_iter().filter(|&p| p >= 1_234).collect();
    let out = run_world(5, |w| generate_primes_parallel(w, 1_234, 5_000).unwrap());
    assert_eq!(out[0].as_ref().unwrap(), &expected);
}

#[test]
fn parallel_pi_matches_concatenated_streams() {
    let n = 1_000_000;
    let out = run_world(4, move |w| estimate_pi_parallel(w, n, 7).unwrap());
    let est = out[0].unwrap();
    assert_eq!(est.tries, n);
    assert_eq!(est.hits, concat_oracle_hits(n, 7, 4));
    assert_eq!(est.estimate, 4.0 * est.hits as f64 / n as f64);
}

#[test]
fn parallel_pi_uneven_split() {
    let out = run_world(3, |w| estimate_pi_parallel(w, 1_001, 99).unwrap());
    let est = out[0].unwrap();
    assert_eq!(
        (est.hits, est.tries),
        (concat_oracle_hits(1_001, 99, 3), 1_001)
    );
}

#[test]
fn single_rank_equals_sequential() {
    let out = run_world(1, |w| estimate_pi_parallel(w, 1_000_000, 42).unwrap());
    assert_eq!(out[0].unwrap(), estimate_pi_seq(1_000_000, 42).unwrap());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let a = run_world(3, |w| estimate_pi_parallel(w, 200_000, 5).unwrap());
    let b = run_world(3, |w| estimate_pi_parallel(w, 200_000, 5).unwrap());
    assert_eq!(a[0].unwrap().hits, b[0].unwrap().hits);
    assert_eq!(
        a[0].unwrap().estimate.to_bits(),
        b[0].unwrap().estimate.to_bits()
    );
}

#[test]
fn run_kernel_reports_output_only_at_root() {
    let spec = KernelSpec::Primes { lo: 0, hi: 100 };
    let out = run_world(3, move |w| run_kernel(w, &spec).unwrap());
    match &out[0].output {
        Some(KernelOutput::Primes(v)) => assert_eq!(v.len(), 25),
        other => panic!("{other:?}"),
    }
    assert!(out[1..].iter().all(|r| r.output.is_none()));
    assert!(out.iter().all(|r| r.compute_seconds >= 0.0));
}
