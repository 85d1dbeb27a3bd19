//! The resident-set sampler must not slow down the work it measures.

use std::hint::black_box;
use std::time::Instant;

use srmkit::bench::{measure, resident_bytes};

/// Pure arithmetic, no allocation; about a second on a desk machine.
#[inline(never)]
fn workload() -> f64 {
    let mut acc = 0.0f64;
    for i in 0..300_000_000u64 {
        acc = black_box(acc.mul_add(0.999_999_9, (i & 7) as f64));
    }
    acc
}

#[inline(never)]
fn plain(f: fn() -> f64) -> f64 {
    let start = Instant::now();
    black_box(f());
    start.elapsed().as_secs_f64()
}

#[inline(never)]
fn sampled(f: fn() -> f64) -> f64 {
    let (out, m) = measure(f);
    black_box(out);
    assert!(m.rss_samples > 1);
    m.wall_time_s
}

#[test]
fn sampler_overhead_below_two_percent() {
    if resident_bytes().is_none() {
        eprintln!("no resident-set readings on this platform; nothing to sample");
        return;
    }
    // best of several interleaved repetitions filters out scheduler noise
    let (mut best_plain, mut best_sampled) = (f64::INFINITY, f64::INFINITY);
    black_box(workload());
    for _ in 0..6 {
        best_plain = best_plain.min(plain(workload));
        best_sampled = best_sampled.min(sampled(workload));
    }
    let overhead = best_sampled / best_plain - 1.0;
    println!("plain {best_plain:.3}s, sampled {best_sampled:.3}s, overhead {:.2}%", overhead * 100.0);
    assert!(overhead < 0.02, "sampling overhead {:.2}%", overhead * 100.0);
}
