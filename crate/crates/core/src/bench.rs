//! Wall-time and peak-memory measurement.
//!
//! Two memory signals are combined: the high-water mark of a counting
//! global allocator (exact for heap data, available only when a binary
//! installs [`TrackingAllocator`]), and the resident set size polled from
//! `/proc/self/status` by a background thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Default resident-set polling interval (20 Hz).
pub const DEFAULT_SAMPLE_INTERVAL: Duration = Duration::from_millis(50);

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that tracks live bytes and their peak.
///
/// ```ignore
/// #[global_allocator]
/// static ALLOC: srmkit::bench::TrackingAllocator = srmkit::bench::TrackingAllocator;
/// ```
pub struct TrackingAllocator;

impl TrackingAllocator {
    #[inline]
    fn grow(size: usize) {
        INSTALLED.store(true, Ordering::Relaxed);
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    #[inline]
    fn shrink(size: usize) {
        CURRENT.fetch_sub(size, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        Self::shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                Self::grow(new_size - layout.size());
            } else {
                Self::shrink(layout.size() - new_size);
            }
        }
        p
    }
}

/// Whether a [`TrackingAllocator`] is serving this process.
pub fn allocator_tracking() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Live heap bytes seen by the tracking allocator.
pub fn heap_current() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Heap high-water mark since the last [`reset_heap_peak`].
pub fn heap_peak() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Restarts the high-water mark from the current live size.
pub fn reset_heap_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Current resident set size, if the platform exposes it.
pub fn resident_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Background thread polling the resident set size.
pub struct RssSampler {
    stop: Arc<AtomicBool>,
    peak: Arc<AtomicU64>,
    samples: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl RssSampler {
    /// Starts polling; `None` when resident-set readings are unavailable.
    pub fn start(interval: Duration) -> Option<RssSampler> {
        let first = resident_bytes()?;
        let stop = Arc::new(AtomicBool::new(false));
        let peak = Arc::new(AtomicU64::new(first));
        let samples = Arc::new(AtomicU64::new(1));
        let handle = {
            let (stop, peak, samples) = (stop.clone(), peak.clone(), samples.clone());
            std::thread::Builder::new()
                .name("srmkit-rss".into())
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        if let Some(rss) = resident_bytes() {
                            peak.fetch_max(rss, Ordering::Relaxed);
                            samples.fetch_add(1, Ordering::Relaxed);
                        }
                        std::thread::park_timeout(interval);
                    }
                })
                .ok()?
        };
        Some(RssSampler {
            stop,
            peak,
            samples,
            handle: Some(handle),
        })
    }

    /// Stops the thread and returns `(peak bytes, sample count)`.
    pub fn finish(mut self) -> (u64, u64) {
        self.halt();
        if let Some(rss) = resident_bytes() {
            self.peak.fetch_max(rss, Ordering::Relaxed);
        }
        (self.peak.load(Ordering::Relaxed), self.samples.load(Ordering::Relaxed))
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

impl Drop for RssSampler {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Outcome of [`measure`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub wall_time_s: f64,
    /// Heap high-water mark during the closure, when the tracking
    /// allocator is installed.
    pub heap_peak_bytes: Option<u64>,
    /// Peak resident set size polled during the closure.
    pub rss_peak_bytes: Option<u64>,
    pub rss_samples: u64,
}

impl Measurement {
    /// Allocator peak when available, resident-set peak otherwise.
    pub fn peak_mem_bytes(&self) -> Option<u64> {
        self.heap_peak_bytes.or(self.rss_peak_bytes)
    }
}

/// Runs `f` once, timing it and tracking its memory.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Measurement) {
    measure_with(DEFAULT_SAMPLE_INTERVAL, f)
}

pub fn measure_with<R>(interval: Duration, f: impl FnOnce() -> R) -> (R, Measurement) {
    let base = heap_current();
    reset_heap_peak();
    let sampler = RssSampler::start(interval);
    let start = Instant::now();
    let out = f();
    let wall_time_s = start.elapsed().as_secs_f64();
    let (rss_peak_bytes, rss_samples) = match sampler {
        Some(s) => {
            let (p, n) = s.finish();
            (Some(p), n)
        }
        None => {
            log::warn!("resident-set sampling is unavailable on this platform");
            (None, 0)
        }
    };
    let heap_peak_bytes =
        allocator_tracking().then(|| heap_peak().saturating_sub(base).max(1) as u64);
    (
        out,
        Measurement {
            wall_time_s,
            heap_peak_bytes,
            rss_peak_bytes,
            rss_samples,
        },
    )
}

/// One line of `srmkit bench` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub algorithm: String,
    pub k: usize,
    pub atlas: Option<String>,
    pub n_subjects: usize,
    pub n_runs: usize,
    pub n_timeframes: Vec<usize>,
    pub n_voxels: usize,
    pub seed: u64,
    pub n_iter: usize,
    pub wall_time_s: f64,
    pub peak_mem_bytes: Option<u64>,
    pub heap_peak_bytes: Option<u64>,
    pub rss_peak_bytes: Option<u64>,
    pub memory_method: String,
    pub trace: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_time_and_rss() {
        let (v, m) = measure_with(Duration::from_millis(5), || {
            std::thread::sleep(Duration::from_millis(60));
            vec![1u8; 1 << 20].iter().map(|&b| b as usize).sum::<usize>()
        });
        assert_eq!(v, 1 << 20);
        assert!(m.wall_time_s >= 0.06);
        if resident_bytes().is_some() {
            assert!(m.rss_peak_bytes.unwrap() > 0);
            assert!(m.rss_samples >= 5, "{}", m.rss_samples);
        }
        assert!(m.peak_mem_bytes().is_some() || resident_bytes().is_none());
    }
}
