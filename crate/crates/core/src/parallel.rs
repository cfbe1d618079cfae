//! Worker-pool sizing. `DHCNET_THREADS` caps the number of workers.

use rayon::ThreadPoolBuilder;

pub const THREADS_ENV: &str = "DHCNET_THREADS";

/// Worker count: `DHCNET_THREADS` when it parses as a positive integer,
/// otherwise the machine's available parallelism.
pub fn thread_limit() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available)
}

/// Runs `f` inside a pool of [`thread_limit`] workers, so any rayon
/// iterator it uses respects the cap.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match ThreadPoolBuilder::new().num_threads(thread_limit()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
