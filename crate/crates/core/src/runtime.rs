//! Worker-thread configuration.

use std::sync::OnceLock;

static THREADS: OnceLock<Option<usize>> = OnceLock::new();

/// Cap rayon's worker pool from `XMT_THREADS` if set. Call once at process
/// start; later calls are no-ops. Parallel sections are structured so worker
/// count never changes results, only wall time.
pub fn configure_threads_from_env() {
    let cap = THREADS.get_or_init(|| {
        std::env::var("XMT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
    });
    if let Some(n) = cap {
        // Errors only if a global pool already exists; that pool wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(*n)
            .build_global();
    }
}
