//! Chunked inference over a thread pool capped by `LFIT_THREADS`.

use std::thread;

use lfit_core::dataset::WindowBatch;
use lfit_core::model::{lfit_forward, Explanation, Forecast, LfitModel};
use log::warn;

use crate::error::Result;

/// Largest number of windows pushed through one forward pass.
pub const MAX_CHUNK: usize = 256;

/// `LFIT_THREADS` when set to a positive integer, else the available parallelism.
pub fn thread_count() -> usize {
    match std::env::var("LFIT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                warn!("ignoring LFIT_THREADS={v:?}: expected a positive integer");
                default_threads()
            }
        },
        Err(_) => default_threads(),
    }
}

fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Forward pass without dropout, split into contiguous chunks. Windows are
/// independent, so the output does not depend on `threads`.
pub fn forward_parallel(
    model: &LfitModel,
    batch: &WindowBatch,
    threads: usize,
) -> Result<(Vec<Forecast>, Vec<Explanation>)> {
    let n = batch.len();
    let threads = threads.max(1);
    let chunk = n.div_ceil(threads).clamp(1, MAX_CHUNK);
    let ranges: Vec<Vec<usize>> = (0..n).step_by(chunk).map(|a| (a..(a + chunk).min(n)).collect()).collect();
    let mut forecasts = Vec::with_capacity(n);
    let mut explanations = Vec::with_capacity(n);
    for group in ranges.chunks(threads) {
        let results = thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|rows| s.spawn(move || lfit_forward(model, &batch.subset(rows), None)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("inference thread panicked"))
                .collect::<Vec<_>>()
        });
        for r in results {
            let (f, e) = r?;
            forecasts.extend(f);
            explanations.extend(e);
        }
    }
    Ok((forecasts, explanations))
}
