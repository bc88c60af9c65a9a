//! Deterministic data parallelism over fixed chunks.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::Result;

/// Runs `f` over the chunks `[0, c), [c, 2c), …` of `0..n` in parallel and
/// concatenates the outputs in index order, so results never depend on the
/// number of threads.
pub fn chunked<T, F>(n: usize, chunk: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> Result<Vec<T>> + Sync + Send,
{
    let chunk = chunk.max(1);
    let ranges: Vec<_> = (0..n)
        .step_by(chunk)
        .map(|a| a..(a + chunk).min(n))
        .collect();
    let parts = ranges
        .into_par_iter()
        .enumerate()
        .map(|(i, r)| f(i, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}
