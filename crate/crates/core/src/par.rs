//! Order-stable parallel reductions.
//!
//! Work is cut into fixed-size chunks independent of the thread count, each
//! chunk is reduced on its own and the partials are combined sequentially in
//! chunk order, so results are bit-identical for any rayon pool size.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 512;

/// Sum of `f(item)` over `items` with a deterministic reduction order.
pub(crate) fn stable_sum<T, F>(items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync,
{
    let partials: Vec<f64> = items
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(&f).sum::<f64>())
        .collect();
    partials.into_iter().sum()
}
