//! Numeric helpers with a fixed evaluation order.
//!
//! Outputs must be byte-identical across thread counts, so float reductions
//! never use `rayon`'s unordered reduce. Instead the input is cut into
//! fixed-size chunks, each chunk is summed sequentially (possibly on
//! different threads), and the per-chunk partials are merged in chunk order.
//! The grouping — and therefore the rounding — depends only on the data.

use rayon::prelude::*;

/// Chunk length for parallel float sums. The value is arbitrary but fixed:
/// changing it changes low-order bits of rounded sums.
pub const SUM_CHUNK: usize = 65_536;

/// Sum over index ranges, for accumulations that need the index itself.
pub fn chunked_sum_indexed(len: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let chunks: Vec<(usize, usize)> = (0..len)
        .step_by(SUM_CHUNK)
        .map(|start| (start, (start + SUM_CHUNK).min(len)))
        .collect();
    let partials: Vec<f64> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut acc = 0.0;
            for i in start..end {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Pairwise (cascade) summation with a fixed split, independent of thread
/// count by construction. Used for the loss accumulators where the term
/// count is modest but cancellation matters.
pub fn pairwise_sum(terms: &[f64]) -> f64 {
    if terms.len() <= 32 {
        let mut acc = 0.0;
        for t in terms {
            acc += t;
        }
        return acc;
    }
    let mid = terms.len() / 2;
    pairwise_sum(&terms[..mid]) + pairwise_sum(&terms[mid..])
}
