//! Chunked reductions with a fixed combination order.
//!
//! Items are split into chunks of [`CHUNK`] elements, each chunk is folded
//! left to right, and chunk results are merged in chunk order. The parallel
//! path (feature `parallel`) only changes *where* chunks are folded, so both
//! paths produce bitwise-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of items folded per work unit.
pub const CHUNK: usize = 1024;

/// Fold `items` chunk-wise and merge the chunk accumulators in order.
pub fn chunked_reduce<T, A, I, F, M>(items: &[T], init: I, fold: F, merge: M) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, &T) + Sync + Send,
    M: Fn(&mut A, A),
{
    #[cfg(feature = "parallel")]
    {
        if items.len() > CHUNK {
            let parts: Vec<A> = items
                .par_chunks(CHUNK)
                .map(|chunk| fold_chunk(chunk, &init, &fold))
                .collect();
            return merge_in_order(parts, &init, merge);
        }
    }
    chunked_reduce_sequential(items, init, fold, merge)
}

/// Sequential reference path; always compiled so the two can be compared.
pub fn chunked_reduce_sequential<T, A, I, F, M>(items: &[T], init: I, fold: F, merge: M) -> A
where
    I: Fn() -> A,
    F: Fn(&mut A, &T),
    M: Fn(&mut A, A),
{
    let parts: Vec<A> = items
        .chunks(CHUNK)
        .map(|chunk| fold_chunk(chunk, &init, &fold))
        .collect();
    merge_in_order(parts, &init, merge)
}

fn fold_chunk<T, A>(chunk: &[T], init: &impl Fn() -> A, fold: &impl Fn(&mut A, &T)) -> A {
    let mut acc = init();
    for item in chunk {
        fold(&mut acc, item);
    }
    acc
}

fn merge_in_order<A>(parts: Vec<A>, init: &impl Fn() -> A, merge: impl Fn(&mut A, A)) -> A {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_else(init);
    for part in iter {
        merge(&mut acc, part);
    }
    acc
}

/// Map `0..n` to results, in index order. Each index must be self-seeded.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_sums_are_bitwise_equal() {
        let xs: Vec<f64> = (0..10_000).map(|i| ((i as f64) * 0.37).sin() * 1e-3).collect();
        let a = chunked_reduce(&xs, || 0.0f64, |s, x| *s += x, |s, t| *s += t);
        let b = chunked_reduce_sequential(&xs, || 0.0f64, |s, x| *s += x, |s, t| *s += t);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_input_yields_init() {
        let xs: Vec<f64> = vec![];
        let s = chunked_reduce(&xs, || 7.0f64, |s, x| *s += x, |s, t| *s += t);
        assert_eq!(s, 7.0);
    }
}
