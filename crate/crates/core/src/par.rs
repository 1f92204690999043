//! Row-chunked data parallelism.
//!
//! With the `parallel` feature every helper fans out over rayon's pool; without
//! it the same closures run on the calling thread. Each output row is written by
//! exactly one closure invocation, so results are bit-identical either way.

/// Minimum number of scalar multiply-adds before splitting work across threads.
pub const PAR_THRESHOLD: usize = 1 << 15;

/// Calls `f(first_row, chunk)` over `out` split into blocks of whole rows.
pub fn for_each_row_block<F>(out: &mut [f64], row_len: usize, work_per_row: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if out.is_empty() || row_len == 0 {
        return;
    }
    let rows = out.len() / row_len;
    let total = rows.saturating_mul(work_per_row.max(1));
    if total < PAR_THRESHOLD || rows < 2 {
        f(0, out);
        return;
    }
    run_blocks(out, row_len, rows, f);
}

#[cfg(feature = "parallel")]
fn run_blocks<F>(out: &mut [f64], row_len: usize, rows: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    let threads = rayon::current_num_threads().max(1);
    let rows_per_block = rows.div_ceil(threads * 4).max(1);
    out.par_chunks_mut(rows_per_block * row_len)
        .enumerate()
        .for_each(|(b, chunk)| f(b * rows_per_block, chunk));
}

#[cfg(not(feature = "parallel"))]
fn run_blocks<F>(out: &mut [f64], _row_len: usize, _rows: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    f(0, out);
}

/// Maps `f` over `items`, in parallel when the feature is enabled. Output order
/// always matches input order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
