//! Execution-strategy shim: one function that maps independent work items to
//! results, either data-parallel via rayon (the `parallel` feature, on by
//! default) or sequentially on the calling thread.
//!
//! Simulation results are identical either way: work items only produce
//! values and buffered traces, and the caller consumes them in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `items` through `f`, preserving order. Runs in parallel when the
/// `parallel` feature is compiled in, `parallel` is true and there is more
/// than one item.
pub fn map_items<W, R, F>(items: Vec<W>, parallel: bool, f: F) -> Vec<R>
where
    W: Send,
    R: Send,
    F: Fn(W) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel && items.len() > 1 {
            return items.into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    items.into_iter().map(f).collect()
}
