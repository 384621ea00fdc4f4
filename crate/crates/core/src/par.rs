//! Ordered parallel map over independent work items.
//!
//! With the `parallel` feature (default) and `sequential == false` the work
//! runs on the rayon pool; otherwise it runs in index order on the calling
//! thread. Results always come back in input order and items share no
//! state, so both paths are bitwise-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_ordered<T, R, F>(items: &[T], sequential: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !sequential {
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = sequential;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
