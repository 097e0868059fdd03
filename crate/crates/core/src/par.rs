//! Row- and layer-level fan-out with a sequential reference mode.

/// How independent rows (or layers) are evaluated. Both modes produce bitwise-identical
/// results because every work item is computed by the same code and collected in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Sequential,
    /// Rayon's current thread pool. Falls back to sequential without the `parallel` feature.
    Rayon,
}

impl Parallelism {
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}
