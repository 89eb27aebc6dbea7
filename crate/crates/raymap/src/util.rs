//! Small shared helpers.

/// Deterministic uniform subsampling: when `xs` exceeds `cap`, keeps the
/// `cap` elements at indices floor(j * n / cap) for j in 0..cap (strictly
/// increasing, evenly spread); otherwise keeps everything.
pub fn subsample_uniform<T>(xs: &[T], cap: usize) -> Vec<&T> {
    let n = xs.len();
    if n <= cap {
        return xs.iter().collect();
    }
    (0..cap).map(|j| &xs[j * n / cap]).collect()
}
