//! Order-preserving data-parallel maps. With the `parallel` feature they run
//! on the rayon pool; without it they are plain sequential loops. Results
//! are identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Independent random stream `stream` of the run seeded with `seed`, so
/// parallel work items draw the same numbers regardless of scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `(0..n).map(f)`, collected in order.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
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

/// Fallible map over a slice; the first error in index order wins.
pub fn try_map<I, O, F>(items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> Result<O> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let out: Vec<Result<O>> = items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    #[cfg(not(feature = "parallel"))]
    let out: Vec<Result<O>> = items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    out.into_iter().collect()
}

/// Whether maps run on a thread pool in this build.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn preserves_order() {
        assert_eq!(map_range(1000, |i| i * 2), (0..1000).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_wins() {
        let items: Vec<usize> = (0..100).collect();
        let err = try_map(&items, |_, &x| {
            if x % 30 == 29 {
                Err(Error::InvalidArgument(format!("{x}")))
            } else {
                Ok(x)
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(s) if s == "29"));
    }
}
