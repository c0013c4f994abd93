//! Data-parallel helpers.
//!
//! Every hot loop in the crate goes through these functions. With the
//! `parallel` feature (on by default) `Exec::Parallel` dispatches to rayon;
//! without it both variants run the same sequential loop. Each chunk is
//! computed by the same sequential code either way, so results are
//! bit-identical across the two modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        _ => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let mut a = vec![0.0f64; 100];
        let mut b = a.clone();
        let fill = |i: usize, c: &mut [f64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 7 + j) as f64 * 0.5;
            }
        };
        for_each_chunk_mut(Exec::Sequential, &mut a, 7, fill);
        for_each_chunk_mut(Exec::Parallel, &mut b, 7, fill);
        assert_eq!(a, b);
        let s = map_indexed(Exec::Sequential, 10, |i| i * i);
        let p = map_indexed(Exec::Parallel, 10, |i| i * i);
        assert_eq!(s, p);
    }
}
