//! Optional data-parallel helpers. Kernels parallelize only over disjoint
//! output regions, so results are bitwise identical with and without the
//! `parallel` feature.

/// Below this element count parallel dispatch is not worth the overhead.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk_mut<S: Send, F>(data: &mut [S], chunk: usize, f: F)
where
    F: Fn(usize, &mut [S]) + Sync,
{
    use rayon::prelude::*;
    if data.len() >= PAR_THRESHOLD && chunk < data.len() {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk_mut<S, F>(data: &mut [S], chunk: usize, f: F)
where
    F: Fn(usize, &mut [S]),
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
