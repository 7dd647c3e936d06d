//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(seed, tag)` with the chunk
//! index as its stream id, so chunks can be filled in any order or on any
//! number of threads and still concatenate to the same output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Rows generated per independent stream.
pub const CHUNK_ROWS: usize = 4096;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(tag.as_bytes())) ^ splitmix(index.wrapping_add(1)))
}

/// Independent generator for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(tag.as_bytes())));
    rng.set_stream(index);
    rng
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Row-major `rows × cols` block of standard normals.
pub fn normal_block(seed: u64, tag: &str, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if cols == 0 {
        return out;
    }
    out.par_chunks_mut(CHUNK_ROWS * cols).enumerate().for_each(|(chunk, buf)| {
        let mut rng = stream(seed, tag, chunk as u64);
        for v in buf.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    });
    out
}

/// Row-major block of uniforms on `[0, 1)`.
pub fn uniform_block(seed: u64, tag: &str, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if cols == 0 {
        return out;
    }
    out.par_chunks_mut(CHUNK_ROWS * cols).enumerate().for_each(|(chunk, buf)| {
        let mut rng = stream(seed, tag, chunk as u64);
        for v in buf.iter_mut() {
            *v = rng.random::<f64>();
        }
    });
    out
}
