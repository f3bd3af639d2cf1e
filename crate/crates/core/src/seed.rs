//! Counter-based, seed-chained hashing.
//!
//! All randomness in a run descends from a single `master_seed`. Root seeds
//! and child seeds are pure functions of their ancestors, so any node in the
//! search forest can be regenerated from its seed chain alone.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const ORDINAL_MUL: u64 = 0xD6E8_FEB8_6659_FD93;
const FRAME_MUL: u64 = 0xA076_1D64_78BD_642F;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `hash64(parent_seed, ordinal, frame)`.
#[inline]
pub fn hash64(parent: u64, ordinal: u64, frame: u64) -> u64 {
    let h = mix64(parent ^ GOLDEN);
    let h = mix64(h ^ ordinal.wrapping_mul(ORDINAL_MUL));
    mix64(h ^ frame.wrapping_mul(FRAME_MUL))
}

/// Seed of the `index`-th root. Root sets are nested: the seeds for `n`
/// roots are a prefix of the seeds for `n + 1`.
#[inline]
pub fn root_seed(master: u64, index: usize) -> u64 {
    hash64(master, index as u64, 0)
}

#[inline]
pub fn child_seed(parent: u64, ordinal: usize, frame: usize) -> u64 {
    hash64(parent, ordinal as u64, frame as u64)
}

/// Uniform in `(0, 1]` from the top 53 bits.
#[inline]
pub fn open_unit(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `dim` standard normals from a keyed counter stream (Box-Muller, both
/// outputs used). Element `j` depends only on `(key, seed, j / 2)`.
pub fn gaussian_vector(key: u64, seed: u64, dim: usize) -> Vec<f64> {
    let base = mix64(key ^ mix64(seed));
    let mut out = Vec::with_capacity(dim);
    let mut counter = 0u64;
    while out.len() < dim {
        let u1 = open_unit(mix64(base.wrapping_add(counter.wrapping_mul(GOLDEN))));
        let u2 = open_unit(mix64(base.wrapping_add((counter + 1).wrapping_mul(GOLDEN))));
        counter += 2;
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        out.push(radius * angle.cos());
        if out.len() < dim {
            out.push(radius * angle.sin());
        }
    }
    out
}

/// A point on the unit sphere in `R^dim`.
pub fn unit_vector(key: u64, seed: u64, dim: usize) -> Vec<f64> {
    let mut v = gaussian_vector(key, seed, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // measure-zero; fall back to the first axis
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
