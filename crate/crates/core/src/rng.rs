//! Keyed normal substreams.
//!
//! Every Gaussian used by the samplers comes from a ChaCha8 substream keyed by
//! `(seed, stream, sample)` with the mode as ChaCha stream id, and is consumed
//! in a fixed order within that substream. Paths therefore do not depend on
//! the number of samples drawn, on the order in which samples are visited, or
//! on how work is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Driving noise `W`: one substream per mode, one variate per time step.
pub const STREAM_W: u64 = 0x5744_5249_5645;
/// Observation noise `Z`: one substream per sample, one variate per mode.
pub const STREAM_Z: u64 = 0x4f42_5345_5256;
/// Companion variates of finite element couplings, one substream per mode.
pub const STREAM_FEM: u64 = 0x4645_4d58;
/// Complement of the projected observation noise outside the reference span.
pub const STREAM_Z_COMPLEMENT: u64 = 0x5a43_4f4d;
/// Probes in randomized oracle checks.
pub const STREAM_PROBE: u64 = 0x5052_4f42;

/// Words reserved per counter in [`normal_at`]; far more than one variate uses.
const COUNTER_STRIDE: u32 = 20;

pub type Substream = ChaCha8Rng;

pub fn substream(seed: u64, stream: u64, sample: u64, mode: u64) -> Substream {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&sample.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(mode);
    rng
}

#[inline]
pub fn standard_normal(rng: &mut Substream) -> f64 {
    rng.sample(StandardNormal)
}

/// First `n` variates of a substream. A longer request extends a shorter one.
pub fn normals(seed: u64, stream: u64, sample: u64, mode: u64, n: usize) -> Vec<f64> {
    let mut rng = substream(seed, stream, sample, mode);
    (0..n).map(|_| standard_normal(&mut rng)).collect()
}

/// Single variate addressed by `counter`, for random access.
pub fn normal_at(seed: u64, stream: u64, sample: u64, mode: u64, counter: u64) -> f64 {
    let mut rng = substream(seed, stream, sample, mode);
    rng.set_word_pos(u128::from(counter) << COUNTER_STRIDE);
    standard_normal(&mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = normals(7, STREAM_W, 3, 4, 8);
        assert_eq!(a, normals(7, STREAM_W, 3, 4, 8));
        assert_ne!(a, normals(7, STREAM_W, 3, 5, 8));
        assert_ne!(a, normals(7, STREAM_Z, 3, 4, 8));
        assert_ne!(a, normals(7, STREAM_W, 4, 4, 8));
        assert_ne!(a, normals(8, STREAM_W, 3, 4, 8));
        assert_eq!(&normals(7, STREAM_W, 3, 4, 20)[..8], &a[..]);
        assert_eq!(normal_at(1, STREAM_PROBE, 2, 3, 4), normal_at(1, STREAM_PROBE, 2, 3, 4));
        assert_ne!(normal_at(1, STREAM_PROBE, 2, 3, 4), normal_at(1, STREAM_PROBE, 2, 3, 5));
    }

    #[test]
    fn moments_and_independence() {
        let n = 200_000usize;
        let a = normals(1, STREAM_W, 0, 0, n);
        let b = normals(1, STREAM_W, 0, 1, n);
        let nf = n as f64;
        let s1: f64 = a.iter().sum();
        let s2: f64 = a.iter().map(|x| x * x).sum();
        let s4: f64 = a.iter().map(|x| x.powi(4)).sum();
        let cross: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let lag: f64 = a.windows(2).map(|w| w[0] * w[1]).sum();
        assert!((s1 / nf).abs() < 4.0 / nf.sqrt());
        assert!((s2 / nf - 1.0).abs() < 4.0 * (2.0 / nf).sqrt());
        assert!((s4 / nf - 3.0).abs() < 4.0 * (96.0 / nf).sqrt());
        assert!((cross / nf).abs() < 4.0 / nf.sqrt());
        assert!((lag / nf).abs() < 4.0 / nf.sqrt());
    }

    #[test]
    fn addressed_variates_are_standard() {
        let n = 20_000u64;
        let v: Vec<f64> = (0..n).map(|c| normal_at(5, STREAM_PROBE, 0, 0, c)).collect();
        let nf = n as f64;
        let mean = v.iter().sum::<f64>() / nf;
        let var = v.iter().map(|x| x * x).sum::<f64>() / nf;
        assert!(mean.abs() < 4.0 / nf.sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / nf).sqrt());
    }
}
