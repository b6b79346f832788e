use ndarray::NdFloat;
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point element type for tensors and network parameters.
///
/// Training runs at `f32`; the numerical tests instantiate the same code at
/// `f64` so analytic gradients can be compared against finite differences
/// without cancellation noise.
pub trait Real: NdFloat + serde::Serialize + Default {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// One standard-normal draw from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Derives a child seed for a named random substream.
///
/// Every source of randomness in a run (weight init, label noising, batch
/// shuffling, evaluation draws) pulls from its own stream derived from the run
/// seed, so adding draws to one stream never perturbs another. The mixer is
/// splitmix64 over the base seed, a tag hash, and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(h).wrapping_add(index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
