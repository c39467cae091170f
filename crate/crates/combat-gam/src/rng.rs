//! Deterministic pseudo-random stream for cohort simulation and tests.
//!
//! The generator is xoshiro256++ seeded through splitmix64, so a single
//! `u64` seed pins the entire stream. Every distribution below is a fixed,
//! documented transform of that stream:
//!
//! * `uniform` takes the top 53 bits of one `u64` draw,
//! * `normal` is one Box-Muller cosine deviate per pair of uniforms
//!   (the sine half is discarded to keep a fixed draw count per call),
//! * `gamma` is Marsaglia-Tsang squeeze sampling (variable draw count),
//! * `inv_gamma(shape, scale)` returns `scale / gamma(shape)`.
//!
//! Reproducibility is guaranteed for this implementation only; the stream
//! is not meant to match any other library bit for bit.

const SPLITMIX_GAMMA: u64 = 0x9E3779B97F4A7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn rotl(x: u64, k: u32) -> u64 {
    (x << k) | (x >> (64 - k))
}

/// xoshiro256++ generator with documented distribution transforms.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Expands `seed` into the 256-bit state with four splitmix64 steps.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in s.iter_mut() {
            *slot = splitmix64(&mut sm);
        }
        // The all-zero state is a fixed point of xoshiro; splitmix64 cannot
        // reach it from a 64-bit seed, but guard anyway.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = rotl(self.s[0].wrapping_add(self.s[3]), 23).wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = rotl(self.s[3], 45);
        result
    }

    /// Uniform draw in `[0, 1)` from the top 53 bits of one `u64`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in the open interval `(0, 1)`; safe under `ln`.
    fn open_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal deviate: Box-Muller cosine half from two uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open_uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) deviate via Marsaglia-Tsang; consumes a variable but
    /// deterministic number of draws. Requires `shape > 0`.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive, got {shape}");
        if shape < 1.0 {
            // Boost: G(a) = G(a + 1) * U^(1/a).
            let boost = self.open_uniform().powf(1.0 / shape);
            return self.gamma(shape + 1.0) * boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.open_uniform();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d * v;
            }
        }
    }

    /// Inverse-Gamma(shape, scale) deviate: `scale / Gamma(shape, 1)`.
    /// Mean is `scale / (shape - 1)` for `shape > 1`.
    pub fn inv_gamma(&mut self, shape: f64, scale: f64) -> f64 {
        assert!(scale > 0.0, "inverse-gamma scale must be positive, got {scale}");
        scale / self.gamma(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Rng::from_seed(1);
        let mut b = Rng::from_seed(2);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    // Frozen head of the seed-0 stream. A change here means every stored
    // seed in tests and simulations silently re-rolls; never update these
    // values without meaning to break reproducibility.
    #[test]
    fn stream_head_is_frozen() {
        let mut r = Rng::from_seed(0);
        let head: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(
            head,
            vec![
                5987356902031041503,
                7051070477665621255,
                6633766593972829180,
                211316841551650330
            ]
        );
    }

    #[test]
    fn uniform_bounds_and_mean() {
        let mut r = Rng::from_seed(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "uniform mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::from_seed(11);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = r.normal();
            assert!(z.is_finite());
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "normal mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "normal variance {var}");
    }

    #[test]
    fn gamma_moments() {
        let mut r = Rng::from_seed(3);
        let shape = 15.0;
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let g = r.gamma(shape);
            assert!(g > 0.0);
            sum += g;
            sumsq += g * g;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - shape).abs() < 0.1, "gamma mean {mean}");
        assert!((var - shape).abs() < 0.5, "gamma variance {var}");
    }

    #[test]
    fn gamma_small_shape() {
        let mut r = Rng::from_seed(5);
        let n = 100_000;
        let mean = (0..n).map(|_| r.gamma(0.5)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "gamma(0.5) mean {mean}");
    }

    #[test]
    fn inv_gamma_mean_matches_moment_formula() {
        // shape 15, scale 14 has mean 14 / 14 = 1.
        let mut r = Rng::from_seed(9);
        let n = 100_000;
        let mean = (0..n).map(|_| r.inv_gamma(15.0, 14.0)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "inverse-gamma mean {mean}");
    }
}
