//! Deterministic counter-based random streams.
//!
//! Every (seed, trial, layer path) tuple keys an independent stream, so
//! parallel trials never share mutable state and results do not depend on
//! scheduling order. Output is stable across platforms: all math is
//! integer mixing plus IEEE f64.

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Stream factory for one (seed, trial) pair.
#[derive(Debug, Clone, Copy)]
pub struct RngFactory {
    seed: u64,
    trial: u64,
}

impl RngFactory {
    pub fn new(seed: u64, trial: u64) -> Self {
        RngFactory { seed, trial }
    }

    /// Independent stream for a layer path (plus a salt to separate
    /// multiple uses at the same layer, e.g. weight vs activation).
    pub fn stream(&self, path: &str, salt: u64) -> Stream {
        let base = mix(self.seed ^ GOLDEN)
            ^ mix(self.trial.wrapping_mul(0xA24B_AED4_963E_E407))
            ^ mix(fnv1a(path).wrapping_add(salt.wrapping_mul(GOLDEN)));
        Stream { base, counter: 0 }
    }
}

/// Counter-based generator: the n-th output is a pure function of
/// (base, n), so streams are order-insensitive and cheap to fork.
#[derive(Debug, Clone)]
pub struct Stream {
    base: u64,
    counter: u64,
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        Stream { base: mix(seed ^ GOLDEN), counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.base.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform f64 in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Unbiased uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // rejection above the largest multiple of n
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Poisson draw with the given mean.
    ///
    /// Uses Knuth's product method for small means; larger means are split
    /// into independent chunks (the sum of Poissons is Poisson), keeping
    /// the distribution exact without special functions.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        const CHUNK: f64 = 25.0;
        if mean <= CHUNK {
            return self.poisson_knuth(mean);
        }
        let chunks = (mean / CHUNK).ceil() as u64;
        let per = mean / chunks as f64;
        (0..chunks).map(|_| self.poisson_knuth(per)).sum()
    }

    fn poisson_knuth(&mut self, mean: f64) -> u64 {
        let threshold = (-mean).exp();
        let mut k = 0u64;
        let mut p = 1.0f64;
        loop {
            p *= self.next_f64();
            if p <= threshold {
                return k;
            }
            k += 1;
        }
    }
}
