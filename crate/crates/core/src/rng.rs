//! Seeded, counter-addressed random streams.
//!
//! Every stochastic operation takes an explicit [`RngSeed`]. Parallel work
//! (per-user rows, Monte Carlo repetitions) draws from `(seed, purpose, index)`
//! substreams so results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Independent generator for `(purpose, index)`.
    pub fn stream(self, purpose: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.0 ^ splitmix64(purpose)));
        rng.set_stream(index);
        rng
    }

    /// A child seed, e.g. one per grid cell or per hypothesis.
    pub fn derive(self, tag: u64) -> RngSeed {
        RngSeed(splitmix64(self.0.wrapping_add(splitmix64(tag ^ 0xA076_1D64_78BD_642F))))
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}


/// Calls `f(u)` for each `u < n` that succeeds an independent Bernoulli(`p`)
/// trial, skipping geometrically distributed gaps instead of drawing per user.
pub fn for_each_bernoulli(n: usize, p: f64, rng: &mut impl rand::Rng, mut f: impl FnMut(usize)) {
    if p >= 1.0 {
        (0..n).for_each(f);
        return;
    }
    if p <= 0.0 {
        return;
    }
    let log_q = (-p).ln_1p();
    let mut u = 0usize;
    loop {
        // 1 - U lies in (0, 1], so the log is finite.
        let unif: f64 = 1.0 - rng.random::<f64>();
        let skip = (unif.ln() / log_q).floor();
        if skip >= (n - u) as f64 {
            return;
        }
        u += skip as usize;
        f(u);
        u += 1;
        if u >= n {
            return;
        }
    }
}
