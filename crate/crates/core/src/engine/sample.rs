use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};

use super::SimRng;
use crate::topology::{DistKind, DistributionSpec};

/// One raw draw in µs, before any scaling.
pub fn draw(d: &DistributionSpec, rng: &mut SimRng) -> f64 {
    match d.kind {
        DistKind::Deterministic => d.mean,
        DistKind::Exponential => Exp::new(1.0 / d.mean).expect("positive mean").sample(rng),
        DistKind::Lognormal => {
            if d.sigma == 0.0 {
                return d.mean;
            }
            let mu = d.mean.ln() - d.sigma * d.sigma / 2.0;
            LogNormal::new(mu, d.sigma).expect("valid sigma").sample(rng)
        }
    }
}

/// Compute time on a core running at `freq` of nominal speed: the draw
/// divided by `freq`, rounded to the nearest µs, at least 1µs.
pub fn sample_service_time(d: &DistributionSpec, freq: f64, rng: &mut SimRng) -> u64 {
    debug_assert!(freq > 0.0 && freq <= 1.0);
    ((draw(d, rng) / freq).round() as u64).max(1)
}

/// RPC processing time: the draw divided by the network stack speed-up and
/// the core frequency. May round to zero.
pub fn sample_network_time(d: &DistributionSpec, stack_factor: f64, freq: f64, rng: &mut SimRng) -> u64 {
    (draw(d, rng) / (stack_factor * freq)).round() as u64
}

/// Uniform draw in `[0, n)`.
pub fn uniform_index(n: usize, rng: &mut SimRng) -> usize {
    rng.gen_range(0..n)
}
