use serde::{Deserialize, Serialize};

use super::{sample::uniform_index, EngineError, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadBalancePolicy {
    RoundRobin,
    /// Uniform choice from the service's routing stream.
    Random,
    /// Every request goes to this instance index.
    Misconfigured(usize),
    /// Requests of user `u` go to instance `u mod n`.
    UserSharded,
}

/// Picks an instance index in `[0, n)` for one request.
///
/// A misconfigured index past the last instance is clamped to it, which
/// only happens after scale-in removed the targeted instance.
pub fn route(
    lb: LoadBalancePolicy,
    n: usize,
    user: u32,
    rr: &mut usize,
    rng: &mut SimRng,
) -> Result<usize, EngineError> {
    if n == 0 {
        return Err(EngineError::NoInstance);
    }
    Ok(match lb {
        LoadBalancePolicy::RoundRobin => {
            let i = *rr % n;
            *rr = (i + 1) % n;
            i
        }
        LoadBalancePolicy::Random => uniform_index(n, rng),
        LoadBalancePolicy::Misconfigured(i) => i.min(n - 1),
        LoadBalancePolicy::UserSharded => user as usize % n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Streams;

    #[test]
    fn round_robin_cycles() {
        let mut rr = 0;
        let mut rng = Streams::new(0).get("r");
        let got: Vec<usize> = (0..6)
            .map(|_| route(LoadBalancePolicy::RoundRobin, 3, 0, &mut rr, &mut rng).unwrap())
            .collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn misconfigured_pins_one_instance() {
        let mut rr = 0;
        let mut rng = Streams::new(0).get("r");
        for user in 0..10 {
            assert_eq!(
                route(LoadBalancePolicy::Misconfigured(1), 3, user, &mut rr, &mut rng).unwrap(),
                1
            );
        }
    }

    #[test]
    fn random_is_balanced() {
        let mut rr = 0;
        let mut rng = Streams::new(77).get("route/x");
        let mut counts = [0u32; 4];
        for _ in 0..100_000 {
            counts[route(LoadBalancePolicy::Random, 4, 0, &mut rr, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn no_instances() {
        let mut rr = 0;
        let mut rng = Streams::new(0).get("r");
        assert!(matches!(
            route(LoadBalancePolicy::RoundRobin, 0, 0, &mut rr, &mut rng),
            Err(EngineError::NoInstance)
        ));
    }
}
