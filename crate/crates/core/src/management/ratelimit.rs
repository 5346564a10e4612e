use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimiterConfig {
    /// Tokens per second.
    pub rate: f64,
    pub burst: u32,
}

impl RateLimiterConfig {
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rate.is_finite() && self.rate > 0.0) {
            out.push(format!("rate limit must be positive, got {}", self.rate));
        }
        if self.burst < 1 {
            out.push("rate limit burst must be at least 1".into());
        }
        out
    }
}

/// Token bucket that starts full.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    cfg: RateLimiterConfig,
    tokens: f64,
    last: u64,
}

impl TokenBucket {
    pub fn new(cfg: RateLimiterConfig) -> Self {
        Self {
            cfg,
            tokens: cfg.burst as f64,
            last: 0,
        }
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    /// Refills up to `now`, then takes one token if a whole one is available.
    pub fn admit(&mut self, now: u64) -> bool {
        let dt = now.saturating_sub(self.last) as f64 / 1e6;
        self.last = self.last.max(now);
        self.tokens = (self.tokens + dt * self.cfg.rate).min(self.cfg.burst as f64);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}
