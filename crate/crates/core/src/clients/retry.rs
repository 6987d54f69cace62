use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::ServiceError;

/// Bounded exponential backoff: attempt `k` (1-based) that fails with a
/// retryable error sleeps `base * factor^(k-1)` before attempt `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_ms: u64,
    pub factor: u32,
    pub request_timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_ms: 1000,
            factor: 4,
            request_timeout_ms: 120_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let mult = (self.factor as u64).saturating_pow(attempt.saturating_sub(1));
        Duration::from_millis(self.base_ms.saturating_mul(mult))
    }
}

/// Outcome of a single attempt as seen by the retry loop.
#[derive(Debug)]
pub enum Attempt {
    RateLimited,
    Timeout,
    /// 5xx or a dropped connection.
    Transient(ServiceError),
    Fatal(ServiceError),
}

/// Runs `op` under `policy`. Returns the value and the number of attempts.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
    mut op: impl FnMut(u32) -> Result<T, Attempt>,
) -> Result<(T, u32), ServiceError> {
    let start = Instant::now();
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        let failure = match op(attempt) {
            Ok(v) => return Ok((v, attempt)),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(f) => f,
        };
        if attempt >= max {
            return Err(match failure {
                Attempt::RateLimited => ServiceError::RateLimited { attempts: attempt },
                Attempt::Timeout => ServiceError::Timeout {
                    elapsed_ms: start.elapsed().as_millis() as u64,
                },
                Attempt::Transient(e) | Attempt::Fatal(e) => e,
            });
        }
        sleep(policy.delay(attempt));
        attempt += 1;
    }
}
