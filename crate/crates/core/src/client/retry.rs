use std::thread;
use std::time::Duration;

use super::{ClientError, ClientRequest, ClientResponse, ModelClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

/// Retries transport failures with exponential backoff. Fixture misses and
/// cassette errors are returned immediately.
pub struct Retrying<C> {
    inner: C,
    policy: RetryPolicy,
}

impl<C> Retrying<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<C: ModelClient> ModelClient for Retrying<C> {
    fn call(&self, req: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let attempts = self.policy.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            match self.inner.call(req) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transport() => {
                    log::warn!("{} call failed (attempt {}/{attempts}): {e}", req.kind, attempt + 1);
                    last = Some(e);
                    if attempt + 1 < attempts {
                        thread::sleep(self.policy.delay_for(attempt));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| ClientError::Transport("no attempts made".into())))
    }
}
