use std::time::Duration;

use crate::error::Result;

/// Exponential backoff: waits `base * 2^attempt` between attempts and gives up
/// after `max_retries` retries. Only retryable errors are retried.
pub fn with_backoff<T>(
    max_retries: u32,
    base_delay: Duration,
    mut op: impl FnMut(u32) -> Result<T>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        match op(attempt) {
            Ok(value) => return Ok(value),
            Err(err) if err.is_retryable() && attempt < max_retries => {
                let delay = base_delay.saturating_mul(1 << attempt.min(16));
                log::warn!(
                    "attempt {} failed ({err}); retrying in {delay:?}",
                    attempt + 1
                );
                std::thread::sleep(delay);
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}
