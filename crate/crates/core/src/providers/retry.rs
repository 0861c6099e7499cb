use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ProviderError;

/// Bounded retry with exponential backoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first one.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    /// Delay before retry number `retry` (0-based): `initial * 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(63)).unwrap_or(u64::MAX);
        let ms = self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }

    /// The sleeps between consecutive attempts.
    pub fn delays(&self) -> Vec<Duration> {
        (0..self.max_attempts.saturating_sub(1))
            .map(|r| self.delay(r))
            .collect()
    }
}

/// Runs `op` until it succeeds, fails permanently, or the attempts run out.
/// `op` receives the 1-based attempt number; `sleep` is called between attempts.
///
/// A transient failure on the last attempt is reported as `Unavailable` with
/// the attempt count.
pub fn retry_with_backoff<T, F, S>(policy: &RetryPolicy, mut sleep: S, mut op: F) -> Result<T, ProviderError>
where
    F: FnMut(u32) -> Result<T, ProviderError>,
    S: FnMut(Duration),
{
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(ProviderError::Unavailable { message, .. }) => {
                log::warn!("provider attempt {attempt}/{attempts} failed: {message}");
                last = message;
                if attempt < attempts {
                    sleep(policy.delay(attempt - 1));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(ProviderError::Unavailable {
        attempts,
        message: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unavailable() -> ProviderError {
        ProviderError::Unavailable {
            attempts: 1,
            message: "connection refused".into(),
        }
    }

    #[test]
    fn exhausts_exactly_max_attempts() {
        let mut calls = 0;
        let mut slept = Vec::new();
        let policy = RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 10,
            max_backoff_ms: 1000,
        };
        let err = retry_with_backoff::<(), _, _>(
            &policy,
            |d| slept.push(d),
            |_| {
                calls += 1;
                Err(unavailable())
            },
        )
        .unwrap_err();
        assert_eq!(calls, 3);
        assert_eq!(
            err,
            ProviderError::Unavailable {
                attempts: 3,
                message: "connection refused".into()
            }
        );
        assert_eq!(slept, vec![Duration::from_millis(10), Duration::from_millis(20)]);
    }

    #[test]
    fn never_retries_bad_request_or_auth() {
        for e in [ProviderError::BadRequest("x".into()), ProviderError::Auth("y".into())] {
            let mut calls = 0;
            let got = retry_with_backoff::<(), _, _>(
                &RetryPolicy::no_delay(5),
                |_| {},
                |_| {
                    calls += 1;
                    Err(e.clone())
                },
            );
            assert_eq!(calls, 1);
            assert_eq!(got.unwrap_err(), e);
        }
    }

    #[test]
    fn succeeds_on_later_attempt() {
        let got = retry_with_backoff(
            &RetryPolicy::no_delay(4),
            |_| {},
            |n| {
                if n < 3 {
                    Err(unavailable())
                } else {
                    Ok(n)
                }
            },
        );
        assert_eq!(got, Ok(3));
    }

    proptest! {
        #[test]
        fn delays_are_bounded_and_non_decreasing(
            attempts in 0u32..80,
            initial in 0u64..10_000,
            cap in 0u64..100_000,
        ) {
            let policy = RetryPolicy { max_attempts: attempts, initial_backoff_ms: initial, max_backoff_ms: cap };
            let delays = policy.delays();
            prop_assert_eq!(delays.len() as u32, attempts.saturating_sub(1));
            prop_assert!(delays.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(delays.iter().all(|d| *d <= Duration::from_millis(cap)));
        }

        #[test]
        fn attempt_count_never_exceeds_max(attempts in 1u32..20, succeed_at in 1u32..30) {
            let mut calls = 0u32;
            let _ = retry_with_backoff(&RetryPolicy::no_delay(attempts), |_| {}, |n| {
                calls += 1;
                if n == succeed_at { Ok(()) } else { Err(unavailable()) }
            });
            prop_assert!(calls <= attempts);
            prop_assert_eq!(calls, attempts.min(succeed_at));
        }
    }
}
