//! Per-provider admission control: a bound on in-flight requests plus an
//! optional token-bucket request rate.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct ProviderLimits {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
    bucket: Option<Mutex<Bucket>>,
}

#[derive(Debug)]
struct Bucket {
    rate_per_sec: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

pub struct Permit<'a> {
    limits: &'a ProviderLimits,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limits.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limits.released.notify_one();
    }
}

impl ProviderLimits {
    /// `requests_per_second = None` disables rate limiting.
    pub fn new(max_in_flight: usize, requests_per_second: Option<f64>) -> Self {
        let bucket = requests_per_second.filter(|r| *r > 0.0).map(|rate| {
            let capacity = rate.max(1.0);
            Mutex::new(Bucket { rate_per_sec: rate, capacity, tokens: capacity, last: Instant::now() })
        });
        ProviderLimits {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            bucket,
        }
    }

    pub fn unlimited() -> Self {
        ProviderLimits::new(usize::MAX, None)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Blocks until a request may start. The returned permit releases the
    /// in-flight slot when dropped.
    pub fn acquire(&self) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock().expect("limiter poisoned");
            while *n >= self.max_in_flight {
                n = self.released.wait(n).expect("limiter poisoned");
            }
            *n += 1;
        }
        if let Some(bucket) = &self.bucket {
            loop {
                let wait = {
                    let mut b = bucket.lock().expect("limiter poisoned");
                    let now = Instant::now();
                    let refill = now.duration_since(b.last).as_secs_f64() * b.rate_per_sec;
                    b.tokens = (b.tokens + refill).min(b.capacity);
                    b.last = now;
                    if b.tokens >= 1.0 {
                        b.tokens -= 1.0;
                        None
                    } else {
                        Some(Duration::from_secs_f64((1.0 - b.tokens) / b.rate_per_sec))
                    }
                };
                match wait {
                    None => break,
                    Some(d) => std::thread::sleep(d),
                }
            }
        }
        Permit { limits: self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn in_flight_never_exceeds_limit() {
        let limits = ProviderLimits::new(2, None);
        let current = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _permit = limits.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert!(peak.load(Ordering::SeqCst) >= 1);
    }

    #[test]
    fn token_bucket_spaces_requests() {
        let limits = ProviderLimits::new(4, Some(50.0));
        let start = Instant::now();
        // 50 burst tokens, then 10 more at 50/s take about 0.2 s.
        for _ in 0..60 {
            drop(limits.acquire());
        }
        assert!(start.elapsed() >= Duration::from_millis(150));
    }
}
