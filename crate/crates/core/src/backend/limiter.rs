use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Sliding-window limiter: at most `limit` admissions in any `window`.
#[derive(Debug)]
pub struct RateLimiter {
    limit: usize,
    window: Duration,
    admitted: Mutex<VecDeque<Instant>>,
    log: Option<Mutex<Vec<Instant>>>,
}

impl RateLimiter {
    pub fn per_minute(limit: u32) -> Self {
        Self::new(limit as usize, Duration::from_secs(60))
    }

    pub fn new(limit: usize, window: Duration) -> Self {
        RateLimiter {
            limit: limit.max(1),
            window,
            admitted: Mutex::new(VecDeque::new()),
            log: None,
        }
    }

    /// Keeps every admission time for inspection.
    pub fn with_admission_log(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn window(&self) -> Duration {
        self.window
    }

    /// Blocks until a slot is free, then takes it.
    pub fn acquire(&self) {
        loop {
            match self.admit(Instant::now()) {
                Ok(()) => return,
                Err(wait) => std::thread::sleep(wait),
            }
        }
    }

    /// Takes a slot if one is free right now.
    pub fn try_acquire(&self) -> bool {
        self.admit(Instant::now()).is_ok()
    }

    fn admit(&self, now: Instant) -> Result<(), Duration> {
        let mut admitted = self.admitted.lock().expect("limiter lock");
        while let Some(&front) = admitted.front() {
            if now.duration_since(front) >= self.window {
                admitted.pop_front();
            } else {
                break;
            }
        }
        if admitted.len() < self.limit {
            admitted.push_back(now);
            if let Some(log) = &self.log {
                log.lock().expect("limiter log lock").push(now);
            }
            Ok(())
        } else {
            let oldest = *admitted.front().expect("full window is non-empty");
            Err((oldest + self.window).saturating_duration_since(now) + Duration::from_micros(100))
        }
    }

    pub fn admissions(&self) -> Vec<Instant> {
        self.log
            .as_ref()
            .map(|l| l.lock().expect("limiter log lock").clone())
            .unwrap_or_default()
    }

    /// Largest number of logged admissions falling inside any one window.
    pub fn max_in_window(&self) -> usize {
        let mut times = self.admissions();
        times.sort();
        let mut best = 0;
        let mut start = 0;
        for end in 0..times.len() {
            while times[end].duration_since(times[start]) >= self.window {
                start += 1;
            }
            best = best.max(end - start + 1);
        }
        best
    }
}
