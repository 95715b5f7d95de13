use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Nanoseconds on the engine's monotonic clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn saturating_since(self, earlier: Timestamp) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

/// Monotonic clock anchored at engine start. Wall-clock time is never used
/// for measurements.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }

    pub fn now(&self) -> Timestamp {
        self.at(Instant::now())
    }

    pub fn at(&self, instant: Instant) -> Timestamp {
        Timestamp(instant.saturating_duration_since(self.origin).as_nanos() as u64)
    }

    pub fn instant(&self, ts: Timestamp) -> Instant {
        self.origin + Duration::from_nanos(ts.0)
    }
}
