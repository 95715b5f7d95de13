use std::time::Duration;

use parking_lot::{Condvar, Mutex};

/// Payload-free wake-up latch.
///
/// `raise` sets the latch; `wait` returns immediately if it is set and
/// clears it, otherwise parks until raised or the timeout expires. A raise
/// that lands while the waiter is busy is never lost.
#[derive(Debug, Default)]
pub struct ChangeSignal {
    raised: Mutex<bool>,
    cv: Condvar,
}

impl ChangeSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        *self.raised.lock() = true;
        self.cv.notify_all();
    }

    /// Returns true if the latch was raised, false on timeout.
    pub fn wait(&self, timeout: Duration) -> bool {
        let mut raised = self.raised.lock();
        if !*raised {
            self.cv.wait_for(&mut raised, timeout);
        }
        std::mem::replace(&mut *raised, false)
    }
}
