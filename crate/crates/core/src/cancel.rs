//! Step cancellation shared by blocking kernels, rendezvous and queues.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

/// How often blocked waits re-check for cancellation.
pub const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Default)]
pub struct CancelToken {
    inner: Arc<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    flag: AtomicBool,
    reason: Mutex<String>,
}

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first reason given wins.
    pub fn cancel(&self, reason: &str) {
        let mut r = self.inner.reason.lock().unwrap();
        if !self.inner.flag.load(Ordering::Acquire) {
            *r = reason.to_string();
            self.inner.flag.store(true, Ordering::Release);
        }
    }

    pub fn is_cancelled(&self) -> bool {
        self.inner.flag.load(Ordering::Acquire)
    }

    pub fn reason(&self) -> String {
        self.inner.reason.lock().unwrap().clone()
    }

    pub fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Cancelled(self.reason()))
        } else {
            Ok(())
        }
    }
}
