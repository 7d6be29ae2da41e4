//! Threads for kernels that may block.
//!
//! A blocked kernel must never hold up another one it might be waiting on,
//! so a new thread is started whenever every existing one is busy. Threads
//! idle for `IDLE_TIMEOUT` exit.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

type Job = Box<dyn FnOnce() + Send>;

const IDLE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Default)]
struct State {
    jobs: VecDeque<Job>,
    idle: usize,
    threads: usize,
}

pub(crate) struct BlockingPool {
    state: Mutex<State>,
    cv: Condvar,
}

impl BlockingPool {
    pub(crate) fn global() -> &'static BlockingPool {
        static POOL: OnceLock<BlockingPool> = OnceLock::new();
        POOL.get_or_init(|| BlockingPool {
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
        })
    }

    pub(crate) fn execute(&'static self, job: impl FnOnce() + Send + 'static) {
        let mut st = self.state.lock().unwrap();
        st.jobs.push_back(Box::new(job));
        if st.jobs.len() > st.idle {
            st.threads += 1;
            let n = st.threads;
            drop(st);
            std::thread::Builder::new()
                .name(format!("miniflow-blocking-{n}"))
                .spawn(move || self.worker())
                .expect("spawn blocking worker");
        } else {
            drop(st);
            self.cv.notify_one();
        }
    }

    fn worker(&self) {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(job) = st.jobs.pop_front() {
                drop(st);
                job();
                st = self.state.lock().unwrap();
                continue;
            }
            st.idle += 1;
            let (guard, res) = self.cv.wait_timeout(st, IDLE_TIMEOUT).unwrap();
            st = guard;
            st.idle -= 1;
            if res.timed_out() && st.jobs.is_empty() {
                st.threads -= 1;
                return;
            }
        }
    }
}
