//! Step-scoped exchange of values between Send and Recv kernels.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Names one transfer: `step;src_device;dst_device;edge`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RendezvousKey {
    pub step_id: u64,
    pub src: String,
    pub dst: String,
    pub edge: String,
}

impl RendezvousKey {
    pub fn new(step_id: u64, src: &str, dst: &str, edge: &str) -> Self {
        RendezvousKey {
            step_id,
            src: src.to_string(),
            dst: dst.to_string(),
            edge: edge.to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut it = s.splitn(4, ';');
        let bad = || Error::Wire(format!("malformed rendezvous key '{s}'"));
        let step_id = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let src = it.next().ok_or_else(bad)?;
        let dst = it.next().ok_or_else(bad)?;
        let edge = it.next().ok_or_else(bad)?;
        Ok(RendezvousKey::new(step_id, src, dst, edge))
    }
}

impl fmt::Display for RendezvousKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{};{};{};{}", self.step_id, self.src, self.dst, self.edge)
    }
}

/// `None` is a dead value.
pub type RecvCallback = Box<dyn FnOnce(Result<Option<Tensor>>) + Send>;

pub trait Rendezvous: Send + Sync {
    /// Publishes a value; each key may be published once per step.
    fn send(&self, key: &RendezvousKey, value: Option<Tensor>) -> Result<()>;
    /// Calls `done` once the value for `key` is available, possibly at once.
    fn recv_async(&self, key: &RendezvousKey, done: RecvCallback);
    /// Fails pending and future receives of the step.
    fn abort_step(&self, step_id: u64, reason: &str);
    /// Drops everything held for the step.
    fn cleanup_step(&self, step_id: u64);
}

enum Slot {
    Ready(Option<Tensor>),
    Waiting(RecvCallback),
}

#[derive(Default)]
struct StepTable {
    slots: HashMap<String, Slot>,
    published: HashSet<String>,
    aborted: Option<String>,
}

/// In-memory table. Local handoff moves the tensor itself, so the receiver
/// sees the sender's buffer without a copy.
#[derive(Default)]
pub struct LocalRendezvous {
    steps: Mutex<HashMap<u64, StepTable>>,
    /// Steps cleaned up after an abort; late values for them are ignored.
    finished: Mutex<HashSet<u64>>,
}

impl LocalRendezvous {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending_steps(&self) -> usize {
        self.steps.lock().unwrap().len()
    }
}

impl Rendezvous for LocalRendezvous {
    fn send(&self, key: &RendezvousKey, value: Option<Tensor>) -> Result<()> {
        if self.finished.lock().unwrap().contains(&key.step_id) {
            return Ok(());
        }
        let k = format!("{};{};{}", key.src, key.dst, key.edge);
        let waiter = {
            let mut steps = self.steps.lock().unwrap();
            let table = steps.entry(key.step_id).or_default();
            if let Some(reason) = &table.aborted {
                return Err(Error::Cancelled(reason.clone()));
            }
            if !table.published.insert(k.clone()) {
                return Err(Error::Consistency(format!("rendezvous key '{key}' published twice")));
            }
            match table.slots.remove(&k) {
                Some(Slot::Waiting(cb)) => Some(cb),
                Some(Slot::Ready(_)) => unreachable!("published set tracks ready slots"),
                None => {
                    table.slots.insert(k, Slot::Ready(value));
                    return Ok(());
                }
            }
        };
        if let Some(cb) = waiter {
            cb(Ok(value));
        }
        Ok(())
    }

    fn recv_async(&self, key: &RendezvousKey, done: RecvCallback) {
        let k = format!("{};{};{}", key.src, key.dst, key.edge);
        let ready = {
            let mut steps = self.steps.lock().unwrap();
            let table = steps.entry(key.step_id).or_default();
            if let Some(reason) = &table.aborted {
                Err(Error::Cancelled(reason.clone()))
            } else {
                match table.slots.remove(&k) {
                    Some(Slot::Ready(v)) => Ok(v),
                    Some(Slot::Waiting(_)) => Err(Error::Consistency(format!("rendezvous key '{key}' received twice"))),
                    None => {
                        table.slots.insert(k, Slot::Waiting(done));
                        return;
                    }
                }
            }
        };
        done(ready);
    }

    fn abort_step(&self, step_id: u64, reason: &str) {
        let waiters: Vec<RecvCallback> = {
            let mut steps = self.steps.lock().unwrap();
            let table = steps.entry(step_id).or_default();
            if table.aborted.is_none() {
                table.aborted = Some(reason.to_string());
            }
            let keys: Vec<String> = table
                .slots
                .iter()
                .filter(|(_, s)| matches!(s, Slot::Waiting(_)))
                .map(|(k, _)| k.clone())
                .collect();
            keys.into_iter()
                .filter_map(|k| match table.slots.remove(&k) {
                    Some(Slot::Waiting(cb)) => Some(cb),
                    _ => None,
                })
                .collect()
        };
        for cb in waiters {
            cb(Err(Error::Cancelled(reason.to_string())));
        }
    }

    fn cleanup_step(&self, step_id: u64) {
        let removed = self.steps.lock().unwrap().remove(&step_id);
        if let Some(t) = removed {
            if t.aborted.is_some() {
                let mut f = self.finished.lock().unwrap();
                // bounded memory: forget very old aborted steps
                if f.len() > 4096 {
                    f.clear();
                }
                f.insert(step_id);
            }
            for (_, s) in t.slots {
                if let Slot::Waiting(cb) = s {
                    cb(Err(Error::Cancelled("step finished before value arrived".into())));
                }
            }
        }
    }
}
