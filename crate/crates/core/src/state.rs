//! Mutable resources shared between steps: variables and blocking FIFO
//! queues, reached through reference handles.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock, Weak};

use crate::cancel::{CancelToken, POLL};
use crate::error::{Error, Result};
use crate::tensor::{ops, DType, Shape, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceKind {
    Variable,
    Queue,
}

#[derive(Debug, Clone)]
pub enum Resource {
    Variable(Arc<VariableState>),
    Queue(Arc<QueueState>),
}

impl Resource {
    pub fn id(&self) -> u64 {
        match self {
            Resource::Variable(v) => v.id,
            Resource::Queue(q) => q.id,
        }
    }

    fn downgrade(&self) -> WeakResource {
        match self {
            Resource::Variable(v) => WeakResource::Variable(Arc::downgrade(v)),
            Resource::Queue(q) => WeakResource::Queue(Arc::downgrade(q)),
        }
    }
}

#[derive(Debug, Clone)]
enum WeakResource {
    Variable(Weak<VariableState>),
    Queue(Weak<QueueState>),
}

/// A typed capability for a resource hosted on one device. Handles do not
/// keep the resource alive; using one after its manager dropped the
/// resource fails with a dangling-handle error.
#[derive(Debug, Clone)]
pub struct RefHandle {
    id: u64,
    device: String,
    resource: WeakResource,
}

impl RefHandle {
    pub fn new(resource: &Resource, device: &str) -> Self {
        RefHandle {
            id: resource.id(),
            device: device.to_string(),
            resource: resource.downgrade(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn kind(&self) -> ResourceKind {
        match self.resource {
            WeakResource::Variable(_) => ResourceKind::Variable,
            WeakResource::Queue(_) => ResourceKind::Queue,
        }
    }

    pub fn variable(&self) -> Result<Arc<VariableState>> {
        match &self.resource {
            WeakResource::Variable(w) => w.upgrade().ok_or(Error::DanglingHandle(self.id)),
            WeakResource::Queue(_) => Err(Error::invalid(format!("resource {} is a queue, not a variable", self.id))),
        }
    }

    pub fn queue(&self) -> Result<Arc<QueueState>> {
        match &self.resource {
            WeakResource::Queue(w) => w.upgrade().ok_or(Error::DanglingHandle(self.id)),
            WeakResource::Variable(_) => Err(Error::invalid(format!("resource {} is a variable, not a queue", self.id))),
        }
    }
}

/// A variable's mutable buffer. Dtype and shape are fixed at creation.
#[derive(Debug)]
pub struct VariableState {
    id: u64,
    dtype: DType,
    shape: Shape,
    value: RwLock<Tensor>,
}

impl VariableState {
    /// A zero-initialized variable.
    pub fn new(dtype: DType, shape: Shape) -> Self {
        VariableState {
            id: next_id(),
            dtype,
            value: RwLock::new(Tensor::zeros(dtype, shape.clone())),
            shape,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    fn conform(&self, op: &str, t: &Tensor) -> Result<()> {
        if t.dtype() != self.dtype {
            return Err(Error::DTypeMismatch {
                op: op.into(),
                expected: self.dtype,
                got: t.dtype(),
            });
        }
        if *t.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                op: op.into(),
                a: self.shape.clone(),
                b: t.shape().clone(),
            });
        }
        Ok(())
    }

    /// A snapshot of the current value. Writers copy the buffer when a
    /// snapshot is still shared, so a snapshot never changes.
    pub fn read(&self) -> Tensor {
        self.value.read().unwrap().clone()
    }

    pub fn assign(&self, value: &Tensor) -> Result<Tensor> {
        self.conform("Assign", value)?;
        let mut v = self.value.write().unwrap();
        *v = value.clone();
        Ok(v.clone())
    }

    /// `State ← State + alpha · x` under the write lock.
    pub fn axpy(&self, x: &Tensor, alpha: f64) -> Result<Tensor> {
        self.conform("AssignAdd", x)?;
        let mut v = self.value.write().unwrap();
        ops::axpy_in_place(&mut v, x, alpha)?;
        Ok(v.clone())
    }

    pub fn assign_add(&self, x: &Tensor) -> Result<Tensor> {
        self.axpy(x, 1.0)
    }

    pub fn assign_sub(&self, x: &Tensor) -> Result<Tensor> {
        self.axpy(x, -1.0)
    }

    /// Runs `f` on the buffer with exclusive access, in place unless a
    /// snapshot still shares it. The result must keep the variable's dtype
    /// and shape, and `f` must check its arguments before writing: an error
    /// keeps whatever `f` left behind.
    pub fn update<R>(&self, f: impl FnOnce(&mut Tensor) -> Result<R>) -> Result<R> {
        let mut v = self.value.write().unwrap();
        let mut work = std::mem::replace(&mut *v, Tensor::zeros(self.dtype, Shape::scalar()));
        let r = f(&mut work);
        let ok = self.conform("update", &work);
        if ok.is_ok() {
            *v = work;
        } else {
            *v = Tensor::zeros(self.dtype, self.shape.clone());
        }
        ok?;
        r
    }
}

#[derive(Debug, Default)]
struct QueueInner {
    items: VecDeque<Vec<Tensor>>,
    closed: bool,
}

/// Bounded FIFO of tensor tuples with blocking enqueue and dequeue.
#[derive(Debug)]
pub struct QueueState {
    id: u64,
    capacity: usize,
    types: Vec<DType>,
    shapes: Option<Vec<Shape>>,
    inner: Mutex<QueueInner>,
    not_empty: Condvar,
    not_full: Condvar,
}

impl QueueState {
    pub fn new(capacity: usize, types: Vec<DType>, shapes: Option<Vec<Shape>>) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("queue capacity must be >= 1"));
        }
        if types.is_empty() {
            return Err(Error::invalid("queue needs at least one component"));
        }
        if let Some(s) = &shapes {
            if s.len() != types.len() {
                return Err(Error::invalid("queue shapes and component types differ in length"));
            }
        }
        Ok(QueueState {
            id: next_id(),
            capacity,
            types,
            shapes,
            inner: Mutex::new(QueueInner::default()),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn component_types(&self) -> &[DType] {
        &self.types
    }

    pub fn size(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    fn conform(&self, tuple: &[Tensor]) -> Result<()> {
        if tuple.len() != self.types.len() {
            return Err(Error::invalid(format!(
                "queue expects {} components, got {}",
                self.types.len(),
                tuple.len()
            )));
        }
        for (i, t) in tuple.iter().enumerate() {
            if t.dtype() != self.types[i] {
                return Err(Error::DTypeMismatch {
                    op: "QueueEnqueue".into(),
                    expected: self.types[i],
                    got: t.dtype(),
                });
            }
            if let Some(shapes) = &self.shapes {
                if *t.shape() != shapes[i] {
                    return Err(Error::ShapeMismatch {
                        op: "QueueEnqueue".into(),
                        a: shapes[i].clone(),
                        b: t.shape().clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Blocks while the queue is full. Fails once the queue is closed.
    pub fn enqueue(&self, tuple: Vec<Tensor>, cancel: &CancelToken) -> Result<()> {
        self.conform(&tuple)?;
        let mut g = self.inner.lock().unwrap();
        loop {
            if g.closed {
                return Err(Error::QueueClosed);
            }
            if g.items.len() < self.capacity {
                g.items.push_back(tuple);
                self.not_empty.notify_one();
                return Ok(());
            }
            cancel.check()?;
            g = self.not_full.wait_timeout(g, POLL).unwrap().0;
        }
    }

    /// Blocks while empty. A closed, drained queue yields an out-of-range
    /// error, the normal end-of-input signal.
    pub fn dequeue(&self, cancel: &CancelToken) -> Result<Vec<Tensor>> {
        let mut g = self.inner.lock().unwrap();
        loop {
            if let Some(t) = g.items.pop_front() {
                self.not_full.notify_one();
                return Ok(t);
            }
            if g.closed {
                return Err(Error::OutOfRange("queue is closed and has no more elements".into()));
            }
            cancel.check()?;
            g = self.not_empty.wait_timeout(g, POLL).unwrap().0;
        }
    }

    /// Removes exactly `n` tuples at once, waiting until that many are present.
    pub fn dequeue_many(&self, n: usize, cancel: &CancelToken) -> Result<Vec<Vec<Tensor>>> {
        if n > self.capacity {
            return Err(Error::invalid(format!("cannot dequeue {n} from a queue of capacity {}", self.capacity)));
        }
        let mut g = self.inner.lock().unwrap();
        loop {
            if g.items.len() >= n {
                let out: Vec<_> = g.items.drain(..n).collect();
                self.not_full.notify_all();
                return Ok(out);
            }
            if g.closed {
                return Err(Error::OutOfRange(format!(
                    "queue is closed with {} elements, fewer than {n}",
                    g.items.len()
                )));
            }
            cancel.check()?;
            g = self.not_empty.wait_timeout(g, POLL).unwrap().0;
        }
    }

    /// Dequeues until `m` tuples whose i64 component `tag` is at least
    /// `current` have been collected; older tuples are discarded. Returns the
    /// fresh tuples and the number discarded.
    pub fn dequeue_fresh(&self, m: usize, tag: usize, current: i64, cancel: &CancelToken) -> Result<(Vec<Vec<Tensor>>, usize)> {
        if tag >= self.types.len() {
            return Err(Error::invalid(format!("tag component {tag} out of range")));
        }
        let mut fresh = Vec::with_capacity(m);
        let mut stale = 0;
        while fresh.len() < m {
            let t = self.dequeue(cancel)?;
            if t[tag].scalar_value::<i64>()? >= current {
                fresh.push(t);
            } else {
                stale += 1;
            }
        }
        Ok((fresh, stale))
    }

    /// Idempotent. Wakes every blocked caller.
    pub fn close(&self) {
        let mut g = self.inner.lock().unwrap();
        g.closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }
}

/// Resources hosted by one device, keyed by the name of the node that
/// created them. They persist across steps.
#[derive(Debug, Default)]
pub struct ResourceMgr {
    resources: Mutex<HashMap<String, Resource>>,
}

impl ResourceMgr {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the resource named `name`, creating it on first use. An
    /// existing resource of the other kind is an error.
    pub fn lookup_or_create(
        &self,
        name: &str,
        kind: ResourceKind,
        create: impl FnOnce() -> Result<Resource>,
    ) -> Result<Resource> {
        let mut m = self.resources.lock().unwrap();
        if let Some(r) = m.get(name) {
            let same = matches!(
                (r, kind),
                (Resource::Variable(_), ResourceKind::Variable) | (Resource::Queue(_), ResourceKind::Queue)
            );
            if !same {
                return Err(Error::invalid(format!("resource '{name}' already exists with another kind")));
            }
            return Ok(r.clone());
        }
        let r = create()?;
        m.insert(name.to_string(), r.clone());
        Ok(r)
    }

    pub fn get(&self, name: &str) -> Option<Resource> {
        self.resources.lock().unwrap().get(name).cloned()
    }

    pub fn variable(&self, name: &str) -> Option<Arc<VariableState>> {
        match self.get(name)? {
            Resource::Variable(v) => Some(v),
            Resource::Queue(_) => None,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.resources.lock().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    /// Drops every resource. Queues are closed first so blocked callers wake.
    pub fn clear(&self) {
        let drained: Vec<Resource> = self.resources.lock().unwrap().drain().map(|(_, r)| r).collect();
        for r in drained {
            if let Resource::Queue(q) = r {
                q.close();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;
    use std::time::{Duration, Instant};

    fn var(dtype: DType, dims: &[usize]) -> VariableState {
        VariableState::new(dtype, Shape::new(dims.to_vec()))
    }

    #[test]
    fn variables_start_at_zero() {
        let v = var(DType::F32, &[2]);
        assert_eq!(v.read().to_vec::<f32>().unwrap(), vec![0.0, 0.0]);
        let big = var(DType::F64, &[1_000_000]);
        assert!(big.read().to_vec::<f64>().unwrap().iter().all(|&x| x == 0.0));
        assert_ne!(v.id(), big.id());
    }

    #[test]
    fn assign_then_add() {
        let v = var(DType::F64, &[1]);
        v.assign(&Tensor::vector(vec![5.0f64])).unwrap();
        assert_eq!(v.read().to_vec::<f64>().unwrap(), vec![5.0]);
        v.assign_add(&Tensor::vector(vec![3.0f64])).unwrap();
        assert_eq!(v.read().to_vec::<f64>().unwrap(), vec![8.0]);
        assert!(v.assign(&Tensor::vector(vec![1.0f64, 2.0])).is_err());
        assert!(v.assign_add(&Tensor::vector(vec![1i64])).is_err());
    }

    #[test]
    fn snapshots_are_stable() {
        let v = var(DType::I64, &[3]);
        let before = v.read();
        v.assign_add(&Tensor::vector(vec![1i64, 1, 1])).unwrap();
        assert_eq!(before.to_vec::<i64>().unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn concurrent_assign_add_is_atomic() {
        let v = Arc::new(var(DType::I64, &[]));
        let hs: Vec<_> = (0..100)
            .map(|_| {
                let v = v.clone();
                thread::spawn(move || v.assign_add(&Tensor::scalar(1i64)).unwrap())
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert_eq!(v.read().scalar_value::<i64>().unwrap(), 100);
    }

    #[test]
    fn reads_never_see_torn_writes() {
        // writers fill the whole buffer with one canary value per write
        let v = Arc::new(var(DType::I64, &[4096]));
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let writers: Vec<_> = (1..4)
            .map(|k| {
                let v = v.clone();
                thread::spawn(move || {
                    for i in 0..200i64 {
                        v.assign(&Tensor::vector(vec![k * 1000 + i; 4096])).unwrap();
                    }
                })
            })
            .collect();
        let reader = {
            let (v, stop) = (v.clone(), stop.clone());
            thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let s = v.read().to_vec::<i64>().unwrap();
                    assert!(s.iter().all(|&x| x == s[0]));
                }
            })
        };
        for w in writers {
            w.join().unwrap();
        }
        stop.store(true, Ordering::Relaxed);
        reader.join().unwrap();
    }

    fn q(cap: usize) -> Arc<QueueState> {
        Arc::new(QueueState::new(cap, vec![DType::I64], None).unwrap())
    }

    fn item(x: i64) -> Vec<Tensor> {
        vec![Tensor::scalar(x)]
    }

    fn val(t: &[Tensor]) -> i64 {
        t[0].scalar_value::<i64>().unwrap()
    }

    #[test]
    fn queue_basics() {
        let c = CancelToken::new();
        let q1 = q(1);
        assert_eq!(q1.size(), 0);
        q1.enqueue(item(7), &c).unwrap();
        assert_eq!(val(&q1.dequeue(&c).unwrap()), 7);
        let tuple = QueueState::new(2, vec![DType::I64, DType::F32], Some(vec![Shape::scalar(), Shape::new(vec![2])])).unwrap();
        tuple
            .enqueue(vec![Tensor::scalar(1i64), Tensor::vector(vec![1.0f32, 2.0])], &c)
            .unwrap();
        assert!(tuple.enqueue(vec![Tensor::scalar(1i64), Tensor::vector(vec![1.0f32])], &c).is_err());
        assert!(QueueState::new(0, vec![DType::I64], None).is_err());
    }

    #[test]
    fn fill_and_drain_keeps_order() {
        let c = CancelToken::new();
        let q = q(10_000);
        for i in 0..10_000 {
            q.enqueue(item(i), &c).unwrap();
        }
        for i in 0..10_000 {
            assert_eq!(val(&q.dequeue(&c).unwrap()), i);
        }
    }

    #[test]
    fn dequeue_waits_for_enqueue() {
        let q = q(1);
        let q2 = q.clone();
        let h = thread::spawn(move || val(&q2.dequeue(&CancelToken::new()).unwrap()));
        thread::sleep(Duration::from_millis(30));
        q.enqueue(item(42), &CancelToken::new()).unwrap();
        assert_eq!(h.join().unwrap(), 42);
    }

    #[test]
    fn third_producer_blocks_until_dequeue() {
        let c = CancelToken::new();
        let q = q(2);
        q.enqueue(item(1), &c).unwrap();
        q.enqueue(item(2), &c).unwrap();
        let q2 = q.clone();
        let t0 = Instant::now();
        let h = thread::spawn(move || {
            q2.enqueue(item(3), &CancelToken::new()).unwrap();
            t0.elapsed()
        });
        thread::sleep(Duration::from_millis(80));
        assert_eq!(q.size(), 2);
        assert_eq!(val(&q.dequeue(&c).unwrap()), 1);
        assert!(h.join().unwrap() >= Duration::from_millis(80));
        assert_eq!(q.size(), 2);
    }

    #[test]
    fn close_semantics() {
        let c = CancelToken::new();
        let empty = q(1);
        let e2 = empty.clone();
        let h = thread::spawn(move || e2.dequeue(&CancelToken::new()));
        thread::sleep(Duration::from_millis(20));
        empty.close();
        assert!(matches!(h.join().unwrap(), Err(Error::OutOfRange(_))));

        let q = q(4);
        q.enqueue(item(1), &c).unwrap();
        q.enqueue(item(2), &c).unwrap();
        q.close();
        q.close();
        assert!(matches!(q.enqueue(item(3), &c), Err(Error::QueueClosed)));
        assert_eq!(val(&q.dequeue(&c).unwrap()), 1);
        assert_eq!(val(&q.dequeue(&c).unwrap()), 2);
        assert!(matches!(q.dequeue(&c), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn cancellation_wakes_blocked_dequeue() {
        let q = q(1);
        let c = CancelToken::new();
        let (q2, c2) = (q.clone(), c.clone());
        let h = thread::spawn(move || q2.dequeue(&c2));
        thread::sleep(Duration::from_millis(20));
        c.cancel("step aborted");
        assert!(matches!(h.join().unwrap(), Err(Error::Cancelled(_))));
    }

    #[test]
    fn fresh_dequeue_drops_stale_tags() {
        let c = CancelToken::new();
        let q = Arc::new(QueueState::new(8, vec![DType::F64, DType::I64], None).unwrap());
        for (x, tag) in [(1.0, 0i64), (2.0, 1), (3.0, 0), (4.0, 1), (5.0, 1)] {
            q.enqueue(vec![Tensor::scalar(x), Tensor::scalar(tag)], &c).unwrap();
        }
        let (fresh, stale) = q.dequeue_fresh(2, 1, 1, &c).unwrap();
        assert_eq!(stale, 2);
        let xs: Vec<f64> = fresh.iter().map(|t| t[0].scalar_value::<f64>().unwrap()).collect();
        assert_eq!(xs, vec![2.0, 4.0]);
        assert_eq!(q.size(), 1);
    }

    #[test]
    fn dangling_handles() {
        let mgr = ResourceMgr::new();
        let r = mgr
            .lookup_or_create("v", ResourceKind::Variable, || {
                Ok(Resource::Variable(Arc::new(var(DType::F32, &[1]))))
            })
            .unwrap();
        let h = RefHandle::new(&r, "/job:w/task:0/cpu:0");
        drop(r);
        assert!(h.variable().is_ok());
        assert!(h.queue().is_err());
        mgr.clear();
        assert!(matches!(h.variable(), Err(Error::DanglingHandle(_))));
    }
}
