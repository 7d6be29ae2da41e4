//! Kernel registry and the context kernels run in.

mod builtin;

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::cancel::CancelToken;
use crate::error::{Error, Result};
use crate::graph::NodeDef;
use crate::runtime::rendezvous::Rendezvous;
use crate::state::{RefHandle, ResourceMgr};
use crate::tensor::{DType, Tensor};

pub const CPU: &str = "cpu";

/// A live value on an edge.
#[derive(Debug, Clone)]
pub enum Value {
    Tensor(Tensor),
    Handle(RefHandle),
}

impl Value {
    pub fn tensor(&self) -> Result<&Tensor> {
        match self {
            Value::Tensor(t) => Ok(t),
            Value::Handle(h) => Err(Error::invalid(format!("expected a tensor, got a handle to resource {}", h.id()))),
        }
    }

    pub fn handle(&self) -> Result<&RefHandle> {
        match self {
            Value::Handle(h) => Ok(h),
            Value::Tensor(t) => Err(Error::invalid(format!("expected a resource handle, got a {} tensor", t.dtype()))),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            Value::Tensor(t) => Ok(t),
            Value::Handle(h) => Err(Error::invalid(format!("expected a tensor, got a handle to resource {}", h.id()))),
        }
    }
}

impl From<Tensor> for Value {
    fn from(t: Tensor) -> Self {
        Value::Tensor(t)
    }
}

/// A device as seen by kernels: its name and the resources it hosts.
#[derive(Debug)]
pub struct Device {
    pub name: String,
    pub device_type: String,
    pub resources: ResourceMgr,
}

impl Device {
    pub fn cpu(name: impl Into<String>) -> Self {
        Device {
            name: name.into(),
            device_type: CPU.to_string(),
            resources: ResourceMgr::new(),
        }
    }
}

/// Everything a kernel may touch beyond its inputs during one step.
pub struct StepEnv {
    pub step_id: u64,
    pub device: Arc<Device>,
    pub rendezvous: Arc<dyn Rendezvous>,
    pub cancel: CancelToken,
    /// Fed tensors keyed by endpoint string.
    pub feeds: HashMap<String, Tensor>,
}

pub struct OpContext<'a> {
    pub node: &'a NodeDef,
    pub inputs: Vec<Value>,
    /// `None` leaves the output dead.
    pub outputs: Vec<Option<Value>>,
    pub env: &'a StepEnv,
}

impl<'a> OpContext<'a> {
    pub fn input(&self, i: usize) -> Result<&Tensor> {
        self.inputs
            .get(i)
            .ok_or_else(|| Error::Internal(format!("missing input {i}")))?
            .tensor()
    }

    pub fn handle(&self, i: usize) -> Result<&RefHandle> {
        self.inputs
            .get(i)
            .ok_or_else(|| Error::Internal(format!("missing input {i}")))?
            .handle()
    }

    pub fn tensors(&self, range: std::ops::Range<usize>) -> Result<Vec<Tensor>> {
        range.map(|i| self.input(i).cloned()).collect()
    }

    pub fn set(&mut self, i: usize, v: impl Into<Value>) {
        self.outputs[i] = Some(v.into());
    }
}

pub trait OpKernel: Send + Sync {
    fn compute(&self, ctx: &mut OpContext<'_>) -> Result<()>;
}

impl<F> OpKernel for F
where
    F: Fn(&mut OpContext<'_>) -> Result<()> + Send + Sync,
{
    fn compute(&self, ctx: &mut OpContext<'_>) -> Result<()> {
        self(ctx)
    }
}

/// Builds a kernel for one node; attributes are read here once.
pub type KernelFactory = Arc<dyn Fn(&NodeDef) -> Result<Box<dyn OpKernel>> + Send + Sync>;

type Key = (String, String, Option<DType>);

fn registry() -> &'static RwLock<HashMap<Key, KernelFactory>> {
    static REG: OnceLock<RwLock<HashMap<Key, KernelFactory>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m = HashMap::new();
        builtin::register_all(&mut |op: &str, dtype: Option<DType>, f: KernelFactory| {
            m.insert((op.to_string(), CPU.to_string(), dtype), f);
        });
        RwLock::new(m)
    })
}

/// Registers a kernel for `(op, device_type, dtype)`; `dtype = None` serves
/// every dtype without a more specific kernel. Replaces an existing entry.
pub fn register_kernel(
    op: &str,
    device_type: &str,
    dtype: Option<DType>,
    factory: impl Fn(&NodeDef) -> Result<Box<dyn OpKernel>> + Send + Sync + 'static,
) {
    registry()
        .write()
        .expect("kernel registry poisoned")
        .insert((op.to_string(), device_type.to_string(), dtype), Arc::new(factory));
}

/// Finds the kernel for a node whose dispatch dtype is `dtype`.
pub fn lookup_kernel(op: &str, device_type: &str, dtype: Option<DType>) -> Result<KernelFactory> {
    let reg = registry().read().expect("kernel registry poisoned");
    let exact = dtype.and_then(|d| reg.get(&(op.to_string(), device_type.to_string(), Some(d))));
    exact
        .or_else(|| reg.get(&(op.to_string(), device_type.to_string(), None)))
        .cloned()
        .ok_or_else(|| Error::NoKernel {
            op: op.to_string(),
            device_type: device_type.to_string(),
            dtype: dtype.map(|d| d.name().to_string()).unwrap_or_else(|| "none".into()),
        })
}

pub fn create_kernel(node: &NodeDef, device_type: &str, dtype: Option<DType>) -> Result<Box<dyn OpKernel>> {
    let f = lookup_kernel(&node.op, device_type, dtype)?;
    f(node)
}
