//! Op registry: arity, attribute-driven output types and scheduling flags.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use super::NodeDef;
use crate::error::{Error, Result};
use crate::tensor::DType;

/// Type of a value flowing on an edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EdgeType {
    Tensor(DType),
    /// Reference handle to a variable holding this dtype.
    Variable(DType),
    /// Reference handle to a queue with these component dtypes.
    Queue(Vec<DType>),
}

impl EdgeType {
    pub fn is_resource(&self) -> bool {
        !matches!(self, EdgeType::Tensor(_))
    }

    pub fn tensor_dtype(&self) -> Option<DType> {
        match self {
            EdgeType::Tensor(d) => Some(*d),
            _ => None,
        }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeType::Tensor(d) => write!(f, "{d}"),
            EdgeType::Variable(d) => write!(f, "ref<variable {d}>"),
            EdgeType::Queue(ds) => {
                let names: Vec<_> = ds.iter().map(|d| d.name()).collect();
                write!(f, "ref<queue ({})>", names.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpFlags {
    /// Touches resources or the outside world; never deduplicated or folded.
    pub stateful: bool,
    /// May block for an unbounded time; runs on its own lane.
    pub blocking: bool,
    /// Marked non-differentiable: contributes no gradient.
    pub no_gradient: bool,
}

/// Inputs seen by a type-inference function. An input type is `None` only
/// for Merge inputs arriving over a loop back edge.
pub struct Sig<'a> {
    pub node: &'a NodeDef,
    pub inputs: &'a [Option<EdgeType>],
}

pub type InferResult = std::result::Result<Vec<EdgeType>, String>;
pub type InferFn = fn(&Sig<'_>) -> InferResult;

pub struct OpDef {
    pub name: String,
    pub infer: InferFn,
    pub flags: OpFlags,
}

const NUM: &[DType] = &[DType::F32, DType::F64, DType::I32, DType::I64];
const FLOAT: &[DType] = &[DType::F32, DType::F64];
const INT: &[DType] = &[DType::I32, DType::I64];
const ANY: &[DType] = &DType::ALL;

impl Sig<'_> {
    pub fn arity(&self, n: usize) -> std::result::Result<(), String> {
        if self.inputs.len() != n {
            return Err(format!(
                "{} expects {n} data inputs, got {}",
                self.node.op,
                self.inputs.len()
            ));
        }
        Ok(())
    }

    fn input(&self, i: usize) -> std::result::Result<&EdgeType, String> {
        self.inputs
            .get(i)
            .ok_or_else(|| format!("missing input {i}"))?
            .as_ref()
            .ok_or_else(|| format!("input {i} has no resolvable type (back edge into a non-Merge op?)"))
    }

    pub fn tensor(&self, i: usize, allowed: &[DType]) -> std::result::Result<DType, String> {
        match self.input(i)? {
            EdgeType::Tensor(d) if allowed.contains(d) => Ok(*d),
            EdgeType::Tensor(d) => Err(format!("input {i} has unsupported dtype {d} for {}", self.node.op)),
            other => Err(format!("input {i} must be a tensor, got {other}")),
        }
    }

    /// All listed inputs are tensors of one allowed dtype.
    pub fn same(&self, idx: impl IntoIterator<Item = usize>, allowed: &[DType]) -> std::result::Result<DType, String> {
        let mut dtype = None;
        for i in idx {
            let d = self.tensor(i, allowed)?;
            match dtype {
                None => dtype = Some(d),
                Some(prev) if prev != d => {
                    return Err(format!("dtype mismatch: input {i} is {d}, expected {prev}"))
                }
                _ => {}
            }
        }
        dtype.ok_or_else(|| "no inputs".to_string())
    }

    pub fn var(&self, i: usize) -> std::result::Result<DType, String> {
        match self.input(i)? {
            EdgeType::Variable(d) => Ok(*d),
            other => Err(format!("input {i} must be a variable handle, got {other}")),
        }
    }

    pub fn queue(&self, i: usize) -> std::result::Result<Vec<DType>, String> {
        match self.input(i)? {
            EdgeType::Queue(d) => Ok(d.clone()),
            other => Err(format!("input {i} must be a queue handle, got {other}")),
        }
    }

    pub fn attr<T>(&self, r: Result<T>) -> std::result::Result<T, String> {
        r.map_err(|e| match e {
            Error::InvalidArgument(m) => m,
            other => other.to_string(),
        })
    }

    fn n_attr(&self) -> std::result::Result<usize, String> {
        let n = self.attr(self.node.attr_usize("N"))?;
        if n == 0 {
            return Err(format!("{} requires N >= 1", self.node.op));
        }
        Ok(n)
    }
}

fn t(d: DType) -> Vec<EdgeType> {
    vec![EdgeType::Tensor(d)]
}

fn unary(s: &Sig<'_>, allowed: &[DType]) -> InferResult {
    s.arity(1)?;
    Ok(t(s.tensor(0, allowed)?))
}

fn binary(s: &Sig<'_>, allowed: &[DType]) -> InferResult {
    s.arity(2)?;
    Ok(t(s.same([0, 1], allowed)?))
}

fn compare(s: &Sig<'_>) -> InferResult {
    s.arity(2)?;
    s.same([0, 1], &[DType::F32, DType::F64, DType::I32, DType::I64, DType::Bool])?;
    Ok(t(DType::Bool))
}

fn var_update(s: &Sig<'_>) -> InferResult {
    s.arity(2)?;
    let d = s.var(0)?;
    let v = s.tensor(1, NUM)?;
    if v != d {
        return Err(format!("value dtype {v} does not match variable dtype {d}"));
    }
    Ok(t(d))
}

fn merge(s: &Sig<'_>) -> InferResult {
    let n = s.n_attr()?;
    s.arity(n)?;
    let mut dtype = None;
    for (i, ty) in s.inputs.iter().enumerate() {
        match ty {
            None => continue,
            Some(EdgeType::Tensor(d)) => match dtype {
                None => dtype = Some(*d),
                Some(prev) if prev != *d => {
                    return Err(format!("dtype mismatch: input {i} is {d}, expected {prev}"))
                }
                _ => {}
            },
            Some(other) => return Err(format!("input {i} must be a tensor, got {other}")),
        }
    }
    let d = dtype.ok_or("Merge needs at least one input that is not a back edge")?;
    Ok(vec![EdgeType::Tensor(d), EdgeType::Tensor(DType::I32)])
}

fn queue_components(s: &Sig<'_>, batched: bool) -> InferResult {
    let types = s.queue(0)?;
    if s.inputs.len() != types.len() + 1 {
        return Err(format!(
            "{} expects {} component inputs, got {}",
            s.node.op,
            types.len(),
            s.inputs.len().saturating_sub(1)
        ));
    }
    for (i, want) in types.iter().enumerate() {
        let got = s.tensor(i + 1, ANY)?;
        if got != *want {
            return Err(format!("component {i} has dtype {got}, queue expects {want}"));
        }
    }
    let _ = batched;
    Ok(vec![])
}

fn builtin_ops() -> Vec<OpDef> {
    let stateful = OpFlags {
        stateful: true,
        no_gradient: true,
        ..Default::default()
    };
    let blocking = OpFlags {
        stateful: true,
        blocking: true,
        no_gradient: true,
    };
    let plain = OpFlags::default();
    let nograd = OpFlags {
        no_gradient: true,
        ..Default::default()
    };
    let def = |name: &str, flags: OpFlags, infer: InferFn| OpDef {
        name: name.to_string(),
        infer,
        flags,
    };

    vec![
        // sources and plumbing
        def("Const", plain, |s| {
            s.arity(0)?;
            let v = s.attr(s.node.attr_tensor("value"))?;
            if let Some(d) = s.node.get_attr("dtype") {
                if d.as_dtype() != Some(v.dtype()) {
                    return Err(format!("dtype attr disagrees with value dtype {}", v.dtype()));
                }
            }
            Ok(t(v.dtype()))
        }),
        def("Placeholder", stateful, |s| {
            s.arity(0)?;
            Ok(t(s.attr(s.node.attr_dtype("dtype"))?))
        }),
        def("_Feed", stateful, |s| {
            s.arity(0)?;
            s.attr(s.node.attr_str("key"))?;
            Ok(t(s.attr(s.node.attr_dtype("dtype"))?))
        }),
        def("Identity", plain, |s| unary(s, ANY)),
        def("StopGradient", nograd, |s| unary(s, ANY)),
        def("NoOp", plain, |s| {
            s.arity(0)?;
            Ok(vec![])
        }),
        def("Delay", blocking, |s| {
            s.arity(1)?;
            s.attr(s.node.attr_int("millis"))?;
            Ok(t(s.tensor(0, ANY)?))
        }),
        // elementwise math
        def("Add", plain, |s| binary(s, NUM)),
        def("Sub", plain, |s| binary(s, NUM)),
        def("Mul", plain, |s| binary(s, NUM)),
        def("Div", plain, |s| binary(s, NUM)),
        def("Maximum", plain, |s| binary(s, NUM)),
        def("Minimum", plain, |s| binary(s, NUM)),
        def("Neg", plain, |s| unary(s, NUM)),
        def("Square", plain, |s| unary(s, NUM)),
        def("Relu", plain, |s| unary(s, NUM)),
        def("Sigmoid", plain, |s| unary(s, FLOAT)),
        def("Exp", plain, |s| unary(s, FLOAT)),
        def("Softmax", plain, |s| unary(s, FLOAT)),
        def("ReluGrad", plain, |s| binary(s, NUM)),
        def("SigmoidGrad", plain, |s| binary(s, FLOAT)),
        def("SoftmaxGrad", plain, |s| binary(s, FLOAT)),
        def("SoftmaxCrossEntropy", plain, |s| binary(s, FLOAT)),
        def("SoftmaxCrossEntropyGrad", nograd, |s| {
            s.arity(3)?;
            Ok(t(s.same([0, 1, 2], FLOAT)?))
        }),
        def("MatMul", plain, |s| binary(s, NUM)),
        def("BatchMatMul", plain, |s| binary(s, NUM)),
        def("AddN", plain, |s| {
            let n = s.n_attr()?;
            s.arity(n)?;
            Ok(t(s.same(0..n, NUM)?))
        }),
        def("ReduceSum", plain, |s| unary(s, NUM)),
        def("ReduceMean", plain, |s| unary(s, NUM)),
        def("ReduceGrad", plain, |s| binary(s, NUM)),
        def("ReduceLike", plain, |s| binary(s, NUM)),
        // shape and data movement
        def("Reshape", plain, |s| {
            s.attr(s.node.attr_ints("shape"))?;
            unary(s, ANY)
        }),
        def("ReshapeLike", plain, |s| {
            s.arity(2)?;
            s.tensor(1, ANY)?;
            Ok(t(s.tensor(0, ANY)?))
        }),
        def("Concat", plain, |s| {
            let n = s.n_attr()?;
            s.arity(n)?;
            s.attr(s.node.attr_int("axis"))?;
            Ok(t(s.same(0..n, ANY)?))
        }),
        def("ConcatGrad", plain, |s| {
            let n = s.n_attr()?;
            s.arity(n + 1)?;
            let index = s.attr(s.node.attr_usize("index"))?;
            if index >= n {
                return Err(format!("index {index} out of range for N={n}"));
            }
            s.attr(s.node.attr_int("axis"))?;
            Ok(t(s.same(0..=n, ANY)?))
        }),
        def("Slice", plain, |s| {
            s.attr(s.node.attr_ints("begin"))?;
            s.attr(s.node.attr_ints("size"))?;
            unary(s, ANY)
        }),
        def("SliceGrad", plain, |s| {
            s.attr(s.node.attr_ints("begin"))?;
            binary(s, NUM)
        }),
        def("GatherRows", plain, |s| {
            s.arity(2)?;
            s.tensor(1, INT)?;
            Ok(t(s.tensor(0, ANY)?))
        }),
        def("DynamicPartition", plain, |s| {
            s.arity(2)?;
            let n = s.attr(s.node.attr_usize("num_shards"))?;
            if n == 0 {
                return Err("num_shards must be >= 1".into());
            }
            s.tensor(1, INT)?;
            Ok(vec![EdgeType::Tensor(s.tensor(0, ANY)?); n])
        }),
        def("DynamicStitch", plain, |s| {
            let n = s.n_attr()?;
            s.arity(2 * n)?;
            for i in 0..n {
                s.tensor(i, INT)?;
            }
            Ok(t(s.same(n..2 * n, ANY)?))
        }),
        def("RangeLike", nograd, |s| {
            s.arity(1)?;
            s.tensor(0, ANY)?;
            Ok(t(DType::I64))
        }),
        def("SparseToDense", plain, |s| {
            s.arity(3)?;
            s.tensor(0, INT)?;
            Ok(t(s.same([1, 2], NUM)?))
        }),
        def("Cast", nograd, |s| {
            s.arity(1)?;
            s.tensor(0, ANY)?;
            Ok(t(s.attr(s.node.attr_dtype("dtype"))?))
        }),
        def("Less", nograd, compare),
        def("LessEqual", nograd, compare),
        def("Greater", nograd, compare),
        def("GreaterEqual", nograd, compare),
        def("Equal", nograd, compare),
        def("NotEqual", nograd, compare),
        def("LogicalNot", nograd, |s| unary(s, &[DType::Bool])),
        def("LogicalAnd", nograd, |s| binary(s, &[DType::Bool])),
        def("Mod", nograd, |s| binary(s, INT)),
        def("FloorDiv", nograd, |s| binary(s, INT)),
        def("ZerosLike", nograd, |s| unary(s, ANY)),
        def("OnesLike", nograd, |s| unary(s, NUM)),
        def("ArgSort", nograd, |s| {
            s.arity(1)?;
            s.tensor(0, INT)?;
            Ok(t(DType::I64))
        }),
        def("RandomUniform", nograd, |s| {
            s.arity(0)?;
            s.attr(s.node.attr_shape("shape"))?;
            let d = s.attr(s.node.attr_dtype("dtype"))?;
            if !d.is_float() {
                return Err(format!("RandomUniform needs a float dtype, got {d}"));
            }
            Ok(t(d))
        }),
        def("CandidateSampler", nograd, |s| {
            s.arity(1)?;
            s.tensor(0, INT)?;
            let k = s.attr(s.node.attr_usize("num_sampled"))?;
            let n = s.attr(s.node.attr_usize("range_max"))?;
            if k >= n {
                return Err(format!("num_sampled {k} must be below range_max {n}"));
            }
            Ok(t(DType::I64))
        }),
        // control flow
        def("Switch", plain, |s| {
            s.arity(2)?;
            s.tensor(1, &[DType::Bool])?;
            let d = s.tensor(0, ANY)?;
            Ok(vec![EdgeType::Tensor(d), EdgeType::Tensor(d)])
        }),
        def("Merge", plain, merge),
        def("Enter", plain, |s| {
            s.attr(s.node.attr_str("frame_name"))?;
            unary(s, ANY)
        }),
        def("Exit", plain, |s| unary(s, ANY)),
        def("NextIteration", plain, |s| unary(s, ANY)),
        def("LoopCond", nograd, |s| unary(s, &[DType::Bool])),
        // state
        def("Variable", stateful, |s| {
            s.arity(0)?;
            s.attr(s.node.attr_shape("shape"))?;
            Ok(vec![EdgeType::Variable(s.attr(s.node.attr_dtype("dtype"))?)])
        }),
        def("Read", OpFlags { stateful: true, ..Default::default() }, |s| {
            s.arity(1)?;
            Ok(t(s.var(0)?))
        }),
        def("Assign", stateful, |s| {
            s.arity(2)?;
            let d = s.var(0)?;
            let v = s.tensor(1, ANY)?;
            if v != d {
                return Err(format!("value dtype {v} does not match variable dtype {d}"));
            }
            Ok(t(d))
        }),
        def("AssignAdd", stateful, var_update),
        def("AssignSub", stateful, var_update),
        def("ApplyGradientDescent", stateful, |s| {
            s.attr(s.node.attr_float("alpha"))?;
            let d = s.var(0)?;
            s.arity(2)?;
            if !d.is_float() || s.tensor(1, FLOAT)? != d {
                return Err(format!("gradient must match float variable dtype {d}"));
            }
            Ok(t(d))
        }),
        def("ApplyMomentum", stateful, |s| {
            s.attr(s.node.attr_float("alpha"))?;
            s.attr(s.node.attr_float("momentum"))?;
            s.arity(3)?;
            let d = s.var(0)?;
            if s.var(1)? != d || !d.is_float() || s.tensor(2, FLOAT)? != d {
                return Err(format!("velocity and gradient must match float variable dtype {d}"));
            }
            Ok(t(d))
        }),
        def("SparseApplyGradientDescent", stateful, |s| {
            s.attr(s.node.attr_float("alpha"))?;
            s.arity(3)?;
            let d = s.var(0)?;
            s.tensor(1, INT)?;
            if !d.is_float() || s.tensor(2, FLOAT)? != d {
                return Err(format!("gradient rows must match float variable dtype {d}"));
            }
            Ok(t(d))
        }),
        def("FIFOQueue", stateful, |s| {
            s.arity(0)?;
            let cap = s.attr(s.node.attr_int("capacity"))?;
            if cap < 1 {
                return Err(format!("capacity must be >= 1, got {cap}"));
            }
            let types = s.attr(s.node.attr_dtypes("component_types"))?;
            if types.is_empty() {
                return Err("queue needs at least one component".into());
            }
            if let Some(shapes) = s.node.get_attr("shapes") {
                let shapes = shapes.as_shapes().ok_or("shapes must be a shape list")?;
                if !shapes.is_empty() && shapes.len() != types.len() {
                    return Err("shapes and component_types differ in length".into());
                }
            }
            Ok(vec![EdgeType::Queue(types)])
        }),
        def("QueueEnqueue", blocking, |s| queue_components(s, false)),
        def("QueueEnqueueMany", blocking, |s| queue_components(s, true)),
        def("QueueDequeue", blocking, |s| {
            s.arity(1)?;
            Ok(s.queue(0)?.into_iter().map(EdgeType::Tensor).collect())
        }),
        def("QueueDequeueMany", blocking, |s| {
            s.arity(1)?;
            s.attr(s.node.attr_usize("n"))?;
            Ok(s.queue(0)?.into_iter().map(EdgeType::Tensor).collect())
        }),
        def("DequeueFresh", blocking, |s| {
            s.arity(2)?;
            let types = s.queue(0)?;
            s.tensor(1, INT)?;
            let m = s.attr(s.node.attr_usize("m"))?;
            if m == 0 {
                return Err("m must be >= 1".into());
            }
            let tag = s.attr(s.node.attr_usize("tag_component"))?;
            s.attr(s.node.attr_bool_or("concat", false))?;
            if tag >= types.len() || !types[tag].is_integer() {
                return Err(format!("tag_component {tag} must name an integer component"));
            }
            let mut out: Vec<EdgeType> = types.into_iter().map(EdgeType::Tensor).collect();
            out.push(EdgeType::Tensor(DType::I64));
            Ok(out)
        }),
        def("QueueClose", stateful, |s| {
            s.arity(1)?;
            s.queue(0)?;
            Ok(vec![])
        }),
        def("QueueSize", stateful, |s| {
            s.arity(1)?;
            s.queue(0)?;
            Ok(t(DType::I64))
        }),
        // transfer
        def("Send", stateful, |s| {
            s.arity(1)?;
            s.attr(s.node.attr_str("tensor_name"))?;
            s.tensor(0, ANY)?;
            Ok(vec![])
        }),
        def("Recv", blocking, |s| {
            s.arity(0)?;
            s.attr(s.node.attr_str("tensor_name"))?;
            Ok(t(s.attr(s.node.attr_dtype("dtype"))?))
        }),
        // checkpoints
        def("Save", blocking, |s| {
            if s.inputs.len() < 2 {
                return Err("Save needs a filename and a names input".into());
            }
            s.tensor(0, &[DType::String])?;
            s.tensor(1, &[DType::String])?;
            for i in 2..s.inputs.len() {
                s.tensor(i, ANY)?;
            }
            Ok(vec![])
        }),
        def("Restore", blocking, |s| {
            s.arity(2)?;
            s.tensor(0, &[DType::String])?;
            s.tensor(1, &[DType::String])?;
            Ok(t(s.attr(s.node.attr_dtype("dtype"))?))
        }),
    ]
}

fn registry() -> &'static RwLock<HashMap<String, Arc<OpDef>>> {
    static REG: OnceLock<RwLock<HashMap<String, Arc<OpDef>>>> = OnceLock::new();
    REG.get_or_init(|| {
        RwLock::new(
            builtin_ops()
                .into_iter()
                .map(|d| (d.name.clone(), Arc::new(d)))
                .collect(),
        )
    })
}

pub fn lookup(op: &str) -> Option<Arc<OpDef>> {
    registry().read().expect("op registry poisoned").get(op).cloned()
}

/// Adds a user-defined op. Fails if the name is taken.
pub fn register(def: OpDef) -> Result<()> {
    let mut reg = registry().write().expect("op registry poisoned");
    if reg.contains_key(&def.name) {
        return Err(Error::invalid(format!("op '{}' is already registered", def.name)));
    }
    reg.insert(def.name.clone(), Arc::new(def));
    Ok(())
}

pub fn flags(op: &str) -> OpFlags {
    lookup(op).map(|d| d.flags).unwrap_or_default()
}

pub fn registered_ops() -> Vec<String> {
    let mut v: Vec<String> = registry()
        .read()
        .expect("op registry poisoned")
        .keys()
        .cloned()
        .collect();
    v.sort();
    v
}
