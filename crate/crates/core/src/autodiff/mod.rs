//! Reverse-mode differentiation as a graph-to-graph transformation.
//!
//! Gradient nodes are appended to a copy of the forward graph; existing
//! nodes are never touched. Partial gradients reaching one endpoint along
//! several paths are summed with AddN in forward consumer order. Gradients
//! of GatherRows stay sparse (indices plus rows) unless they have to be
//! combined with a dense partial.

mod grads;

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::graph::ops::{self, EdgeType};
use crate::graph::{validate, AttrValue, Endpoint, GraphBuilder, GraphDef, GraphInfo, NodeDef};
use crate::tensor::{ops::fill, DType, Shape};

/// A gradient flowing along one edge.
#[derive(Debug, Clone, PartialEq)]
pub enum Grad {
    Dense(Endpoint),
    /// Rows `values[i]` belong to row `indices[i]` of a tensor shaped like
    /// `like`; repeated indices add up.
    Sparse {
        indices: Endpoint,
        values: Endpoint,
        like: Endpoint,
    },
}

impl Grad {
    pub fn is_sparse(&self) -> bool {
        matches!(self, Grad::Sparse { .. })
    }

    pub fn dense_endpoint(&self) -> Option<&Endpoint> {
        match self {
            Grad::Dense(e) => Some(e),
            Grad::Sparse { .. } => None,
        }
    }
}

/// Builds the input gradients of one node from its output gradients.
/// Entries for inputs that need no gradient may be `None`.
pub type GradFn = Arc<dyn Fn(&mut GradCtx<'_>, &NodeDef, &[Option<Grad>]) -> Result<Vec<Option<Grad>>> + Send + Sync>;

fn registry() -> &'static RwLock<HashMap<String, GradFn>> {
    static REG: OnceLock<RwLock<HashMap<String, GradFn>>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m = HashMap::new();
        grads::register_all(&mut |op: &str, f: GradFn| {
            m.insert(op.to_string(), f);
        });
        RwLock::new(m)
    })
}

/// Adds or replaces the gradient of an op.
pub fn register_gradient(
    op: &str,
    f: impl Fn(&mut GradCtx<'_>, &NodeDef, &[Option<Grad>]) -> Result<Vec<Option<Grad>>> + Send + Sync + 'static,
) {
    registry()
        .write()
        .expect("gradient registry poisoned")
        .insert(op.to_string(), Arc::new(f));
}

pub fn has_gradient(op: &str) -> bool {
    registry().read().expect("gradient registry poisoned").contains_key(op)
}

/// What gradient builders see: the graph under construction and the types
/// of the forward graph.
pub struct GradCtx<'a> {
    b: &'a mut GraphBuilder,
    info: &'a GraphInfo,
    forward: &'a str,
    /// Which data inputs of the current node need a gradient.
    needed: Vec<bool>,
}

impl GradCtx<'_> {
    pub fn needs(&self, input: usize) -> bool {
        self.needed.get(input).copied().unwrap_or(false)
    }

    /// Adds a gradient node named after the forward node.
    pub fn op(&mut self, op: &str, inputs: &[Endpoint], attrs: Vec<(&str, AttrValue)>) -> Endpoint {
        let name = format!("gradients/{}/{}", self.forward, op);
        self.b.name_next(&name);
        Endpoint::new(self.b.op(op, inputs, attrs), 0)
    }

    pub fn op_n(&mut self, op: &str, inputs: &[Endpoint], attrs: Vec<(&str, AttrValue)>) -> String {
        let name = format!("gradients/{}/{}", self.forward, op);
        self.b.name_next(&name);
        self.b.op(op, inputs, attrs)
    }

    pub fn scalar(&mut self, value: f64, dtype: DType) -> Result<Endpoint> {
        let t = fill(&Shape::scalar(), value, dtype)?;
        Ok(self.op("Const", &[], vec![("value", t.into())]))
    }

    /// Tensor dtype of a forward-graph endpoint.
    pub fn dtype(&self, e: &Endpoint) -> Result<DType> {
        self.info
            .output_type(&e.node, e.index)
            .and_then(EdgeType::tensor_dtype)
            .ok_or_else(|| Error::Gradient(format!("'{e}' is not a tensor endpoint")))
    }

    /// Turns a sparse gradient into a dense one.
    pub fn dense(&mut self, g: &Grad) -> Endpoint {
        match g {
            Grad::Dense(e) => e.clone(),
            Grad::Sparse { indices, values, like } => {
                self.op("SparseToDense", &[indices.clone(), values.clone(), like.clone()], vec![])
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// The forward graph with gradient nodes appended.
    pub graph: GraphDef,
    /// One entry per requested parameter.
    pub grads: Vec<Grad>,
}

fn is_loop_op(op: &str) -> bool {
    matches!(op, "Enter" | "Exit" | "NextIteration" | "LoopCond")
}

/// Builds d`target`/d`param` for each param. A param may be a tensor
/// endpoint or a variable handle; for a handle, gradients of every Read of
/// the variable are summed. The target should be a scalar: its seed is
/// OnesLike(target), so a non-scalar target differentiates its sum.
pub fn build_gradients(g: &GraphDef, target: &Endpoint, params: &[Endpoint]) -> Result<Gradients> {
    let info = validate(g)?;
    let n = g.nodes.len();
    let node_of = |e: &Endpoint| -> Result<usize> {
        match info.output_type(&e.node, e.index) {
            Some(_) => Ok(info.index[&e.node]),
            None => Err(Error::NotFound(format!("endpoint '{e}'"))),
        }
    };
    let t = node_of(target)?;
    match info.types[t][target.index].tensor_dtype() {
        Some(d) if d.is_float() => {}
        _ => return Err(Error::Gradient(format!("target '{target}' must be a float tensor"))),
    }
    let param_nodes: Vec<usize> = params.iter().map(node_of).collect::<Result<_>>()?;

    // consumers along data edges
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        for e in &node.inputs {
            consumers[info.index[&e.node]].push(i);
        }
    }
    let mut ancestors = vec![false; n];
    let mut queue = VecDeque::from([t]);
    while let Some(i) = queue.pop_front() {
        if std::mem::replace(&mut ancestors[i], true) {
            continue;
        }
        for e in &g.nodes[i].inputs {
            queue.push_back(info.index[&e.node]);
        }
    }
    let mut on_path = vec![false; n];
    let mut queue: VecDeque<usize> = param_nodes.iter().copied().filter(|&p| ancestors[p]).collect();
    while let Some(i) = queue.pop_front() {
        if !ancestors[i] || std::mem::replace(&mut on_path[i], true) {
            continue;
        }
        queue.extend(consumers[i].iter().copied());
    }
    for (i, node) in g.nodes.iter().enumerate() {
        if on_path[i] && (is_loop_op(&node.op) || info.frames.in_loop(i)) {
            return Err(Error::Gradient(format!(
                "cannot differentiate through loop construct '{}' ({})",
                node.name, node.op
            )));
        }
    }

    let mut b = GraphBuilder::from_graph(g.clone());
    // partial gradients per endpoint: (consumer node, consumer input, grad)
    let mut partials: HashMap<Endpoint, Vec<(usize, usize, Grad)>> = HashMap::new();
    let seed = {
        let mut ctx = GradCtx {
            b: &mut b,
            info: &info,
            forward: &target.node,
            needed: Vec::new(),
        };
        ctx.op("OnesLike", std::slice::from_ref(target), vec![])
    };
    partials.insert(target.clone(), vec![(usize::MAX, 0, Grad::Dense(seed))]);
    let mut summed: HashMap<Endpoint, Grad> = HashMap::new();

    for &i in info.order.iter().rev() {
        if !on_path[i] {
            continue;
        }
        let node = &g.nodes[i];
        let needed: Vec<bool> = node
            .inputs
            .iter()
            .map(|e| on_path[info.index[&e.node]] && info.types[info.index[&e.node]][e.index].tensor_dtype().is_none_or(|d| d.is_float()))
            .collect();
        let mut out_grads: Vec<Option<Grad>> = Vec::with_capacity(info.types[i].len());
        for o in 0..info.types[i].len() {
            let e = Endpoint::new(&node.name, o);
            let g = match partials.remove(&e) {
                Some(p) => Some(accumulate(&mut b, &info, &node.name, &node.device, p)),
                None => None,
            };
            if let Some(g) = &g {
                summed.insert(e, g.clone());
            }
            out_grads.push(g);
        }
        if !needed.iter().any(|&x| x) || out_grads.iter().all(Option::is_none) {
            continue;
        }
        let def = ops::lookup(&node.op).expect("validated");
        if def.flags.no_gradient {
            continue;
        }
        let f = registry()
            .read()
            .expect("gradient registry poisoned")
            .get(&node.op)
            .cloned()
            .ok_or_else(|| {
                Error::Gradient(format!("no gradient registered for op '{}' (node '{}')", node.op, node.name))
            })?;
        let in_grads = with_device(&mut b, &node.device, |b| {
            let mut ctx = GradCtx {
                b,
                info: &info,
                forward: &node.name,
                needed: needed.clone(),
            };
            f(&mut ctx, node, &out_grads)
        })?;
        if in_grads.len() != node.inputs.len() {
            return Err(Error::Gradient(format!(
                "gradient of '{}' returned {} entries for {} inputs",
                node.name,
                in_grads.len(),
                node.inputs.len()
            )));
        }
        for (k, (e, gk)) in node.inputs.iter().zip(in_grads).enumerate() {
            if let (true, Some(gk)) = (needed[k], gk) {
                partials.entry(e.clone()).or_default().push((i, k, gk));
            }
        }
    }

    let mut grads = Vec::with_capacity(params.len());
    for (p, &pn) in params.iter().zip(&param_nodes) {
        if let Some(gp) = summed.get(p) {
            grads.push(gp.clone());
            continue;
        }
        if let Some(list) = partials.get(p) {
            let gp = accumulate(&mut b, &info, &p.node, &g.nodes[pn].device, list.clone());
            summed.insert(p.clone(), gp.clone());
            grads.push(gp);
            continue;
        }
        // not on any path: zeros shaped like the param
        let device = g.nodes[pn].device.clone();
        let z = with_device(&mut b, &device, |b| {
            let mut ctx = GradCtx {
                b,
                info: &info,
                forward: &p.node,
                needed: Vec::new(),
            };
            let like = match &info.types[pn][p.index] {
                EdgeType::Variable(_) => ctx.op("Read", std::slice::from_ref(p), vec![]),
                EdgeType::Tensor(_) => p.clone(),
                EdgeType::Queue(_) => return Err(Error::Gradient(format!("cannot differentiate queue handle '{p}'"))),
            };
            Ok(ctx.op("ZerosLike", &[like], vec![]))
        })?;
        grads.push(Grad::Dense(z));
    }
    Ok(Gradients {
        graph: b.into_graph(),
        grads,
    })
}

fn with_device<R>(b: &mut GraphBuilder, device: &str, f: impl FnOnce(&mut GraphBuilder) -> R) -> R {
    if device.is_empty() {
        f(b)
    } else {
        b.with_device(device, f)
    }
}

/// Sums partial gradients in forward consumer order. All-sparse partials
/// stay sparse by concatenation; otherwise everything is densified.
fn accumulate(b: &mut GraphBuilder, info: &GraphInfo, node: &str, device: &str, mut parts: Vec<(usize, usize, Grad)>) -> Grad {
    parts.sort_by_key(|&(c, k, _)| (c, k));
    if parts.len() == 1 {
        return parts.pop().expect("one").2;
    }
    with_device(b, device, |b| {
        let mut ctx = GradCtx {
            b,
            info,
            forward: node,
            needed: Vec::new(),
        };
        if parts.iter().all(|(_, _, g)| g.is_sparse()) {
            let mut idx = Vec::new();
            let mut vals = Vec::new();
            let mut like = None;
            for (_, _, g) in &parts {
                if let Grad::Sparse { indices, values, like: l } = g {
                    idx.push(ctx.op("Cast", std::slice::from_ref(indices), vec![("dtype", DType::I64.into())]));
                    vals.push(values.clone());
                    like = Some(l.clone());
                }
            }
            let n = idx.len() as i64;
            let indices = ctx.op("Concat", &idx, vec![("N", n.into()), ("axis", 0i64.into())]);
            let values = ctx.op("Concat", &vals, vec![("N", n.into()), ("axis", 0i64.into())]);
            return Grad::Sparse {
                indices,
                values,
                like: like.expect("non-empty"),
            };
        }
        let dense: Vec<Endpoint> = parts.iter().map(|(_, _, g)| ctx.dense(g)).collect();
        let n = dense.len() as i64;
        Grad::Dense(ctx.op("AddN", &dense, vec![("N", n.into())]))
    })
}
