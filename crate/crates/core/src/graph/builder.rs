//! Programmatic graph construction with conditional and loop helpers.

use std::collections::{HashMap, HashSet};

use super::{ops, validate, AttrValue, Endpoint, GraphDef, NodeDef};
use crate::error::{Error, Result};
use crate::tensor::{DType, Shape, Tensor};

#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    graph: GraphDef,
    names: HashSet<String>,
    counters: HashMap<String, usize>,
    devices: Vec<String>,
    control_deps: Vec<Vec<String>>,
    /// Control inputs given to nodes that have no data inputs, so that
    /// constants inside a branch or loop body join its frame and deadness.
    pivots: Vec<String>,
    next_name: Option<String>,
    /// Device of each placed variable or queue.
    owners: HashMap<String, String>,
}

fn is_owner(n: &NodeDef) -> bool {
    matches!(n.op.as_str(), "Variable" | "FIFOQueue") && !n.device.is_empty()
}

fn attrs(list: Vec<(&str, AttrValue)>) -> impl Iterator<Item = (String, AttrValue)> + '_ {
    list.into_iter().map(|(k, v)| (k.to_string(), v))
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continues building on an existing graph.
    pub fn from_graph(graph: GraphDef) -> Self {
        let names = graph.nodes.iter().map(|n| n.name.clone()).collect();
        let owners = graph
            .nodes
            .iter()
            .filter(|n| is_owner(n))
            .map(|n| (n.name.clone(), n.device.clone()))
            .collect();
        GraphBuilder {
            graph,
            names,
            owners,
            ..Default::default()
        }
    }

    pub fn graph(&self) -> &GraphDef {
        &self.graph
    }

    pub fn into_graph(self) -> GraphDef {
        self.graph
    }

    /// Validates and returns the graph.
    pub fn finish(self) -> Result<GraphDef> {
        validate(&self.graph)?;
        Ok(self.graph)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// A fresh name derived from `base`.
    pub fn unique_name(&mut self, base: &str) -> String {
        if !self.names.contains(base) && !self.counters.contains_key(base) {
            self.counters.insert(base.to_string(), 0);
            return base.to_string();
        }
        loop {
            let c = self.counters.entry(base.to_string()).or_insert(0);
            *c += 1;
            let name = format!("{base}_{c}");
            if !self.names.contains(&name) {
                return name;
            }
        }
    }

    /// Names the next node created through a helper.
    pub fn name_next(&mut self, name: &str) -> &mut Self {
        self.next_name = Some(name.to_string());
        self
    }

    /// Adds a node as given, applying the active device and control scopes.
    pub fn add(&mut self, mut node: NodeDef) -> Result<String> {
        if self.names.contains(&node.name) {
            return Err(Error::invalid(format!("duplicate node name '{}'", node.name)));
        }
        if node.name.is_empty() || node.name.contains(':') || node.name.starts_with('^') {
            return Err(Error::invalid(format!("invalid node name '{}'", node.name)));
        }
        if ops::lookup(&node.op).is_none() {
            return Err(Error::invalid(format!("unknown op type '{}'", node.op)));
        }
        if node.device.is_empty() {
            // users of a variable or queue live with it
            if let Some(d) = node.inputs.iter().find_map(|e| self.owners.get(&e.node)) {
                node.device = d.clone();
            } else if let Some(d) = self.devices.last() {
                node.device = d.clone();
            }
        }
        for deps in &self.control_deps {
            for d in deps {
                if !node.control_inputs.contains(d) {
                    node.control_inputs.push(d.clone());
                }
            }
        }
        if node.inputs.is_empty() {
            if let Some(p) = self.pivots.last() {
                if !node.control_inputs.contains(p) {
                    node.control_inputs.push(p.clone());
                }
            }
        }
        let name = node.name.clone();
        if is_owner(&node) {
            self.owners.insert(name.clone(), node.device.clone());
        }
        self.names.insert(name.clone());
        self.counters.entry(name.clone()).or_insert(0);
        self.graph.nodes.push(node);
        Ok(name)
    }

    /// Creates a node with a generated name; returns the node name.
    pub fn op(&mut self, op: &str, inputs: &[Endpoint], attr_list: Vec<(&str, AttrValue)>) -> String {
        let name = match self.next_name.take() {
            Some(n) if !self.names.contains(&n) => n,
            Some(n) => self.unique_name(&n),
            None => self.unique_name(op),
        };
        let mut node = NodeDef::new(name, op).inputs(inputs.iter().cloned());
        node.attrs.extend(attrs(attr_list));
        self.add(node).expect("generated node is well formed")
    }

    fn op1(&mut self, op: &str, inputs: &[Endpoint], attr_list: Vec<(&str, AttrValue)>) -> Endpoint {
        Endpoint::new(self.op(op, inputs, attr_list), 0)
    }

    /// Runs `f` with `device` as the default constraint for new nodes.
    pub fn with_device<R>(&mut self, device: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.devices.push(device.to_string());
        let r = f(self);
        self.devices.pop();
        r
    }

    /// Runs `f` with control dependencies on `deps` added to every new node.
    pub fn with_control_deps<R>(&mut self, deps: &[String], f: impl FnOnce(&mut Self) -> R) -> R {
        self.control_deps.push(deps.to_vec());
        let r = f(self);
        self.control_deps.pop();
        r
    }

    pub fn with_pivot<R>(&mut self, pivot: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.pivots.push(pivot.to_string());
        let r = f(self);
        self.pivots.pop();
        r
    }

    // sources

    pub fn constant(&mut self, value: Tensor) -> Endpoint {
        self.op1("Const", &[], vec![("value", value.into())])
    }

    pub fn scalar_f64(&mut self, v: f64) -> Endpoint {
        self.constant(Tensor::scalar(v))
    }

    pub fn placeholder(&mut self, name: &str, dtype: DType, shape: impl Into<Shape>) -> Endpoint {
        self.name_next(name);
        self.op1("Placeholder", &[], vec![("dtype", dtype.into()), ("shape", shape.into().into())])
    }

    pub fn random_uniform(&mut self, shape: impl Into<Shape>, dtype: DType, seed: i64, lo: f64, hi: f64) -> Endpoint {
        self.op1(
            "RandomUniform",
            &[],
            vec![
                ("shape", shape.into().into()),
                ("dtype", dtype.into()),
                ("seed", seed.into()),
                ("minval", lo.into()),
                ("maxval", hi.into()),
            ],
        )
    }

    pub fn noop(&mut self, controls: &[String]) -> String {
        let name = self.op("NoOp", &[], vec![]);
        let node = self.graph.nodes.last_mut().expect("just added");
        for c in controls {
            if !node.control_inputs.contains(c) {
                node.control_inputs.push(c.clone());
            }
        }
        name
    }

    /// Adds control inputs to an existing node.
    pub fn add_control(&mut self, node: &str, deps: &[String]) {
        if let Some(n) = self.graph.nodes.iter_mut().find(|n| n.name == node) {
            for d in deps {
                if !n.control_inputs.contains(d) {
                    n.control_inputs.push(d.clone());
                }
            }
        }
    }

    // generic math

    pub fn unary(&mut self, op: &str, x: &Endpoint) -> Endpoint {
        self.op1(op, std::slice::from_ref(x), vec![])
    }

    pub fn binary(&mut self, op: &str, a: &Endpoint, b: &Endpoint) -> Endpoint {
        self.op1(op, &[a.clone(), b.clone()], vec![])
    }

    pub fn identity(&mut self, x: &Endpoint) -> Endpoint {
        self.unary("Identity", x)
    }

    pub fn add_(&mut self, a: &Endpoint, b: &Endpoint) -> Endpoint {
        self.binary("Add", a, b)
    }

    pub fn sub(&mut self, a: &Endpoint, b: &Endpoint) -> Endpoint {
        self.binary("Sub", a, b)
    }

    pub fn mul(&mut self, a: &Endpoint, b: &Endpoint) -> Endpoint {
        self.binary("Mul", a, b)
    }

    pub fn div(&mut self, a: &Endpoint, b: &Endpoint) -> Endpoint {
        self.binary("Div", a, b)
    }

    pub fn neg(&mut self, x: &Endpoint) -> Endpoint {
        self.unary("Neg", x)
    }

    pub fn square(&mut self, x: &Endpoint) -> Endpoint {
        self.unary("Square", x)
    }

    pub fn relu(&mut self, x: &Endpoint) -> Endpoint {
        self.unary("Relu", x)
    }

    pub fn sigmoid(&mut self, x: &Endpoint) -> Endpoint {
        self.unary("Sigmoid", x)
    }

    pub fn softmax(&mut self, x: &Endpoint) -> Endpoint {
        self.unary("Softmax", x)
    }

    pub fn matmul(&mut self, a: &Endpoint, b: &Endpoint) -> Endpoint {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: &Endpoint, b: &Endpoint, ta: bool, tb: bool) -> Endpoint {
        self.op1(
            "MatMul",
            &[a.clone(), b.clone()],
            vec![("transpose_a", ta.into()), ("transpose_b", tb.into())],
        )
    }

    pub fn batch_matmul(&mut self, a: &Endpoint, b: &Endpoint, adj_a: bool, adj_b: bool) -> Endpoint {
        self.op1(
            "BatchMatMul",
            &[a.clone(), b.clone()],
            vec![("adj_a", adj_a.into()), ("adj_b", adj_b.into())],
        )
    }

    pub fn addn(&mut self, xs: &[Endpoint]) -> Endpoint {
        self.op1("AddN", xs, vec![("N", xs.len().into())])
    }

    pub fn reduce_sum(&mut self, x: &Endpoint, axis: Option<usize>) -> Endpoint {
        let a = axis.map(|a| vec![("axis", AttrValue::from(a))]).unwrap_or_default();
        self.op1("ReduceSum", std::slice::from_ref(x), a)
    }

    pub fn reduce_mean(&mut self, x: &Endpoint, axis: Option<usize>) -> Endpoint {
        let a = axis.map(|a| vec![("axis", AttrValue::from(a))]).unwrap_or_default();
        self.op1("ReduceMean", std::slice::from_ref(x), a)
    }

    pub fn softmax_xent(&mut self, logits: &Endpoint, labels: &Endpoint) -> Endpoint {
        self.binary("SoftmaxCrossEntropy", logits, labels)
    }

    pub fn reshape(&mut self, x: &Endpoint, shape: &[usize]) -> Endpoint {
        let s: Vec<i64> = shape.iter().map(|&d| d as i64).collect();
        self.op1("Reshape", std::slice::from_ref(x), vec![("shape", s.into())])
    }

    pub fn concat(&mut self, xs: &[Endpoint], axis: usize) -> Endpoint {
        self.op1("Concat", xs, vec![("N", xs.len().into()), ("axis", axis.into())])
    }

    pub fn slice(&mut self, x: &Endpoint, begin: &[usize], size: &[i64]) -> Endpoint {
        let b: Vec<i64> = begin.iter().map(|&d| d as i64).collect();
        self.op1(
            "Slice",
            std::slice::from_ref(x),
            vec![("begin", b.into()), ("size", size.to_vec().into())],
        )
    }

    pub fn gather(&mut self, params: &Endpoint, indices: &Endpoint) -> Endpoint {
        self.binary("GatherRows", params, indices)
    }

    pub fn dynamic_partition(&mut self, data: &Endpoint, parts: &Endpoint, num_shards: usize) -> Vec<Endpoint> {
        let name = self.op(
            "DynamicPartition",
            &[data.clone(), parts.clone()],
            vec![("num_shards", num_shards.into())],
        );
        (0..num_shards).map(|i| Endpoint::new(&name, i)).collect()
    }

    pub fn dynamic_stitch(&mut self, positions: &[Endpoint], data: &[Endpoint]) -> Endpoint {
        let mut ins = positions.to_vec();
        ins.extend_from_slice(data);
        self.op1("DynamicStitch", &ins, vec![("N", positions.len().into())])
    }

    pub fn cast(&mut self, x: &Endpoint, dtype: DType) -> Endpoint {
        self.op1("Cast", std::slice::from_ref(x), vec![("dtype", dtype.into())])
    }

    pub fn delay(&mut self, x: &Endpoint, millis: i64) -> Endpoint {
        self.op1("Delay", std::slice::from_ref(x), vec![("millis", millis.into())])
    }

    // state

    pub fn variable(&mut self, name: &str, dtype: DType, shape: impl Into<Shape>) -> Endpoint {
        self.name_next(name);
        self.op1("Variable", &[], vec![("dtype", dtype.into()), ("shape", shape.into().into())])
    }

    pub fn read(&mut self, var: &Endpoint) -> Endpoint {
        self.unary("Read", var)
    }

    pub fn assign(&mut self, var: &Endpoint, value: &Endpoint) -> Endpoint {
        self.binary("Assign", var, value)
    }

    pub fn assign_add(&mut self, var: &Endpoint, value: &Endpoint) -> Endpoint {
        self.binary("AssignAdd", var, value)
    }

    pub fn apply_gradient_descent(&mut self, var: &Endpoint, grad: &Endpoint, alpha: f64) -> Endpoint {
        self.op1(
            "ApplyGradientDescent",
            &[var.clone(), grad.clone()],
            vec![("alpha", alpha.into())],
        )
    }

    pub fn fifo_queue(&mut self, name: &str, capacity: usize, types: &[DType], shapes: &[Shape]) -> Endpoint {
        self.name_next(name);
        self.op1(
            "FIFOQueue",
            &[],
            vec![
                ("capacity", capacity.into()),
                ("component_types", types.to_vec().into()),
                ("shapes", shapes.to_vec().into()),
            ],
        )
    }

    pub fn enqueue(&mut self, queue: &Endpoint, comps: &[Endpoint]) -> String {
        let mut ins = vec![queue.clone()];
        ins.extend_from_slice(comps);
        self.op("QueueEnqueue", &ins, vec![])
    }

    pub fn dequeue(&mut self, queue: &Endpoint, n_components: usize) -> Vec<Endpoint> {
        let name = self.op("QueueDequeue", std::slice::from_ref(queue), vec![]);
        (0..n_components).map(|i| Endpoint::new(&name, i)).collect()
    }

    // control flow

    pub fn switch(&mut self, data: &Endpoint, pred: &Endpoint) -> (Endpoint, Endpoint) {
        let name = self.op("Switch", &[data.clone(), pred.clone()], vec![]);
        (Endpoint::new(&name, 0), Endpoint::new(&name, 1))
    }

    /// Returns `(value, value_index)`.
    pub fn merge(&mut self, xs: &[Endpoint]) -> (Endpoint, Endpoint) {
        let name = self.op("Merge", xs, vec![("N", xs.len().into())]);
        (Endpoint::new(&name, 0), Endpoint::new(&name, 1))
    }

    /// `if pred { then_fn(inputs) } else { else_fn(inputs) }` built from
    /// Switch and Merge. Both branches must return the same number of
    /// values. Nodes without data inputs created inside a branch are gated
    /// on the branch pivot so they go dead with it.
    pub fn cond(
        &mut self,
        pred: &Endpoint,
        inputs: &[Endpoint],
        then_fn: impl FnOnce(&mut Self, &[Endpoint]) -> Vec<Endpoint>,
        else_fn: impl FnOnce(&mut Self, &[Endpoint]) -> Vec<Endpoint>,
    ) -> Vec<Endpoint> {
        let (pf, pt) = self.switch(pred, pred);
        let pivot_t = self.identity(&pt).node;
        let pivot_f = self.identity(&pf).node;
        let mut ins_t = Vec::new();
        let mut ins_f = Vec::new();
        for x in inputs {
            let (f, t) = self.switch(x, pred);
            ins_f.push(f);
            ins_t.push(t);
        }
        let outs_t = self.with_pivot(&pivot_t, |g| then_fn(g, &ins_t));
        let outs_f = self.with_pivot(&pivot_f, |g| else_fn(g, &ins_f));
        assert_eq!(outs_t.len(), outs_f.len(), "cond branches return different arity");
        outs_t
            .iter()
            .zip(&outs_f)
            .map(|(t, f)| self.merge(&[f.clone(), t.clone()]).0)
            .collect()
    }

    /// `while cond_fn(vars) { vars = body_fn(vars) }`. `invariants` enter the
    /// loop as constants and are passed to both closures. Returns the exit
    /// values of the loop variables.
    pub fn while_loop(
        &mut self,
        loop_vars: &[Endpoint],
        invariants: &[Endpoint],
        cond_fn: impl FnOnce(&mut Self, &[Endpoint], &[Endpoint]) -> Endpoint,
        body_fn: impl FnOnce(&mut Self, &[Endpoint], &[Endpoint]) -> Vec<Endpoint>,
    ) -> Vec<Endpoint> {
        assert!(!loop_vars.is_empty(), "while_loop needs at least one loop variable");
        let frame = self.unique_name("while");
        let enter = |g: &mut Self, x: &Endpoint, constant: bool| {
            g.op1(
                "Enter",
                std::slice::from_ref(x),
                vec![("frame_name", frame.as_str().into()), ("is_constant", constant.into())],
            )
        };
        let enters: Vec<Endpoint> = loop_vars.iter().map(|v| enter(self, v, false)).collect();
        let invs: Vec<Endpoint> = invariants.iter().map(|v| enter(self, v, true)).collect();
        let next_names: Vec<String> = loop_vars.iter().map(|_| self.unique_name("NextIteration")).collect();
        // reserve the back-edge names so later helpers cannot take them
        for n in &next_names {
            self.names.insert(n.clone());
        }
        let merges: Vec<Endpoint> = enters
            .iter()
            .zip(&next_names)
            .map(|(e, n)| self.merge(&[e.clone(), Endpoint::new(n, 0)]).0)
            .collect();
        let pivot = merges[0].node.clone();
        let pred = self.with_pivot(&pivot, |g| cond_fn(g, &merges, &invs));
        let lc = self.unary("LoopCond", &pred);
        let mut exits = Vec::new();
        let mut body_in = Vec::new();
        for m in &merges {
            let (f, t) = self.switch(m, &lc);
            exits.push(self.unary("Exit", &f));
            body_in.push(self.identity(&t));
        }
        let body_pivot = body_in[0].node.clone();
        let outs = self.with_pivot(&body_pivot, |g| body_fn(g, &body_in, &invs));
        assert_eq!(outs.len(), loop_vars.len(), "loop body returns wrong arity");
        for (o, n) in outs.iter().zip(&next_names) {
            self.names.remove(n);
            let node = NodeDef::new(n, "NextIteration").input(o.clone());
            self.add(node).expect("reserved name");
        }
        exits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_node_and_duplicates() {
        let mut g = GraphBuilder::new();
        g.add(NodeDef::new("c", "Const").attr("value", Tensor::scalar(1.0f64))).unwrap();
        g.add(NodeDef::new("m", "MatMul").inputs(["c:0", "c:0"])).unwrap();
        assert!(g.graph().contains("c") && g.graph().contains("m"));
        assert!(g.add(NodeDef::new("c", "NoOp")).is_err());
        assert!(g.add(NodeDef::new("z", "NotAnOp")).is_err());
    }

    #[test]
    fn generated_names_are_unique() {
        let mut g = GraphBuilder::new();
        let a = g.scalar_f64(1.0);
        let b = g.scalar_f64(2.0);
        assert_ne!(a.node, b.node);
        g.name_next("Const");
        let c = g.scalar_f64(3.0);
        assert_ne!(c.node, a.node);
        g.finish().unwrap();
    }

    #[test]
    fn loops_validate_with_frames() {
        let mut g = GraphBuilder::new();
        let zero = g.constant(Tensor::scalar(0i64));
        let five = g.constant(Tensor::scalar(5i64));
        let out = g.while_loop(
            &[zero],
            &[five],
            |g, v, inv| g.binary("Less", &v[0], &inv[0]),
            |g, v, _| {
                let one = g.constant(Tensor::scalar(1i64));
                vec![g.add_(&v[0], &one)]
            },
        );
        let _ = g.identity(&out[0]);
        let graph = g.finish().unwrap();
        let info = validate(&graph).unwrap();
        assert_eq!(info.frames.frames.len(), 2);
    }
}
