use std::collections::{HashMap, HashSet};

use super::frames::{self, FrameInfo};
use super::ops::{self, EdgeType, Sig};
use super::GraphDef;
use crate::error::{Error, Result, Violation};
use crate::placement::DevicePattern;

/// Facts established by a successful validation.
#[derive(Debug, Clone)]
pub struct GraphInfo {
    pub index: HashMap<String, usize>,
    /// Topological order ignoring loop back edges.
    pub order: Vec<usize>,
    /// Output types per node.
    pub types: Vec<Vec<EdgeType>>,
    pub frames: FrameInfo,
}

impl GraphInfo {
    pub fn output_type(&self, node: &str, index: usize) -> Option<&EdgeType> {
        self.index.get(node).and_then(|&i| self.types[i].get(index))
    }
}

/// Checks names, edges, op arity and dtypes, acyclicity modulo
/// NextIteration, loop-frame structure and device patterns. Returns every
/// violation found.
pub fn validate(g: &GraphDef) -> Result<GraphInfo> {
    let mut errs: Vec<Violation> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        if n.name.is_empty() || n.name.contains(':') || n.name.starts_with('^') {
            errs.push(Violation::new(&n.name, "invalid node name"));
        }
        if index.insert(&n.name, i).is_some() {
            errs.push(Violation::new(&n.name, "duplicate node name"));
        }
        if ops::lookup(&n.op).is_none() {
            errs.push(Violation::new(&n.name, format!("unknown op type '{}'", n.op)));
        }
        if !n.device.is_empty() {
            if let Err(e) = DevicePattern::parse(&n.device) {
                errs.push(Violation::new(&n.name, e.to_string()));
            }
        }
    }
    let mut edges_ok = true;
    for n in &g.nodes {
        for e in &n.inputs {
            if !index.contains_key(e.node.as_str()) {
                errs.push(Violation::new(&n.name, format!("input '{e}' names an unknown node")));
                edges_ok = false;
            }
        }
        for c in &n.control_inputs {
            if !index.contains_key(c.as_str()) {
                errs.push(Violation::new(&n.name, format!("control input '^{c}' names an unknown node")));
                edges_ok = false;
            }
        }
    }
    if !edges_ok || !errs.is_empty() {
        return Err(Error::Validation(errs));
    }

    let order = match topo_order(g, &index) {
        Ok(o) => o,
        Err(v) => return Err(Error::Validation(vec![v])),
    };

    let mut types: Vec<Option<Vec<EdgeType>>> = vec![None; g.nodes.len()];
    for &i in &order {
        let n = &g.nodes[i];
        let mut ins = Vec::with_capacity(n.inputs.len());
        let mut blocked = false;
        for e in &n.inputs {
            let p = index[e.node.as_str()];
            let back = g.nodes[p].op == "NextIteration";
            match &types[p] {
                Some(t) => match t.get(e.index) {
                    Some(ty) => ins.push(Some(ty.clone())),
                    None => {
                        errs.push(Violation::new(
                            &n.name,
                            format!("input '{e}' refers to output {} but '{}' has {} outputs", e.index, e.node, t.len()),
                        ));
                        blocked = true;
                    }
                },
                None if back => ins.push(None),
                None => blocked = true,
            }
        }
        if blocked {
            continue;
        }
        let def = ops::lookup(&n.op).expect("checked above");
        match (def.infer)(&Sig { node: n, inputs: &ins }) {
            Ok(out) => types[i] = Some(out),
            Err(msg) => errs.push(Violation::new(&n.name, msg)),
        }
    }

    // back edges: the NextIteration value must match the Merge it feeds
    for (i, n) in g.nodes.iter().enumerate() {
        if n.op != "Merge" {
            continue;
        }
        for e in &n.inputs {
            let p = index[e.node.as_str()];
            if g.nodes[p].op != "NextIteration" {
                continue;
            }
            if let (Some(tp), Some(tm)) = (&types[p], &types[i]) {
                match tp.get(e.index) {
                    Some(t) if *t == tm[0] => {}
                    Some(t) => errs.push(Violation::new(
                        &n.name,
                        format!("back edge from '{}' carries {t}, Merge carries {}", e.node, tm[0]),
                    )),
                    None => errs.push(Violation::new(&n.name, format!("input '{e}' refers to a missing output"))),
                }
            }
        }
    }

    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let frames = frames::analyze(g, &index, &order).map_err(Error::Validation)?;
    Ok(GraphInfo {
        index: index.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        order,
        types: types.into_iter().map(|t| t.expect("all inferred")).collect(),
        frames,
    })
}

/// Kahn's algorithm over data and control edges, skipping edges that leave a
/// NextIteration node. Ties resolve in graph order.
pub(crate) fn topo_order(g: &GraphDef, index: &HashMap<&str, usize>) -> std::result::Result<Vec<usize>, Violation> {
    let n = g.nodes.len();
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in g.nodes.iter().enumerate() {
        let srcs = node
            .inputs
            .iter()
            .map(|e| e.node.as_str())
            .chain(node.control_inputs.iter().map(String::as_str));
        for s in srcs {
            let p = index[s];
            if g.nodes[p].op == "NextIteration" {
                continue;
            }
            succ[p].push(i);
            preds[i].push(p);
            indeg[i] += 1;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<usize>> =
        (0..n).filter(|&i| indeg[i] == 0).map(std::cmp::Reverse).collect();
    while let Some(std::cmp::Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(std::cmp::Reverse(s));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // every leftover node has a leftover predecessor; walking predecessors
    // must revisit a node, and the first revisited node lies on a cycle
    let left: HashSet<usize> = (0..n).filter(|&i| indeg[i] > 0).collect();
    let mut cur = *left.iter().min().expect("non-empty");
    let mut visited = HashSet::new();
    while visited.insert(cur) {
        cur = *preds[cur]
            .iter()
            .find(|p| left.contains(p))
            .expect("leftover node has a leftover predecessor");
    }
    Err(Violation::new(
        &g.nodes[cur].name,
        "graph contains a cycle that does not pass through NextIteration",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeDef;
    use crate::tensor::{DType, Tensor};

    fn c(name: &str, v: f64) -> NodeDef {
        NodeDef::new(name, "Const").attr("value", Tensor::scalar(v))
    }

    fn violations(g: &GraphDef) -> Vec<Violation> {
        match validate(g) {
            Err(Error::Validation(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(validate(&GraphDef::new()).is_ok());
    }

    #[test]
    fn matmul_arity() {
        let mut g = GraphDef::new();
        g.nodes.push(c("a", 1.0));
        g.nodes.push(NodeDef::new("m", "MatMul").inputs(["a:0", "a:0", "a:0"]));
        let v = violations(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].node, "m");
        assert!(v[0].message.contains("expects 2"), "{}", v[0].message);
    }

    #[test]
    fn two_node_cycle_is_reported() {
        let mut g = GraphDef::new();
        g.nodes.push(c("k", 1.0));
        g.nodes.push(NodeDef::new("a", "Add").inputs(["k:0", "b:0"]));
        g.nodes.push(NodeDef::new("b", "Identity").input("a:0"));
        let v = violations(&g);
        assert!(v[0].message.contains("cycle"));
        assert!(v[0].node == "a" || v[0].node == "b");
    }

    #[test]
    fn collects_every_violation() {
        let mut g = GraphDef::new();
        g.nodes.push(c("a", 1.0));
        g.nodes.push(c("a", 2.0));
        g.nodes.push(NodeDef::new("x", "Bogus"));
        g.nodes.push(NodeDef::new("y", "Neg").input("missing:0"));
        let v = violations(&g);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn dtype_and_ref_agreement() {
        let mut g = GraphDef::new();
        g.nodes.push(c("f", 1.0));
        g.nodes.push(NodeDef::new("i", "Const").attr("value", Tensor::scalar(1i64)));
        g.nodes.push(NodeDef::new("bad", "Add").inputs(["f:0", "i:0"]));
        g.nodes.push(
            NodeDef::new("v", "Variable")
                .attr("dtype", DType::F32)
                .attr("shape", crate::tensor::Shape::scalar()),
        );
        g.nodes.push(NodeDef::new("asg", "AssignAdd").inputs(["v:0", "f:0"]));
        g.nodes.push(NodeDef::new("rd", "Neg").input("v:0"));
        let v = violations(&g);
        let names: Vec<&str> = v.iter().map(|v| v.node.as_str()).collect();
        assert_eq!(names, vec!["bad", "asg", "rd"]);
    }

    #[test]
    fn output_index_checked() {
        let mut g = GraphDef::new();
        g.nodes.push(c("a", 1.0));
        g.nodes.push(NodeDef::new("n", "Neg").input("a:1"));
        assert_eq!(violations(&g)[0].node, "n");
    }

    #[test]
    fn addn_zero_inputs_rejected() {
        let mut g = GraphDef::new();
        g.nodes.push(NodeDef::new("s", "AddN").attr("N", 0i64));
        assert!(violations(&g)[0].message.contains("N >= 1"));
    }

    #[test]
    fn thousand_nodes_keep_order() {
        let mut g = GraphDef::new();
        g.nodes.push(c("n0", 0.0));
        for i in 1..1000 {
            g.nodes.push(NodeDef::new(format!("n{i}"), "Neg").input(Endpoint::new(format!("n{}", i - 1), 0)));
        }
        let info = validate(&g).unwrap();
        assert_eq!(info.order, (0..1000).collect::<Vec<_>>());
        assert!(g.nodes.iter().enumerate().all(|(i, n)| n.name == format!("n{i}")));
    }

    use crate::graph::Endpoint;
}
