use std::collections::{HashMap, HashSet, VecDeque};

use super::{validate, Endpoint, GraphDef, NodeDef};
use crate::error::{Error, Result};

/// Result of pruning a graph for one feed/fetch signature.
#[derive(Debug, Clone)]
pub struct Pruned {
    pub graph: GraphDef,
    /// Fetch endpoints rewritten into the pruned graph (a fetched feed maps
    /// to its feed node).
    pub fetches: Vec<Endpoint>,
    /// Original fed endpoint → name of the `_Feed` node replacing it.
    pub feed_nodes: Vec<(Endpoint, String)>,
}

fn use_feed<'a>(e: &'a Endpoint, used: &mut Vec<&'a Endpoint>) {
    if !used.iter().any(|u| *u == e) {
        used.push(e);
    }
}

pub fn feed_node_name(e: &Endpoint) -> String {
    format!("_feed/{}/{}", e.node, e.index)
}

/// Keeps exactly the nodes reverse-reachable from `fetches` and `targets`
/// through data and control edges, cutting traversal at fed endpoints.
/// Each fed endpoint that is still consumed is replaced by a `_Feed` node
/// whose `key` attr is the endpoint string.
pub fn prune(g: &GraphDef, feeds: &[Endpoint], fetches: &[Endpoint], targets: &[String]) -> Result<Pruned> {
    let info = validate(g)?;
    let existing_feeds: HashMap<String, &NodeDef> = g
        .nodes
        .iter()
        .filter(|n| n.op == "_Feed")
        .filter_map(|n| n.attr_str("key").ok().map(|k| (k.to_string(), n)))
        .collect();

    let check = |e: &Endpoint| -> Result<()> {
        match info.output_type(&e.node, e.index) {
            Some(_) => Ok(()),
            None if existing_feeds.contains_key(&e.to_string()) => Ok(()),
            None => Err(Error::NotFound(format!("endpoint '{e}'"))),
        }
    };
    for e in feeds.iter().chain(fetches) {
        check(e)?;
    }
    for t in targets {
        if !info.index.contains_key(t) {
            return Err(Error::NotFound(format!("target node '{t}'")));
        }
    }

    let fed: HashSet<&Endpoint> = feeds.iter().collect();
    let mut keep = vec![false; g.nodes.len()];
    let mut used_feeds: Vec<&Endpoint> = Vec::new();
    let mut queue = VecDeque::new();

    for f in fetches {
        if fed.contains(f) {
            let e = *fed.get(f).unwrap();
            use_feed(e, &mut used_feeds);
        } else {
            queue.push_back(info.index[&f.node]);
        }
    }
    for t in targets {
        queue.push_back(info.index[t]);
    }
    while let Some(i) = queue.pop_front() {
        if keep[i] {
            continue;
        }
        keep[i] = true;
        let n = &g.nodes[i];
        for e in &n.inputs {
            if let Some(&f) = fed.get(e) {
                use_feed(f, &mut used_feeds);
            } else {
                queue.push_back(info.index[&e.node]);
            }
        }
        for c in &n.control_inputs {
            queue.push_back(info.index[c]);
        }
    }

    let mut feed_nodes = Vec::new();
    let mut out = GraphDef {
        version: g.version,
        nodes: Vec::new(),
    };
    for e in &used_feeds {
        let key = e.to_string();
        if let Some(existing) = existing_feeds.get(&key) {
            feed_nodes.push(((*e).clone(), existing.name.clone()));
            if let Some(&i) = info.index.get(&existing.name) {
                keep[i] = true;
            }
            continue;
        }
        let name = feed_node_name(e);
        let dtype = info
            .output_type(&e.node, e.index)
            .and_then(|t| t.tensor_dtype())
            .ok_or_else(|| Error::invalid(format!("cannot feed resource endpoint '{e}'")))?;
        let device = g.nodes[info.index[&e.node]].device.clone();
        out.nodes.push(
            NodeDef::new(&name, "_Feed")
                .attr("key", key)
                .attr("dtype", dtype)
                .device(device),
        );
        feed_nodes.push(((*e).clone(), name));
    }
    let feed_name: HashMap<&Endpoint, &str> = feed_nodes.iter().map(|(e, n)| (e, n.as_str())).collect();
    for (i, n) in g.nodes.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let mut n = n.clone();
        for e in &mut n.inputs {
            if let Some(name) = feed_name.get(e) {
                *e = Endpoint::new(*name, 0);
            }
        }
        out.nodes.push(n);
    }
    let fetches = fetches
        .iter()
        .map(|f| match feed_name.get(f) {
            Some(name) => Endpoint::new(*name, 0),
            None => f.clone(),
        })
        .collect();
    Ok(Pruned {
        graph: out,
        fetches,
        feed_nodes,
    })
}
