use std::collections::BTreeMap;

use super::{DevicePattern, DeviceSpec};
use crate::error::{Error, Result};
use crate::graph::frames::ROOT;
use crate::graph::{validate, GraphDef};

/// Node name → device.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DeviceAssignment {
    pub devices: BTreeMap<String, DeviceSpec>,
}

impl DeviceAssignment {
    pub fn device_of(&self, node: &str) -> Option<&DeviceSpec> {
        self.devices.get(node)
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // the smaller index stays the root so groups are named by their
        // earliest member
        if ra < rb {
            self.0[rb] = ra;
        } else if rb < ra {
            self.0[ra] = rb;
        }
    }
}

/// Assigns every node to a device. Nodes joined by a handle edge (a
/// variable or queue and its users) form a colocation group, as do all
/// nodes of one top-level loop. Each group goes to the first device in
/// `devices` that satisfies every member's constraint.
pub fn place(g: &GraphDef, devices: &[DeviceSpec]) -> Result<DeviceAssignment> {
    if devices.is_empty() {
        return Err(Error::Placement("device list is empty".into()));
    }
    let info = validate(g)?;
    let n = g.nodes.len();
    let mut uf = UnionFind((0..n).collect());
    for (i, node) in g.nodes.iter().enumerate() {
        for e in &node.inputs {
            let p = info.index[&e.node];
            if info.types[p][e.index].is_resource() {
                uf.union(i, p);
            }
        }
    }
    // loops are never split across devices
    let frames = &info.frames;
    let mut loop_anchor: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        let mut f = frames.node_frame[i];
        if f == ROOT {
            continue;
        }
        while let Some(p) = frames.parent(f) {
            if p == ROOT {
                break;
            }
            f = p;
        }
        match loop_anchor.get(&f) {
            Some(&a) => uf.union(a, i),
            None => {
                loop_anchor.insert(f, i);
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    let mut out = DeviceAssignment::default();
    for (root, members) in groups {
        let patterns: Vec<(usize, DevicePattern)> = members
            .iter()
            .filter(|&&m| !g.nodes[m].device.is_empty())
            .map(|&m| Ok((m, DevicePattern::parse(&g.nodes[m].device)?)))
            .collect::<Result<_>>()?;
        let chosen = devices
            .iter()
            .find(|d| patterns.iter().all(|(_, p)| p.matches(d)))
            .ok_or_else(|| {
                let constraints: Vec<String> = patterns
                    .iter()
                    .map(|(m, p)| format!("{} requires '{p}'", g.nodes[*m].name))
                    .collect();
                let names: Vec<&str> = members.iter().take(8).map(|&m| g.nodes[m].name.as_str()).collect();
                let more = if members.len() > 8 { ", ..." } else { "" };
                Error::Placement(format!(
                    "colocation group '{}' [{}{more}] cannot be satisfied: {}",
                    g.nodes[root].name,
                    names.join(", "),
                    constraints.join("; ")
                ))
            })?;
        for m in members {
            out.devices.insert(g.nodes[m].name.clone(), chosen.clone());
        }
    }
    Ok(out)
}
