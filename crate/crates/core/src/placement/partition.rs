use std::collections::{BTreeMap, HashMap};

use super::{DeviceAssignment, DeviceSpec};
use crate::error::{Error, Result};
use crate::graph::{validate, Endpoint, GraphDef, NodeDef};
use crate::tensor::{DType, Shape, Tensor};

/// Per-device subgraphs with transfers inserted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PartitionSet {
    pub partitions: BTreeMap<DeviceSpec, GraphDef>,
}

impl PartitionSet {
    pub fn devices(&self) -> impl Iterator<Item = &DeviceSpec> {
        self.partitions.keys()
    }

    pub fn transfer_count(&self) -> usize {
        self.partitions
            .values()
            .flat_map(|g| &g.nodes)
            .filter(|n| n.op == "Send")
            .count()
    }
}

/// Edge name used in the rendezvous key of a control transfer.
pub fn control_edge_name(node: &str) -> String {
    format!("^{node}")
}

fn send_name(edge: &str, dst: &DeviceSpec) -> String {
    format!("_send/{}/{}", edge.replace(':', "/"), dst.tag())
}

fn recv_name(edge: &str, dst: &DeviceSpec) -> String {
    format!("_recv/{}/{}", edge.replace(':', "/"), dst.tag())
}

fn sentinel_name(node: &str) -> String {
    format!("_ctrl/{node}")
}

/// Splits a placed graph by device. Every cross-device data edge becomes a
/// Send on the producer's device and a Recv on the consumer's device; all
/// consumers of one endpoint on one device share the pair. A cross-device
/// control edge sends an empty sentinel tensor produced by a Const that
/// depends on the source node.
pub fn partition(g: &GraphDef, assignment: &DeviceAssignment) -> Result<PartitionSet> {
    let info = validate(g)?;
    let device = |name: &str| {
        assignment
            .device_of(name)
            .ok_or_else(|| Error::Placement(format!("node '{name}' has no device")))
    };
    let mut parts: BTreeMap<DeviceSpec, GraphDef> = BTreeMap::new();
    let mut made: HashMap<(String, DeviceSpec), String> = HashMap::new();
    let mut sentinels: HashMap<String, ()> = HashMap::new();
    let mut extra: BTreeMap<DeviceSpec, Vec<NodeDef>> = BTreeMap::new();

    for node in &g.nodes {
        let dst = device(&node.name)?.clone();
        let mut n = node.clone();
        n.device = dst.canonical();
        for e in &mut n.inputs {
            let src = device(&e.node)?;
            if *src == dst {
                continue;
            }
            let ty = &info.types[info.index[&e.node]][e.index];
            let dtype = ty.tensor_dtype().ok_or_else(|| {
                Error::Placement(format!("resource edge '{e}' into '{}' crosses devices", node.name))
            })?;
            let edge = e.to_string();
            let key = (edge.clone(), dst.clone());
            let recv = match made.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let (s, r) = (send_name(&edge, &dst), recv_name(&edge, &dst));
                    extra.entry(src.clone()).or_default().push(transfer_send(&s, e.clone(), &edge, src, &dst));
                    extra.entry(dst.clone()).or_default().push(transfer_recv(&r, &edge, dtype, src, &dst));
                    made.insert(key, r.clone());
                    r
                }
            };
            *e = Endpoint::new(recv, 0);
        }
        for c in &mut n.control_inputs {
            let src = device(c)?;
            if *src == dst {
                continue;
            }
            let edge = control_edge_name(c);
            let key = (edge.clone(), dst.clone());
            let recv = match made.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let sentinel = sentinel_name(c);
                    if sentinels.insert(sentinel.clone(), ()).is_none() {
                        extra.entry(src.clone()).or_default().push(
                            NodeDef::new(&sentinel, "Const")
                                .attr("value", Tensor::zeros(DType::F32, Shape::new(vec![0])))
                                .control(c.clone())
                                .device(src.canonical()),
                        );
                    }
                    let (s, r) = (send_name(&edge, &dst), recv_name(&edge, &dst));
                    extra
                        .entry(src.clone())
                        .or_default()
                        .push(transfer_send(&s, Endpoint::new(&sentinel, 0), &edge, src, &dst));
                    extra.entry(dst.clone()).or_default().push(transfer_recv(&r, &edge, DType::F32, src, &dst));
                    made.insert(key, r.clone());
                    r
                }
            };
            *c = recv;
        }
        parts.entry(dst).or_default().nodes.push(n);
    }
    for (d, nodes) in extra {
        parts.entry(d).or_default().nodes.extend(nodes);
    }
    for g in parts.values_mut() {
        g.version = 1;
    }
    Ok(PartitionSet { partitions: parts })
}

fn transfer_send(name: &str, input: Endpoint, edge: &str, src: &DeviceSpec, dst: &DeviceSpec) -> NodeDef {
    NodeDef::new(name, "Send")
        .input(input)
        .attr("tensor_name", edge)
        .attr("send_device", src.canonical())
        .attr("recv_device", dst.canonical())
        .device(src.canonical())
}

fn transfer_recv(name: &str, edge: &str, dtype: DType, src: &DeviceSpec, dst: &DeviceSpec) -> NodeDef {
    NodeDef::new(name, "Recv")
        .attr("tensor_name", edge)
        .attr("dtype", dtype)
        .attr("send_device", src.canonical())
        .attr("recv_device", dst.canonical())
        .device(dst.canonical())
}
