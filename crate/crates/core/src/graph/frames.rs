//! Static loop-frame analysis.
//!
//! Every node belongs to exactly one frame. Enter nodes belong to the child
//! frame they open, Exit nodes to the frame they leave. All other nodes live
//! in the frame of their inputs; nodes without inputs live in the root frame.

use std::collections::HashMap;

use super::GraphDef;
use crate::error::Violation;

pub const ROOT: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticFrame {
    pub name: String,
    pub parent: Option<usize>,
    /// Enter nodes feeding this frame.
    pub enters: Vec<usize>,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameInfo {
    pub frames: Vec<StaticFrame>,
    pub node_frame: Vec<usize>,
}

impl FrameInfo {
    pub fn parent(&self, f: usize) -> Option<usize> {
        self.frames[f].parent
    }

    /// Frame in which a node's outputs are consumed.
    pub fn output_frame(&self, g: &GraphDef, node: usize) -> usize {
        let f = self.node_frame[node];
        if g.nodes[node].op == "Exit" {
            self.frames[f].parent.unwrap_or(ROOT)
        } else {
            f
        }
    }

    pub fn in_loop(&self, node: usize) -> bool {
        self.node_frame[node] != ROOT
    }
}

/// `order` must be a topological order ignoring edges out of NextIteration.
pub fn analyze(
    g: &GraphDef,
    index: &HashMap<&str, usize>,
    order: &[usize],
) -> Result<FrameInfo, Vec<Violation>> {
    let mut frames = vec![StaticFrame {
        name: String::new(),
        parent: None,
        enters: Vec::new(),
        nodes: Vec::new(),
    }];
    let mut by_key: HashMap<(usize, String), usize> = HashMap::new();
    let mut node_frame = vec![usize::MAX; g.nodes.len()];
    let mut out_frame = vec![usize::MAX; g.nodes.len()];
    let mut errs = Vec::new();

    for &n in order {
        let node = &g.nodes[n];
        let mut seen: Option<usize> = None;
        let mut conflict = false;
        let sources = node
            .inputs
            .iter()
            .map(|e| e.node.as_str())
            .chain(node.control_inputs.iter().map(String::as_str));
        for src in sources {
            let Some(&p) = index.get(src) else { continue };
            if g.nodes[p].op == "NextIteration" {
                continue;
            }
            let f = out_frame[p];
            if f == usize::MAX {
                continue;
            }
            match seen {
                None => seen = Some(f),
                Some(prev) if prev != f => conflict = true,
                _ => {}
            }
        }
        if conflict {
            errs.push(Violation::new(
                &node.name,
                "inputs come from different loop frames (values entering a loop must pass through Enter)",
            ));
        }
        let input_frame = seen.unwrap_or(ROOT);
        let frame = if node.op == "Enter" {
            let name = node.attr_str("frame_name").unwrap_or("").to_string();
            let key = (input_frame, name.clone());
            let id = *by_key.entry(key).or_insert_with(|| {
                frames.push(StaticFrame {
                    name,
                    parent: Some(input_frame),
                    enters: Vec::new(),
                    nodes: Vec::new(),
                });
                frames.len() - 1
            });
            frames[id].enters.push(n);
            id
        } else {
            input_frame
        };
        node_frame[n] = frame;
        frames[frame].nodes.push(n);
        out_frame[n] = if node.op == "Exit" {
            match frames[frame].parent {
                Some(p) => p,
                None => {
                    errs.push(Violation::new(&node.name, "Exit outside of any loop frame"));
                    ROOT
                }
            }
        } else {
            frame
        };
    }

    for (n, node) in g.nodes.iter().enumerate() {
        if node.op != "NextIteration" || node_frame[n] == usize::MAX {
            continue;
        }
        if node_frame[n] == ROOT {
            errs.push(Violation::new(&node.name, "NextIteration outside of any loop frame"));
        }
        for (c, consumer) in g.nodes.iter().enumerate() {
            if consumer.inputs.iter().any(|e| e.node == node.name) {
                if consumer.op != "Merge" {
                    errs.push(Violation::new(
                        &consumer.name,
                        format!("consumes NextIteration '{}' but is not a Merge", node.name),
                    ));
                } else if node_frame[c] != node_frame[n] {
                    errs.push(Violation::new(
                        &node.name,
                        format!("back edge into Merge '{}' crosses loop frames", consumer.name),
                    ));
                }
            }
            if consumer.control_inputs.iter().any(|c| *c == node.name) {
                errs.push(Violation::new(
                    &consumer.name,
                    format!("control edge from NextIteration '{}' is not allowed", node.name),
                ));
            }
        }
    }

    if errs.is_empty() {
        Ok(FrameInfo { frames, node_frame })
    } else {
        Err(errs)
    }
}
