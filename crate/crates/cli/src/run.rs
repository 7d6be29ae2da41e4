//! `miniflow run`: execute a graph file and print the fetched tensors.

use std::path::Path;

use miniflow::graph::json::{tensor_from_json, tensor_to_json};
use miniflow::graph::{validate, Endpoint, GraphDef, GraphInfo};
use miniflow::runtime::{Cluster, ClusterConfig, ClusterOptions, Session};
use miniflow::{DType, Error, Result, Tensor};
use serde_json::{json, Value};

/// Parses `name:idx=LITERAL`. The literal is JSON: a tensor object
/// `{"dtype", "shape", "values"}`, or a number, bool, string or nested
/// array whose dtype is the fed output's dtype.
pub fn parse_feed(info: &GraphInfo, spec: &str) -> Result<(Endpoint, Tensor)> {
    let (ep, lit) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("feed '{spec}' must look like name:idx=VALUE")))?;
    let ep: Endpoint = ep.trim().parse()?;
    let v: Value = serde_json::from_str(lit.trim())
        .map_err(|e| Error::InvalidArgument(format!("feed '{ep}': value is not JSON: {e}")))?;
    if v.is_object() {
        return Ok((ep, tensor_from_json(&v)?));
    }
    let mut dims = Vec::new();
    let mut flat = Vec::new();
    flatten(&v, 0, &mut dims, &mut flat).map_err(|m| Error::InvalidArgument(format!("feed '{ep}': {m}")))?;
    let declared = info.output_type(&ep.node, ep.index).and_then(|t| t.tensor_dtype());
    let dtype = declared.unwrap_or_else(|| infer_dtype(&flat));
    let t = tensor_from_json(&json!({ "dtype": dtype.name(), "shape": dims, "values": flat }))?;
    Ok((ep, t))
}

fn flatten(v: &Value, depth: usize, dims: &mut Vec<usize>, out: &mut Vec<Value>) -> std::result::Result<(), String> {
    match v {
        Value::Array(items) => {
            if dims.len() == depth {
                dims.push(items.len());
            } else if dims.get(depth) != Some(&items.len()) {
                return Err("ragged array".into());
            }
            for it in items {
                flatten(it, depth + 1, dims, out)?;
            }
            Ok(())
        }
        Value::Object(_) | Value::Null => Err("unsupported literal".into()),
        scalar => {
            if depth != dims.len() {
                return Err("ragged array".into());
            }
            out.push(scalar.clone());
            Ok(())
        }
    }
}

fn infer_dtype(vals: &[Value]) -> DType {
    if !vals.is_empty() && vals.iter().all(Value::is_boolean) {
        DType::Bool
    } else if !vals.is_empty() && vals.iter().all(Value::is_string) {
        DType::String
    } else if !vals.is_empty() && vals.iter().all(|v| v.is_i64()) {
        DType::I64
    } else {
        DType::F64
    }
}

pub struct RunRequest<'a> {
    pub graph: &'a Path,
    pub feeds: &'a [String],
    pub fetches: &'a [String],
    pub targets: &'a [String],
    pub cluster: Option<&'a Path>,
    pub inproc: usize,
}

/// Runs one step and returns the JSON document `run` prints.
pub fn run(req: &RunRequest<'_>) -> Result<Value> {
    let text = std::fs::read_to_string(req.graph)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", req.graph.display())))?;
    let g = GraphDef::from_json(&text)?;
    let config = match req.cluster {
        Some(p) => {
            let s = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", p.display())))?;
            ClusterConfig::from_json(&s)?
        }
        None => {
            if req.inproc == 0 {
                return Err(Error::InvalidArgument("--inproc needs at least one task".into()));
            }
            ClusterConfig::inproc(req.inproc)
        }
    };
    let info = validate(&g)?;
    let feeds = req.feeds.iter().map(|f| parse_feed(&info, f)).collect::<Result<Vec<_>>>()?;
    let fetches = req
        .fetches
        .iter()
        .map(|f| f.parse::<Endpoint>())
        .collect::<Result<Vec<_>>>()?;
    let opts = ClusterOptions {
        heartbeat_interval: None,
        ..Default::default()
    };
    let session = Session::new(Cluster::connect(config, opts)?, g)?;
    let out = session.run_targets(&feeds, &fetches, req.targets)?;
    let items: Vec<Value> = fetches
        .iter()
        .zip(&out)
        .map(|(f, t)| {
            let mut v = tensor_to_json(t);
            v.as_object_mut().expect("tensor JSON is an object").insert("fetch".into(), json!(f.to_string()));
            v
        })
        .collect();
    Ok(json!({ "fetches": items }))
}
