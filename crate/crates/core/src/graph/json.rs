//! JSON graph files.
//!
//! ```json
//! {"version": 1,
//!  "nodes": [{"name": "x", "op": "Const", "inputs": [], "device": "",
//!             "attrs": {"value": {"dtype": "f32", "shape": [2], "values": [1, 2]}}},
//!            {"name": "y", "op": "Mul", "inputs": ["x:0", "x:0", "^init"]}]}
//! ```
//!
//! Attribute encoding:
//! * int → JSON integer; float → JSON number with a fraction, or
//!   `{"float": "nan" | "inf" | "-inf"}` when not finite
//! * bool → JSON bool; string and dtype → JSON string (`"f32"`, `"i64"`, ...)
//! * shape and int list → array of integers
//! * dtype list and string list → array of strings; shape list → array of arrays
//! * tensor → `{"dtype", "shape", "values"}` with `values` flat row-major;
//!   non-finite floats appear as the strings `"nan"`, `"inf"`, `"-inf"`
//!
//! Inputs are `"node:index"` (a bare `"node"` means index 0) and control
//! inputs are `"^node"`. `inputs`, `attrs` and `device` are optional.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Number, Value};

use super::{AttrValue, GraphDef, NodeDef};
use crate::error::{Error, Result};
use crate::tensor::{Buffer, DType, Shape, Tensor};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonGraph {
    #[serde(default = "default_version")]
    version: i64,
    nodes: Vec<JsonNode>,
}

fn default_version() -> i64 {
    1
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonNode {
    name: String,
    op: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    attrs: Map<String, Value>,
    #[serde(default)]
    device: String,
}

pub fn to_json(g: &GraphDef) -> String {
    let doc = JsonGraph {
        version: g.version,
        nodes: g.nodes.iter().map(node_to_json).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("graph serializes")
}

pub fn from_json(s: &str) -> Result<GraphDef> {
    let doc: JsonGraph =
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("graph JSON: {e}")))?;
    let nodes = doc
        .nodes
        .into_iter()
        .map(node_from_json)
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphDef {
        version: doc.version,
        nodes,
    })
}

fn node_to_json(n: &NodeDef) -> JsonNode {
    let mut inputs: Vec<String> = n.inputs.iter().map(|e| e.to_string()).collect();
    inputs.extend(n.control_inputs.iter().map(|c| format!("^{c}")));
    JsonNode {
        name: n.name.clone(),
        op: n.op.clone(),
        inputs,
        attrs: n
            .attrs
            .iter()
            .map(|(k, v)| (k.clone(), attr_to_json(v)))
            .collect(),
        device: n.device.clone(),
    }
}

fn node_from_json(j: JsonNode) -> Result<NodeDef> {
    let mut node = NodeDef::new(j.name, j.op);
    node.device = j.device;
    for s in j.inputs {
        if let Some(c) = s.strip_prefix('^') {
            node.control_inputs.push(c.to_string());
        } else {
            if !node.control_inputs.is_empty() {
                return Err(Error::invalid(format!(
                    "node '{}': data input '{s}' after a control input",
                    node.name
                )));
            }
            node.inputs.push(s.parse()?);
        }
    }
    let mut attrs = BTreeMap::new();
    for (k, v) in j.attrs {
        let a = attr_from_json(&v)
            .map_err(|e| Error::invalid(format!("node '{}' attr '{k}': {e}", node.name)))?;
        attrs.insert(k, a);
    }
    node.attrs = attrs;
    Ok(node)
}

fn float_json(x: f64) -> Value {
    if x.is_nan() {
        Value::from("nan")
    } else if x == f64::INFINITY {
        Value::from("inf")
    } else if x == f64::NEG_INFINITY {
        Value::from("-inf")
    } else {
        Value::Number(Number::from_f64(x).expect("finite"))
    }
}

fn attr_to_json(v: &AttrValue) -> Value {
    match v {
        AttrValue::Int(i) => json!(i),
        AttrValue::Float(f) if f.is_finite() => float_json(*f),
        AttrValue::Float(f) => json!({ "float": float_json(*f) }),
        AttrValue::Bool(b) => json!(b),
        AttrValue::Str(s) => json!(s),
        AttrValue::DType(d) => json!(d.name()),
        AttrValue::Shape(s) => json!(s.dims()),
        AttrValue::IntList(v) => json!(v),
        AttrValue::DTypeList(v) => json!(v.iter().map(|d| d.name()).collect::<Vec<_>>()),
        AttrValue::ShapeList(v) => json!(v.iter().map(|s| s.dims().to_vec()).collect::<Vec<_>>()),
        AttrValue::StrList(v) => json!(v),
        AttrValue::Tensor(t) => tensor_to_json(t),
    }
}

pub fn tensor_to_json(t: &Tensor) -> Value {
    let values: Vec<Value> = match t.buffer() {
        Buffer::F32(v) => v.iter().map(|&x| float_json(x as f64)).collect(),
        Buffer::F64(v) => v.iter().map(|&x| float_json(x)).collect(),
        Buffer::I32(v) => v.iter().map(|&x| json!(x)).collect(),
        Buffer::I64(v) => v.iter().map(|&x| json!(x)).collect(),
        Buffer::Bool(v) => v.iter().map(|&x| json!(x)).collect(),
        Buffer::Str(v) => v.iter().map(|x| json!(x)).collect(),
    };
    json!({ "dtype": t.dtype().name(), "shape": t.dims(), "values": values })
}

fn json_float(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| format!("bad number {n}")),
        Value::String(s) => match s.as_str() {
            "nan" => Ok(f64::NAN),
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(format!("expected a number, got '{other}'")),
        },
        other => Err(format!("expected a number, got {other}")),
    }
}

fn json_int(v: &Value) -> std::result::Result<i64, String> {
    v.as_i64().ok_or_else(|| format!("expected an integer, got {v}"))
}

pub fn tensor_from_json(v: &Value) -> Result<Tensor> {
    tensor_from_json_inner(v).map_err(Error::invalid)
}

fn tensor_from_json_inner(v: &Value) -> std::result::Result<Tensor, String> {
    let obj = v.as_object().ok_or("tensor must be an object")?;
    let dtype: DType = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or("tensor needs a dtype")?
        .parse()
        .map_err(|e: Error| e.to_string())?;
    let shape = match obj.get("shape") {
        None => None,
        Some(s) => Some(Shape::new(
            s.as_array()
                .ok_or("shape must be an array")?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize).ok_or("bad dimension"))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        )),
    };
    let values = match obj.get("values") {
        Some(Value::Array(a)) => a.clone(),
        Some(scalar) => vec![scalar.clone()],
        None => Vec::new(),
    };
    let buf = match dtype {
        DType::F32 => Buffer::F32(values.iter().map(|x| json_float(x).map(|f| f as f32)).collect::<std::result::Result<_, _>>()?),
        DType::F64 => Buffer::F64(values.iter().map(json_float).collect::<std::result::Result<_, _>>()?),
        DType::I32 => Buffer::I32(
            values
                .iter()
                .map(|x| json_int(x).and_then(|i| i32::try_from(i).map_err(|e| e.to_string())))
                .collect::<std::result::Result<_, _>>()?,
        ),
        DType::I64 => Buffer::I64(values.iter().map(json_int).collect::<std::result::Result<_, _>>()?),
        DType::Bool => Buffer::Bool(
            values
                .iter()
                .map(|x| x.as_bool().ok_or_else(|| format!("expected a bool, got {x}")))
                .collect::<std::result::Result<_, _>>()?,
        ),
        DType::String => Buffer::Str(
            values
                .iter()
                .map(|x| x.as_str().map(str::to_string).ok_or_else(|| format!("expected a string, got {x}")))
                .collect::<std::result::Result<_, _>>()?,
        ),
    };
    let shape = match shape {
        Some(s) => s,
        None if buf.len() == 1 && !matches!(obj.get("values"), Some(Value::Array(_))) => Shape::scalar(),
        None => Shape::new(vec![buf.len()]),
    };
    // a single value fills any shape
    let buf = if buf.len() == 1 && shape.num_elements() != 1 {
        fill_buffer(&buf, shape.num_elements())
    } else {
        buf
    };
    Tensor::from_buffer(shape, buf).map_err(|e| e.to_string())
}

fn fill_buffer(b: &Buffer, n: usize) -> Buffer {
    match b {
        Buffer::F32(v) => Buffer::F32(vec![v[0]; n]),
        Buffer::F64(v) => Buffer::F64(vec![v[0]; n]),
        Buffer::I32(v) => Buffer::I32(vec![v[0]; n]),
        Buffer::I64(v) => Buffer::I64(vec![v[0]; n]),
        Buffer::Bool(v) => Buffer::Bool(vec![v[0]; n]),
        Buffer::Str(v) => Buffer::Str(vec![v[0].clone(); n]),
    }
}

fn attr_from_json(v: &Value) -> std::result::Result<AttrValue, String> {
    Ok(match v {
        Value::Bool(b) => AttrValue::Bool(*b),
        Value::Number(n) => match n.as_i64() {
            Some(i) => AttrValue::Int(i),
            None => AttrValue::Float(n.as_f64().ok_or("bad number")?),
        },
        Value::String(s) => AttrValue::Str(s.clone()),
        Value::Object(o) if o.contains_key("float") && o.len() == 1 => {
            AttrValue::Float(json_float(&o["float"])?)
        }
        Value::Object(_) => AttrValue::Tensor(tensor_from_json_inner(v)?),
        Value::Array(items) => {
            if items.iter().all(Value::is_i64) {
                AttrValue::IntList(items.iter().map(|x| x.as_i64().unwrap()).collect())
            } else if items.iter().all(Value::is_string) {
                let strs: Vec<String> = items.iter().map(|x| x.as_str().unwrap().to_string()).collect();
                match strs.iter().map(|s| s.parse::<DType>()).collect::<Result<Vec<_>>>() {
                    Ok(d) => AttrValue::DTypeList(d),
                    Err(_) => AttrValue::StrList(strs),
                }
            } else if items.iter().all(Value::is_array) {
                let mut shapes = Vec::new();
                for s in items {
                    let dims = s
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|d| d.as_u64().map(|d| d as usize).ok_or("bad dimension"))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    shapes.push(Shape::new(dims));
                }
                AttrValue::ShapeList(shapes)
            } else {
                return Err("unsupported list attribute".into());
            }
        }
        Value::Null => return Err("null attribute".into()),
    })
}
