//! Graph representation: nodes, attributes, validation and pruning.

mod attrs;
pub mod builder;
pub mod frames;
pub mod json;
pub mod ops;
pub mod prune;
pub mod validate;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

pub use attrs::AttrValue;
pub use builder::GraphBuilder;
pub use ops::{EdgeType, OpDef, OpFlags};
pub use prune::{prune, Pruned};
pub use validate::{validate, GraphInfo};

use crate::error::{Error, Result};
use crate::tensor::{DType, Shape, Tensor};

/// A node output: `node:index`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub node: String,
    pub index: usize,
}

impl Endpoint {
    pub fn new(node: impl Into<String>, index: usize) -> Self {
        Endpoint {
            node: node.into(),
            index,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.index)
    }
}

impl FromStr for Endpoint {
    type Err = Error;

    /// Accepts `node:idx` or a bare `node` (output 0).
    fn from_str(s: &str) -> Result<Self> {
        match s.rsplit_once(':') {
            Some((node, idx)) if !node.is_empty() => {
                let index = idx
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad endpoint '{s}'")))?;
                Ok(Endpoint::new(node, index))
            }
            Some(_) => Err(Error::invalid(format!("bad endpoint '{s}'"))),
            None if !s.is_empty() && !s.starts_with('^') => Ok(Endpoint::new(s, 0)),
            None => Err(Error::invalid(format!("bad endpoint '{s}'"))),
        }
    }
}

impl From<&str> for Endpoint {
    fn from(s: &str) -> Self {
        s.parse().expect("valid endpoint literal")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeDef {
    pub name: String,
    pub op: String,
    pub inputs: Vec<Endpoint>,
    pub control_inputs: Vec<String>,
    pub attrs: BTreeMap<String, AttrValue>,
    /// Device constraint pattern, empty when unconstrained.
    pub device: String,
}

impl NodeDef {
    pub fn new(name: impl Into<String>, op: impl Into<String>) -> Self {
        NodeDef {
            name: name.into(),
            op: op.into(),
            ..Default::default()
        }
    }

    pub fn input(mut self, e: impl Into<Endpoint>) -> Self {
        self.inputs.push(e.into());
        self
    }

    pub fn inputs<E: Into<Endpoint>>(mut self, es: impl IntoIterator<Item = E>) -> Self {
        self.inputs.extend(es.into_iter().map(Into::into));
        self
    }

    pub fn control(mut self, name: impl Into<String>) -> Self {
        self.control_inputs.push(name.into());
        self
    }

    pub fn attr(mut self, key: &str, v: impl Into<AttrValue>) -> Self {
        self.attrs.insert(key.to_string(), v.into());
        self
    }

    pub fn device(mut self, d: impl Into<String>) -> Self {
        self.device = d.into();
        self
    }

    fn missing(&self, key: &str) -> Error {
        Error::invalid(format!(
            "node '{}' ({}) is missing attr '{key}'",
            self.name, self.op
        ))
    }

    fn wrong(&self, key: &str, want: &str) -> Error {
        Error::invalid(format!(
            "node '{}' ({}): attr '{key}' is not {want}",
            self.name, self.op
        ))
    }

    pub fn get_attr(&self, key: &str) -> Option<&AttrValue> {
        self.attrs.get(key)
    }

    pub fn attr_int(&self, key: &str) -> Result<i64> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_int().ok_or_else(|| self.wrong(key, "an int"))
    }

    pub fn attr_int_or(&self, key: &str, default: i64) -> Result<i64> {
        match self.attrs.get(key) {
            None => Ok(default),
            Some(v) => v.as_int().ok_or_else(|| self.wrong(key, "an int")),
        }
    }

    pub fn attr_usize(&self, key: &str) -> Result<usize> {
        let v = self.attr_int(key)?;
        usize::try_from(v).map_err(|_| self.wrong(key, "a non-negative int"))
    }

    pub fn attr_opt_int(&self, key: &str) -> Result<Option<i64>> {
        match self.attrs.get(key) {
            None => Ok(None),
            Some(v) => v.as_int().map(Some).ok_or_else(|| self.wrong(key, "an int")),
        }
    }

    pub fn attr_float(&self, key: &str) -> Result<f64> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_float().ok_or_else(|| self.wrong(key, "a float"))
    }

    pub fn attr_float_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.attrs.get(key) {
            None => Ok(default),
            Some(v) => v.as_float().ok_or_else(|| self.wrong(key, "a float")),
        }
    }

    pub fn attr_bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.attrs.get(key) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or_else(|| self.wrong(key, "a bool")),
        }
    }

    pub fn attr_str(&self, key: &str) -> Result<&str> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_str().ok_or_else(|| self.wrong(key, "a string"))
    }

    pub fn attr_str_or<'a>(&'a self, key: &str, default: &'a str) -> Result<&'a str> {
        match self.attrs.get(key) {
            None => Ok(default),
            Some(v) => v.as_str().ok_or_else(|| self.wrong(key, "a string")),
        }
    }

    pub fn attr_dtype(&self, key: &str) -> Result<DType> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_dtype().ok_or_else(|| self.wrong(key, "a dtype"))
    }

    pub fn attr_shape(&self, key: &str) -> Result<Shape> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_shape().ok_or_else(|| self.wrong(key, "a shape"))
    }

    pub fn attr_ints(&self, key: &str) -> Result<Vec<i64>> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_ints().ok_or_else(|| self.wrong(key, "an int list"))
    }

    pub fn attr_dtypes(&self, key: &str) -> Result<Vec<DType>> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_dtypes().ok_or_else(|| self.wrong(key, "a dtype list"))
    }

    pub fn attr_shapes(&self, key: &str) -> Result<Vec<Shape>> {
        let v = self.attrs.get(key).ok_or_else(|| self.missing(key))?;
        v.as_shapes().ok_or_else(|| self.wrong(key, "a shape list"))
    }

    pub fn attr_tensor(&self, key: &str) -> Result<&Tensor> {
        match self.attrs.get(key) {
            Some(AttrValue::Tensor(t)) => Ok(t),
            Some(_) => Err(self.wrong(key, "a tensor")),
            None => Err(self.missing(key)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDef {
    pub version: i64,
    pub nodes: Vec<NodeDef>,
}

impl Default for GraphDef {
    fn default() -> Self {
        GraphDef {
            version: 1,
            nodes: Vec::new(),
        }
    }
}

impl GraphDef {
    pub fn new() -> Self {
        Self::default()
    }

    /// Name → position. Later duplicates shadow earlier ones; run
    /// [`validate`] to reject them.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect()
    }

    pub fn node(&self, name: &str) -> Option<&NodeDef> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| n.name == name)
    }

    pub fn to_json(&self) -> String {
        json::to_json(self)
    }

    pub fn from_json(s: &str) -> Result<GraphDef> {
        json::from_json(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!("a:3".parse::<Endpoint>().unwrap(), Endpoint::new("a", 3));
        assert_eq!("a".parse::<Endpoint>().unwrap(), Endpoint::new("a", 0));
        assert_eq!("scope/a:0".parse::<Endpoint>().unwrap(), Endpoint::new("scope/a", 0));
        assert!("a:x".parse::<Endpoint>().is_err());
        assert!(":1".parse::<Endpoint>().is_err());
        assert!("^a".parse::<Endpoint>().is_err());
    }
}
