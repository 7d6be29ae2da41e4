use crate::tensor::{DType, Shape, Tensor};

/// Compile-time attribute value. Accessors coerce between representations
/// that share a JSON encoding (a shape and an int list, a dtype and its name).
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    DType(DType),
    Shape(Shape),
    Tensor(Tensor),
    IntList(Vec<i64>),
    DTypeList(Vec<DType>),
    ShapeList(Vec<Shape>),
    StrList(Vec<String>),
}

impl AttrValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            AttrValue::Float(v) => Some(*v),
            AttrValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            AttrValue::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_dtype(&self) -> Option<DType> {
        match self {
            AttrValue::DType(d) => Some(*d),
            AttrValue::Str(s) => s.parse().ok(),
            _ => None,
        }
    }

    pub fn as_shape(&self) -> Option<Shape> {
        match self {
            AttrValue::Shape(s) => Some(s.clone()),
            AttrValue::IntList(v) => v
                .iter()
                .map(|&d| usize::try_from(d).ok())
                .collect::<Option<Vec<_>>>()
                .map(Shape::new),
            _ => None,
        }
    }

    pub fn as_ints(&self) -> Option<Vec<i64>> {
        match self {
            AttrValue::IntList(v) => Some(v.clone()),
            AttrValue::Shape(s) => Some(s.dims().iter().map(|&d| d as i64).collect()),
            AttrValue::ShapeList(v) if v.is_empty() => Some(Vec::new()),
            AttrValue::DTypeList(v) if v.is_empty() => Some(Vec::new()),
            AttrValue::StrList(v) if v.is_empty() => Some(Vec::new()),
            _ => None,
        }
    }

    pub fn as_dtypes(&self) -> Option<Vec<DType>> {
        match self {
            AttrValue::DTypeList(v) => Some(v.clone()),
            AttrValue::StrList(v) => v.iter().map(|s| s.parse().ok()).collect(),
            AttrValue::IntList(v) if v.is_empty() => Some(Vec::new()),
            _ => None,
        }
    }

    pub fn as_shapes(&self) -> Option<Vec<Shape>> {
        match self {
            AttrValue::ShapeList(v) => Some(v.clone()),
            AttrValue::IntList(v) if v.is_empty() => Some(Vec::new()),
            _ => None,
        }
    }

    pub fn as_strs(&self) -> Option<Vec<String>> {
        match self {
            AttrValue::StrList(v) => Some(v.clone()),
            AttrValue::IntList(v) if v.is_empty() => Some(Vec::new()),
            _ => None,
        }
    }

    /// Structural equality up to the coercions the accessors perform, so a
    /// JSON round trip compares equal to the original.
    pub fn equivalent(&self, other: &AttrValue) -> bool {
        if self == other {
            return true;
        }
        match (self, other) {
            (AttrValue::Tensor(a), AttrValue::Tensor(b)) => a.bit_eq(b),
            (AttrValue::Float(a), AttrValue::Float(b)) => a.to_bits() == b.to_bits(),
            _ => {
                (self.as_ints().is_some() && self.as_ints() == other.as_ints())
                    || (self.as_dtype().is_some() && self.as_dtype() == other.as_dtype())
                    || (self.as_dtypes().is_some() && self.as_dtypes() == other.as_dtypes())
                    || (self.as_shapes().is_some() && self.as_shapes() == other.as_shapes())
                    || (self.as_strs().is_some() && self.as_strs() == other.as_strs())
            }
        }
    }
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<i32> for AttrValue {
    fn from(v: i32) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<usize> for AttrValue {
    fn from(v: usize) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::Float(v)
    }
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Bool(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_string())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

impl From<DType> for AttrValue {
    fn from(v: DType) -> Self {
        AttrValue::DType(v)
    }
}

impl From<Shape> for AttrValue {
    fn from(v: Shape) -> Self {
        AttrValue::Shape(v)
    }
}

impl From<Tensor> for AttrValue {
    fn from(v: Tensor) -> Self {
        AttrValue::Tensor(v)
    }
}

impl From<Vec<i64>> for AttrValue {
    fn from(v: Vec<i64>) -> Self {
        AttrValue::IntList(v)
    }
}

impl From<Vec<DType>> for AttrValue {
    fn from(v: Vec<DType>) -> Self {
        AttrValue::DTypeList(v)
    }
}

impl From<Vec<Shape>> for AttrValue {
    fn from(v: Vec<Shape>) -> Self {
        AttrValue::ShapeList(v)
    }
}

impl From<Vec<String>> for AttrValue {
    fn from(v: Vec<String>) -> Self {
        AttrValue::StrList(v)
    }
}
