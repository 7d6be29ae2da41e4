//! Dense tensor values and the pure CPU math behind the standard kernels.
//!
//! A [`Tensor`] is an immutable, cheaply clonable value: the element buffer
//! sits behind an `Arc`, so handing a tensor to another executor or across an
//! in-process rendezvous never copies data.

pub mod codec;
pub mod ops;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
    Bool,
    String,
}

impl DType {
    pub const ALL: [DType; 6] = [
        DType::F32,
        DType::F64,
        DType::I32,
        DType::I64,
        DType::Bool,
        DType::String,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::Bool => "bool",
            DType::String => "string",
        }
    }

    /// Wire/checkpoint code.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
            DType::I64 => 4,
            DType::Bool => 5,
            DType::String => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.code() == code)
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    pub fn is_integer(self) -> bool {
        matches!(self, DType::I32 | DType::I64)
    }

    pub fn is_numeric(self) -> bool {
        self.is_float() || self.is_integer()
    }

    /// Bytes per element; strings report the size of a length prefix.
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::Bool => 1,
            DType::String => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(DType::F32),
            "f64" | "float64" => Ok(DType::F64),
            "i32" | "int32" => Ok(DType::I32),
            "i64" | "int64" => Ok(DType::I64),
            "bool" => Ok(DType::Bool),
            "string" => Ok(DType::String),
            other => Err(Error::invalid(format!("unknown dtype '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn num_elements(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0[i]
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.rank()];
        for (slot, stride) in out.iter_mut().zip(self.strides()) {
            *slot = flat / stride;
            flat %= stride;
        }
        out
    }

    /// Number of elements in one leading-dimension row.
    pub fn row_len(&self) -> usize {
        self.0.iter().skip(1).product()
    }

    pub fn with_leading(&self, rows: usize) -> Shape {
        let mut dims = self.0.clone();
        if dims.is_empty() {
            dims.push(rows);
        } else {
            dims[0] = rows;
        }
        Shape(dims)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl From<Vec<usize>> for Shape {
    fn from(v: Vec<usize>) -> Self {
        Shape(v)
    }
}

impl From<&[usize]> for Shape {
    fn from(v: &[usize]) -> Self {
        Shape(v.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(v: [usize; N]) -> Self {
        Shape(v.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
    Str(Vec<String>),
}

impl Buffer {
    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
            Buffer::I32(_) => DType::I32,
            Buffer::I64(_) => DType::I64,
            Buffer::Bool(_) => DType::Bool,
            Buffer::Str(_) => DType::String,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
            Buffer::I32(v) => v.len(),
            Buffer::I64(v) => v.len(),
            Buffer::Bool(v) => v.len(),
            Buffer::Str(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, n: usize) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(vec![0.0; n]),
            DType::F64 => Buffer::F64(vec![0.0; n]),
            DType::I32 => Buffer::I32(vec![0; n]),
            DType::I64 => Buffer::I64(vec![0; n]),
            DType::Bool => Buffer::Bool(vec![false; n]),
            DType::String => Buffer::Str(vec![String::new(); n]),
        }
    }
}

/// Element types that can live in a tensor buffer.
pub trait Element: Clone + Send + Sync + fmt::Debug + 'static {
    const DTYPE: DType;
    fn into_buffer(v: Vec<Self>) -> Buffer;
    fn view(b: &Buffer) -> Option<&[Self]>;
    fn view_mut(b: &mut Buffer) -> Option<&mut Vec<Self>>;
}

macro_rules! impl_element {
    ($t:ty, $variant:ident, $dt:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dt;
            fn into_buffer(v: Vec<Self>) -> Buffer {
                Buffer::$variant(v)
            }
            fn view(b: &Buffer) -> Option<&[Self]> {
                match b {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn view_mut(b: &mut Buffer) -> Option<&mut Vec<Self>> {
                match b {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
        }
    };
}

impl_element!(f32, F32, DType::F32);
impl_element!(f64, F64, DType::F64);
impl_element!(i32, I32, DType::I32);
impl_element!(i64, I64, DType::I64);
impl_element!(bool, Bool, DType::Bool);
impl_element!(String, Str, DType::String);

/// Dense n-dimensional array stored row-major.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Buffer>,
}

impl Tensor {
    pub fn from_buffer(shape: impl Into<Shape>, data: Buffer) -> Result<Tensor> {
        let shape = shape.into();
        if shape.num_elements() != data.len() {
            return Err(Error::invalid(format!(
                "buffer of {} elements does not fit shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn new<T: Element>(shape: impl Into<Shape>, data: Vec<T>) -> Result<Tensor> {
        Tensor::from_buffer(shape, T::into_buffer(data))
    }

    pub fn scalar<T: Element>(v: T) -> Tensor {
        Tensor {
            shape: Shape::scalar(),
            data: Arc::new(T::into_buffer(vec![v])),
        }
    }

    pub fn vector<T: Element>(v: Vec<T>) -> Tensor {
        Tensor {
            shape: Shape::new(vec![v.len()]),
            data: Arc::new(T::into_buffer(v)),
        }
    }

    pub fn zeros(dtype: DType, shape: impl Into<Shape>) -> Tensor {
        let shape = shape.into();
        let n = shape.num_elements();
        Tensor {
            shape,
            data: Arc::new(Buffer::zeros(dtype, n)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    /// Mutable access to the buffer, copying it first if other tensors share it.
    pub fn buffer_mut(&mut self) -> &mut Buffer {
        Arc::make_mut(&mut self.data)
    }

    /// True when both tensors share the same underlying allocation.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn as_slice<T: Element>(&self) -> Result<&[T]> {
        T::view(&self.data).ok_or_else(|| Error::DTypeMismatch {
            op: "as_slice".into(),
            expected: T::DTYPE,
            got: self.dtype(),
        })
    }

    pub fn to_vec<T: Element>(&self) -> Result<Vec<T>> {
        self.as_slice::<T>().map(|s| s.to_vec())
    }

    pub fn scalar_value<T: Element>(&self) -> Result<T> {
        let s = self.as_slice::<T>()?;
        if s.len() != 1 {
            return Err(Error::invalid(format!(
                "expected a single-element tensor, got shape {}",
                self.shape
            )));
        }
        Ok(s[0].clone())
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.num_elements() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "Reshape".into(),
                a: self.shape.clone(),
                b: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Reads any numeric element as f64 (used for diagnostics and tests).
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(match &*self.data {
            Buffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::F64(v) => v.clone(),
            Buffer::I32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::I64(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::Bool(v) => v.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
            Buffer::Str(_) => {
                return Err(Error::invalid("string tensor has no numeric value"));
            }
        })
    }

    /// Bitwise equality: dtype, shape and the exact bit patterns of every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&*self.data, &*other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Buffer::F64(a), Buffer::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }

    /// Size of the element payload in bytes.
    pub fn byte_size(&self) -> usize {
        match &*self.data {
            Buffer::Str(v) => v.iter().map(|s| s.len() + 8).sum(),
            b => b.len() * b.dtype().size_of(),
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}{}>", self.dtype(), self.shape)?;
        const MAX: usize = 16;
        match &*self.data {
            Buffer::F32(v) => write!(f, "{:?}", &v[..v.len().min(MAX)]),
            Buffer::F64(v) => write!(f, "{:?}", &v[..v.len().min(MAX)]),
            Buffer::I32(v) => write!(f, "{:?}", &v[..v.len().min(MAX)]),
            Buffer::I64(v) => write!(f, "{:?}", &v[..v.len().min(MAX)]),
            Buffer::Bool(v) => write!(f, "{:?}", &v[..v.len().min(MAX)]),
            Buffer::Str(v) => write!(f, "{:?}", &v[..v.len().min(MAX)]),
        }?;
        if self.len() > MAX {
            write!(f, "..")?;
        }
        Ok(())
    }
}

/// Sparse rows of a dense tensor: an `m × n` index matrix paired with `m`
/// value rows. Gradients of row gathers use the `n = 1` form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePair {
    indices: Tensor,
    values: Tensor,
}

impl SparsePair {
    pub fn new(indices: Tensor, values: Tensor) -> Result<SparsePair> {
        if indices.dtype() != DType::I64 {
            return Err(Error::DTypeMismatch {
                op: "SparsePair".into(),
                expected: DType::I64,
                got: indices.dtype(),
            });
        }
        let m = match indices.rank() {
            1 | 2 => indices.dims()[0],
            _ => {
                return Err(Error::invalid(format!(
                    "sparse indices must be rank 1 or 2, got {}",
                    indices.shape()
                )))
            }
        };
        let values_rows = values.dims().first().copied().unwrap_or(1);
        if values.rank() == 0 || values_rows != m {
            return Err(Error::ShapeMismatch {
                op: "SparsePair".into(),
                a: indices.shape().clone(),
                b: values.shape().clone(),
            });
        }
        Ok(SparsePair { indices, values })
    }

    pub fn indices(&self) -> &Tensor {
        &self.indices
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scatter-adds the rows into a zero tensor of `dense_shape`.
    pub fn to_dense(&self, dense_shape: &Shape) -> Result<Tensor> {
        let zeros = Tensor::zeros(self.values.dtype(), dense_shape.clone());
        ops::scatter_add_rows(&zeros, &self.indices, &self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_has_one_element() {
        assert_eq!(Shape::scalar().num_elements(), 1);
        let t = Tensor::scalar(3.5f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.scalar_value::<f64>().unwrap(), 3.5);
    }

    #[test]
    fn buffer_length_must_match_shape() {
        assert!(Tensor::new([2, 3], vec![0f32; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0f32; 6]).is_ok());
        assert!(Tensor::new([0, 3], Vec::<f32>::new()).is_ok());
    }

    #[test]
    fn dtype_roundtrip() {
        for d in DType::ALL {
            assert_eq!(d.name().parse::<DType>().unwrap(), d);
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
    }

    #[test]
    fn bit_eq_distinguishes_nan_payloads() {
        let a = Tensor::vector(vec![f64::from_bits(0x7ff8_0000_0000_0001)]);
        let b = Tensor::vector(vec![f64::from_bits(0x7ff8_0000_0000_0002)]);
        assert!(a.bit_eq(&a.clone()));
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn sparse_pair_requires_matching_rows() {
        let idx = Tensor::vector(vec![0i64, 2]);
        let vals = Tensor::new([3, 1], vec![1f64, 2., 3.]).unwrap();
        assert!(SparsePair::new(idx.clone(), vals).is_err());
        let vals = Tensor::new([2, 1], vec![1f64, 2.]).unwrap();
        let sp = SparsePair::new(idx, vals).unwrap();
        let dense = sp.to_dense(&Shape::new(vec![3, 1])).unwrap();
        assert_eq!(dense.to_vec::<f64>().unwrap(), vec![1., 0., 2.]);
    }

    proptest! {
        #[test]
        fn row_major_linearization_roundtrips(dims in prop::collection::vec(1usize..5, 0..5), seed in any::<u64>()) {
            let shape = Shape::new(dims.clone());
            let n = shape.num_elements();
            let flat = (seed as usize) % n;
            let idx = shape.unravel(flat);
            prop_assert_eq!(shape.flat_index(&idx), flat);
            // Σ i_k · stride_k with stride_k = Π_{j>k} dims_j
            let mut expected = 0usize;
            for (k, i) in idx.iter().enumerate() {
                expected += i * dims[k + 1..].iter().product::<usize>();
            }
            prop_assert_eq!(expected, flat);
        }
    }
}
