use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable dense f64 array: a shape plus row-major data.
///
/// Rank 0 (empty shape) is a scalar with one element. Cloning is cheap;
/// the data buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Value {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::LengthMismatch {
                op: "Value::new",
                len: data.len(),
                shape,
            });
        }
        Ok(Value {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(x: f64) -> Self {
        Value {
            shape: Vec::new(),
            data: Arc::new(vec![x]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Value {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Value {
            shape: shape.to_vec(),
            data: Arc::new(vec![1.0; numel]),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Value {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    /// Row-major matrix from a flat buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Value::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar extraction; panics if not rank 0.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Value {
            shape,
            data: Arc::new(data),
        }
    }
}

/// NumPy broadcast shape of two shapes, right-aligned; None if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}
