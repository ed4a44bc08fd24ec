use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Row-major extents of a dense array. Rank 0 is a scalar.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::invalid(format!("rank {} exceeds {MAX_RANK}", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
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

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "×")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Immutable dense `f64` array. Cloning shares the buffer.
#[derive(Clone, PartialEq)]
pub struct NdArray {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for NdArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NdArray")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl NdArray {
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::with_shape(shape, data)
    }

    pub fn with_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::invalid(format!(
                "buffer of length {} does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(NdArray {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Self {
        NdArray {
            shape: Shape::scalar(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Self::with_shape(shape, vec![0.0; n])
    }

    pub fn full(dims: &[usize], v: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Self::with_shape(shape, vec![v; n])
    }

    /// Standard-normal entries drawn from a ChaCha stream seeded by `seed`.
    pub fn randn(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn_with(dims, &mut rng)
    }

    pub fn randn_with<R: rand::Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self::with_shape(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Same buffer under a new shape of equal element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(NdArray {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        NdArray {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &NdArray, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(NdArray {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &NdArray) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &NdArray) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &NdArray) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &NdArray) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the `index`-th slab along the leading axis.
    pub fn slab(&self, index: usize) -> Result<Self> {
        let dims = self.dims();
        if dims.is_empty() || index >= dims[0] {
            return Err(Error::invalid(format!("slab {index} out of range for {}", self.shape)));
        }
        let inner: usize = dims[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        if dims.len() == 1 {
            return Ok(NdArray::scalar(data[0]));
        }
        NdArray::from_vec(&dims[1..], data)
    }

    /// Stack equally-shaped arrays along a new leading axis.
    pub fn stack(items: &[NdArray]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero arrays"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for it in items {
            first.expect_same_shape(it, "stack")?;
            data.extend_from_slice(it.data());
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        NdArray::from_vec(&dims, data)
    }

    /// Gather slabs along the leading axis.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let dims = self.dims();
        if dims.is_empty() {
            return Err(Error::invalid("gather_rows on a scalar"));
        }
        let inner: usize = dims[1..].iter().product();
        let mut data = Vec::with_capacity(inner * rows.len());
        for &r in rows {
            if r >= dims[0] {
                return Err(Error::invalid(format!("row {r} out of range for {}", self.shape)));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut out = vec![rows.len()];
        out.extend_from_slice(&dims[1..]);
        NdArray::from_vec(&out, data)
    }

    pub(crate) fn expect_same_shape(&self, other: &NdArray, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Little-endian bytes of the buffer, used for hashing and file payloads.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 8);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn bit_eq(&self, other: &NdArray) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
