use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// NCHW shape. Every tensor in this crate is rank 4; vectors and scalars
/// use trailing (or leading) unit dimensions.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Contiguous row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    /// Shape obtained by broadcasting `self` against `other`, if compatible.
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        let mut out = [0; 4];
        for (o, (&a, &b)) in out.iter_mut().zip(self.0.iter().zip(&other.0)) {
            *o = if a == b {
                a
            } else if a == 1 {
                b
            } else if b == 1 {
                a
            } else {
                return None;
            };
        }
        Some(Shape(out))
    }

    /// True when `self` can be expanded to `target` without copying semantics
    /// changing, i.e. every dimension matches or is 1.
    pub fn expands_to(&self, target: &Shape) -> bool {
        (0..4).all(|d| self.0[d] == target.0[d] || self.0[d] == 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "[{n}, {c}, {h}, {w}]")
    }
}

/// Immutable, cheaply clonable dense f32 buffer with an NCHW shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor").field("shape", &self.shape).field("data[..8]", &preview).finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!("buffer of {} elements cannot have shape {shape}", data.len())));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Panicking constructor for internal kernels whose sizes are correct by construction.
    pub(crate) fn new_unchecked(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor::new_unchecked(shape, vec![value; shape.numel()])
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::SCALAR, value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Takes the buffer, copying only if it is shared.
    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| arc.as_ref().clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// First element; intended for scalar tensors.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {} to {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor::new_unchecked(self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("zip of {} and {}", self.shape, other.shape)));
        }
        Ok(Tensor::new_unchecked(self.shape, self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Single sample `n` as a `[1, C, H, W]` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape.0;
        let len = c * h * w;
        Tensor::new_unchecked(Shape::new(1, c, h, w), self.data[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks equally shaped `[1, C, H, W]` tensors (or `[k, C, H, W]`) along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let [pn, pc, ph, pw] = p.shape.0;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::Shape(format!("stack of {} and {}", first.shape, p.shape)));
            }
            n += pn;
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::new_unchecked(Shape::new(n, c, h, w), data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}
