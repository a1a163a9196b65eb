//! Dense NCHW tensors of `f32`.
//!
//! A [`Tensor`] is a plain value: four extents plus a contiguous row-major
//! buffer. Gradient tracking lives on the [`Tape`](crate::autograd::Tape),
//! which records operations over tensor values.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// How to populate a freshly created tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Fill {
    Constant(f32),
    Uniform { lo: f32, hi: f32 },
    Values(Vec<f32>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor. `seed` only matters for [`Fill::Uniform`].
    pub fn new(shape: impl Into<Shape>, fill: Fill, seed: u64) -> Result<Self> {
        let shape = shape.into();
        let len = shape.numel();
        let data = match fill {
            Fill::Constant(v) => vec![v; len],
            Fill::Uniform { lo, hi } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| rng.gen_range(lo..=hi)).collect()
            }
            Fill::Values(values) => {
                if values.len() != len {
                    return Err(shape_err!(
                        "{} values supplied for shape {shape} ({len} elements)",
                        values.len()
                    ));
                }
                values
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: impl Into<Shape>, value: f32) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, Fill::Values(data), 0)
    }

    pub fn uniform(shape: impl Into<Shape>, lo: f32, hi: f32, seed: u64) -> Self {
        let shape = shape.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..=hi)).collect();
        Tensor { shape, data }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let i = self.shape.index(n, c, h, w);
        &mut self.data[i]
    }

    /// The single element of a `1x1x1x1` tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Same buffer, new extents. Element count must not change.
    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.data.len() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Contiguous slice holding image `n`.
    pub fn item_slice(&self, n: usize) -> &[f32] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Channel band `[start, start + count)` as a new tensor.
    pub fn channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let s = self.shape;
        if start + count > s.c {
            return Err(shape_err!("channel band {start}..{} out of range for {s}", start + count));
        }
        let plane = s.plane();
        let mut out = Tensor::zeros(Shape::new(s.n, count, s.h, s.w));
        for n in 0..s.n {
            let src = &self.data[(n * s.c + start) * plane..(n * s.c + start + count) * plane];
            out.data[n * count * plane..(n + 1) * count * plane].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Batch item `n` as a `1xCxHxW` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let s = self.shape;
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.item_slice(n).to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("add_assign {} += {}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Dot product accumulated in f64.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("dot {} . {}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Concatenates along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| crate::Error::Argument("stack of zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(shape_err!("stack {first} with {s}"));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor({}, [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "])")
    }
}
