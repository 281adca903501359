//! Dense NCHW tensors.
//!
//! A [`Tensor`] is an immutable value: every operation returns a new tensor and
//! there is no public way to mutate the backing buffer. All dimensions of a
//! tensor are at least one.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(format!("{self} has a zero-sized dimension")));
        }
        Ok(())
    }

    /// Row-major NCHW offset of `(n, c, h, w)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub const fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape4,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn fill(shape: Shape4, value: f32) -> Result<Self> {
        shape.validate()?;
        Ok(Self { shape, data: vec![value; shape.numel()] })
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::fill(shape, 0.0)
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    /// Crate-internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Shape4, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
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

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// The contiguous `h × w` plane of channel `c` in image `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(&self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("add {} + {}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape, data })
    }

    /// Channel concatenation; channels of `self` come first.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Self> {
        Self::concat_many(&[self, other])
    }

    pub fn concat_many(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?.shape;
        let mut channels = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::ShapeMismatch(format!("concat {first} with {s}")));
            }
            channels += s.c;
        }
        let out_shape = first.with_channels(channels);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for p in parts {
                let block = p.shape.c * p.shape.plane();
                data.extend_from_slice(&p.data[n * block..(n + 1) * block]);
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Copies channels `[from, from + count)`.
    pub fn slice_channels(&self, from: usize, count: usize) -> Result<Self> {
        if count == 0 || from + count > self.shape.c {
            return Err(Error::Index(format!("channels [{from}, {}) of {}", from + count, self.shape)));
        }
        let plane = self.shape.plane();
        let out_shape = self.shape.with_channels(count);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..self.shape.n {
            let start = (n * self.shape.c + from) * plane;
            data.extend_from_slice(&self.data[start..start + count * plane]);
        }
        Ok(Self { shape: out_shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
