use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ceil_mode: bool,
}

impl PoolSpec {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, pad: 0, ceil_mode: true }
    }

    fn out_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!("pool kernel/stride must be >= 1: {self:?}")));
        }
        let padded = len + 2 * self.pad;
        if self.kernel > padded {
            return Err(Error::ShapeMismatch(format!("pool kernel {} exceeds padded extent {padded}", self.kernel)));
        }
        let span = padded - self.kernel;
        let mut out = if self.ceil_mode { span.div_ceil(self.stride) } else { span / self.stride } + 1;
        // the last window must start inside the image (or its leading pad)
        if self.ceil_mode && (out - 1) * self.stride >= len + self.pad {
            out -= 1;
        }
        Ok(out)
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(Shape4::new(input.n, input.c, self.out_len(input.h)?, self.out_len(input.w)?))
    }
}

/// Max pooling; windows running past the input are clamped to its boundary.
pub fn maxpool2d(x: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let s = x.shape();
    let out_shape = spec.output_shape(s)?;
    let window = |o: usize, len: usize| {
        let start = (o * spec.stride).saturating_sub(spec.pad);
        let end = (o * spec.stride + spec.kernel).saturating_sub(spec.pad).min(len);
        start..end
    };
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for oy in 0..out_shape.h {
                let rows = window(oy, s.h);
                for ox in 0..out_shape.w {
                    let cols = window(ox, s.w);
                    let mut m = f32::NEG_INFINITY;
                    for y in rows.clone() {
                        for v in &plane[y * s.w + cols.start..y * s.w + cols.end] {
                            m = m.max(*v);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}
