//! Naive double-precision kernels.
//!
//! Straight loop nests with no blocking or reuse. They back the numerical
//! side of gradient checking, where the output must not carry the rounding
//! noise of single-precision storage.

use crate::ops::conv::ConvSpec;
use crate::tensor::{Shape, Tensor};

/// Dense NCHW array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: Shape) -> Self {
        Array {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let s = self.shape;
        &mut self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| v as f32).collect()).expect("shape matches data")
    }
}

impl From<&Tensor> for Array {
    fn from(t: &Tensor) -> Self {
        Array {
            shape: t.shape(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn bias_at(b: Option<&Array>, o: usize) -> f64 {
    b.map_or(0.0, |b| b.data[o])
}

/// Elementwise op where `b` is either the same shape, `(N,C,1,1)`,
/// `(N,1,H,W)` or a single scalar.
pub fn broadcast(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let s = a.shape;
    let t = b.shape;
    let mut out = Array::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let bv = if t == s {
                        b.at(n, c, y, x)
                    } else if t.numel() == 1 {
                        b.data[0]
                    } else if t.h == 1 && t.w == 1 {
                        b.at(n, c, 0, 0)
                    } else {
                        b.at(n, 0, y, x)
                    };
                    *out.at_mut(n, c, y, x) = f(a.at(n, c, y, x), bv);
                }
            }
        }
    }
    out
}

pub fn conv2d(x: &Array, w: &Array, b: Option<&Array>, spec: &ConvSpec) -> Array {
    let s = x.shape;
    let (oh, ow) = spec.output_hw(s.h, s.w).expect("valid conv geometry");
    let (kh, kw) = spec.kernel;
    let mut out = Array::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias_at(b, o);
                    for c in 0..s.c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * spec.stride.0 + i * spec.dilation.0) as isize - spec.padding.0 as isize;
                                let ix = (ox * spec.stride.1 + j * spec.dilation.1) as isize - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w.at(o, c, i, j) * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(n, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Scatter form: every input pixel adds `x * w` into the output window it
/// maps to. Weight layout `(in, out, kh, kw)`.
pub fn transpose_conv2d(x: &Array, w: &Array, b: Option<&Array>, spec: &ConvSpec) -> Array {
    let s = x.shape;
    let (oh, ow) = spec.transpose_output_hw(s.h, s.w).expect("valid transposed conv geometry");
    let (kh, kw) = spec.kernel;
    let cout = spec.out_channels;
    let mut out = Array::zeros(Shape::new(s.n, cout, oh, ow));
    for n in 0..s.n {
        for o in 0..cout {
            for y in 0..oh {
                for x_ in 0..ow {
                    *out.at_mut(n, o, y, x_) = bias_at(b, o);
                }
            }
        }
        for c in 0..s.c {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let v = x.at(n, c, iy, ix);
                    for o in 0..cout {
                        for i in 0..kh {
                            for j in 0..kw {
                                let oy = (iy * spec.stride.0 + i * spec.dilation.0) as isize - spec.padding.0 as isize;
                                let ox = (ix * spec.stride.1 + j * spec.dilation.1) as isize - spec.padding.1 as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                *out.at_mut(n, o, oy as usize, ox as usize) += v * w.at(c, o, i, j);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear read of plane `(n, c)` at `(px, py)`; neighbours outside the
/// image contribute zero.
pub fn bilinear(x: &Array, n: usize, c: usize, px: f64, py: f64) -> f64 {
    let s = x.shape;
    let (x0, y0) = (px.floor(), py.floor());
    let (lx, ly) = (px - x0, py - y0);
    let read = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= s.h as f64 || xx >= s.w as f64 {
            0.0
        } else {
            x.at(n, c, yy as usize, xx as usize)
        }
    };
    (1.0 - ly) * (1.0 - lx) * read(y0, x0)
        + (1.0 - ly) * lx * read(y0, x0 + 1.0)
        + ly * (1.0 - lx) * read(y0 + 1.0, x0)
        + ly * lx * read(y0 + 1.0, x0 + 1.0)
}

/// Tap `t` samples at its regular grid position shifted by
/// `(offsets[2t], offsets[2t+1])` and is scaled by `mask[t]`.
pub fn deform_conv2d(x: &Array, offsets: &Array, mask: &Array, w: &Array, b: Option<&Array>, spec: &ConvSpec) -> Array {
    let s = x.shape;
    let (oh, ow) = spec.output_hw(s.h, s.w).expect("valid conv geometry");
    let (kh, kw) = spec.kernel;
    let mut out = Array::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias_at(b, o);
                    for i in 0..kh {
                        for j in 0..kw {
                            let t = i * kw + j;
                            let py = (oy * spec.stride.0 + i * spec.dilation.0) as f64 - spec.padding.0 as f64
                                + offsets.at(n, 2 * t + 1, oy, ox);
                            let px = (ox * spec.stride.1 + j * spec.dilation.1) as f64 - spec.padding.1 as f64
                                + offsets.at(n, 2 * t, oy, ox);
                            let m = mask.at(n, t, oy, ox);
                            for c in 0..s.c {
                                acc += w.at(o, c, i, j) * m * bilinear(x, n, c, px, py);
                            }
                        }
                    }
                    *out.at_mut(n, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

pub fn leaky_relu(x: &Array, slope: f64) -> Array {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn sigmoid(x: &Array) -> Array {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn global_avg_pool(x: &Array) -> Array {
    let s = x.shape;
    let plane = s.plane();
    Array {
        shape: Shape::new(s.n, s.c, 1, 1),
        data: x.data.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect(),
    }
}

pub fn channel_mean(x: &Array) -> Array {
    let s = x.shape;
    let mut out = Array::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for y in 0..s.h {
            for x_ in 0..s.w {
                let m = (0..s.c).map(|c| x.at(n, c, y, x_)).sum::<f64>() / s.c as f64;
                *out.at_mut(n, 0, y, x_) = m;
            }
        }
    }
    out
}

/// `x` is `(N, Cin, 1, 1)`, `w` is `(Cout, Cin, 1, 1)`.
pub fn linear(x: &Array, w: &Array, b: Option<&Array>) -> Array {
    let (n_, cin, cout) = (x.shape.n, x.shape.c, w.shape.n);
    let mut out = Array::zeros(Shape::new(n_, cout, 1, 1));
    for n in 0..n_ {
        for o in 0..cout {
            let acc: f64 = (0..cin).map(|c| w.at(o, c, 0, 0) * x.at(n, c, 0, 0)).sum();
            *out.at_mut(n, o, 0, 0) = acc + bias_at(b, o);
        }
    }
    out
}

pub fn concat_channels(parts: &[&Array]) -> Array {
    let s0 = parts[0].shape;
    let total: usize = parts.iter().map(|p| p.shape.c).sum();
    let mut out = Array::zeros(Shape::new(s0.n, total, s0.h, s0.w));
    for n in 0..s0.n {
        let mut off = 0;
        for p in parts {
            for c in 0..p.shape.c {
                for y in 0..s0.h {
                    for x in 0..s0.w {
                        *out.at_mut(n, off + c, y, x) = p.at(n, c, y, x);
                    }
                }
            }
            off += p.shape.c;
        }
    }
    out
}

pub fn slice_channels(x: &Array, start: usize, count: usize) -> Array {
    let s = x.shape;
    let mut out = Array::zeros(Shape::new(s.n, count, s.h, s.w));
    for n in 0..s.n {
        for c in 0..count {
            for y in 0..s.h {
                for x_ in 0..s.w {
                    *out.at_mut(n, c, y, x_) = x.at(n, start + c, y, x_);
                }
            }
        }
    }
    out
}

pub fn sum(x: &Array) -> Array {
    Array {
        shape: Shape::scalar(),
        data: vec![x.data.iter().sum()],
    }
}

/// Mean of `|target - pred|^p`.
pub fn loss_lp(target: &Array, pred: &Array, p: u8) -> Array {
    let total: f64 = target
        .data
        .iter()
        .zip(&pred.data)
        .map(|(y, yh)| (y - yh).abs().powi(p as i32))
        .sum();
    Array {
        shape: Shape::scalar(),
        data: vec![total / target.data.len().max(1) as f64],
    }
}
