//! Dense 2-D convolution and its transpose, lowered to im2col + GEMM.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Geometry of a convolution layer. For a transposed convolution the
/// channel fields describe the transposed op (its input and output).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvSpec {
    /// Square `k x k` kernel, stride 1, "same" padding for odd `k`.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            dilation: (1, 1),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Weight extents `(out, in, kh, kw)` for a forward convolution.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    /// Weight extents `(in, out, kh, kw)` for a transposed convolution.
    pub fn transpose_weight_shape(&self) -> Shape {
        Shape::new(self.in_channels, self.out_channels, self.kernel.0, self.kernel.1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |len: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let span = d * (k - 1) + 1;
            let padded = len + 2 * p;
            if s == 0 || k == 0 || padded < span {
                None
            } else {
                Some((padded - span) / s + 1)
            }
        };
        match (
            dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0),
            dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1),
        ) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(shape_err!("degenerate conv output for {h}x{w} input with {self:?}")),
        }
    }

    pub fn transpose_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |len: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            if len == 0 {
                return None;
            }
            ((len - 1) * s + d * (k - 1) + 1).checked_sub(2 * p).filter(|&v| v > 0)
        };
        match (
            dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0),
            dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(shape_err!("degenerate transposed conv output for {h}x{w} with {self:?}")),
        }
    }

    pub(crate) fn geom(&self) -> Geom {
        Geom {
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.padding.0,
            pw: self.padding.1,
            dh: self.dilation.0,
            dw: self.dilation.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub dh: usize,
    pub dw: usize,
}

impl Geom {
    /// Input coordinate read by output index `o` at tap `k`, if in range.
    #[inline]
    pub fn src(o: usize, k: usize, s: usize, p: usize, d: usize, len: usize) -> Option<usize> {
        let v = (o * s + k * d) as isize - p as isize;
        (v >= 0 && (v as usize) < len).then_some(v as usize)
    }
}

/// Unfolds `src` (`channels x h x w`) into `col` (`channels*kh*kw x oh*ow`).
pub(crate) fn im2col(src: &[f32], channels: usize, h: usize, w: usize, g: Geom, oh: usize, ow: usize, col: &mut [f32]) {
    let plane = oh * ow;
    debug_assert_eq!(col.len(), channels * g.kh * g.kw * plane);
    for c in 0..channels {
        let img = &src[c * h * w..(c + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    match Geom::src(oy, i, g.sh, g.ph, g.dh, h) {
                        None => out.fill(0.0),
                        Some(iy) => {
                            let line = &img[iy * w..(iy + 1) * w];
                            for (ox, v) in out.iter_mut().enumerate() {
                                *v = match Geom::src(ox, j, g.sw, g.pw, g.dw, w) {
                                    Some(ix) => line[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back and accumulates into `dst`.
pub(crate) fn col2im(col: &[f32], channels: usize, h: usize, w: usize, g: Geom, oh: usize, ow: usize, dst: &mut [f32]) {
    let plane = oh * ow;
    for c in 0..channels {
        let img = &mut dst[c * h * w..(c + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let Some(iy) = Geom::src(oy, i, g.sh, g.ph, g.dh, h) else { continue };
                    let line = &mut img[iy * w..(iy + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        if let Some(ix) = Geom::src(ox, j, g.sw, g.pw, g.dw, w) {
                            line[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out_item = weight (cout x K) * col (K x plane) + bias`. Shared by the
/// plain and the deformable convolution so both round identically.
pub(crate) fn apply_weight(col: &[f32], weight: &[f32], bias: Option<&[f32]>, cout: usize, k: usize, plane: usize, out: &mut [f32]) {
    out.fill(0.0);
    gemm_nn(cout, k, plane, weight, col, out);
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out[o * plane..(o + 1) * plane] {
                *v += bv;
            }
        }
    }
}

fn check_bias(bias: Option<&Tensor>, count: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != count => Err(shape_err!("bias has {} elements, expected {count}", b.len())),
        _ => Ok(()),
    }
}

pub(crate) fn check_conv(input: Shape, weight: Shape, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<(usize, usize)> {
    if input.c != spec.in_channels {
        return Err(shape_err!("conv input has {} channels, spec expects {}", input.c, spec.in_channels));
    }
    if weight != spec.weight_shape() {
        return Err(shape_err!("conv weight {weight}, spec expects {}", spec.weight_shape()));
    }
    check_bias(bias, spec.out_channels)?;
    spec.output_hw(input.h, input.w)
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let s = input.shape();
    let (oh, ow) = check_conv(s, weight.shape(), bias, spec)?;
    let g = spec.geom();
    let k = spec.in_channels * spec.taps();
    let plane = oh * ow;
    let mut out = Tensor::zeros(Shape::new(s.n, spec.out_channels, oh, ow));
    let mut col = vec![0.0f32; k * plane];
    let out_len = spec.out_channels * plane;
    for n in 0..s.n {
        im2col(input.item_slice(n), s.c, s.h, s.w, g, oh, ow, &mut col);
        apply_weight(
            &col,
            weight.data(),
            bias.map(|b| b.data()),
            spec.out_channels,
            k,
            plane,
            &mut out.data_mut()[n * out_len..(n + 1) * out_len],
        );
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn bias_grad(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    let mut db = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let sum: f32 = grad_out.data()[start..start + plane].iter().sum();
            db.data_mut()[c] += sum;
        }
    }
    db
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let s = input.shape();
    let go = grad_out.shape();
    let (oh, ow) = (go.h, go.w);
    let g = spec.geom();
    let k = spec.in_channels * spec.taps();
    let plane = oh * ow;
    let cout = spec.out_channels;
    let mut col = vec![0.0f32; k * plane];
    let mut dx = need[0].then(|| Tensor::zeros(s));
    let mut dw = need[1].then(|| Tensor::zeros(weight.shape()));
    let in_len = s.c * s.plane();
    for n in 0..s.n {
        let gout = &grad_out.data()[n * cout * plane..(n + 1) * cout * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(input.item_slice(n), s.c, s.h, s.w, g, oh, ow, &mut col);
            gemm_nt(cout, plane, k, gout, &col, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            col.fill(0.0);
            gemm_tn(k, cout, plane, weight.data(), gout, &mut col);
            col2im(&col, s.c, s.h, s.w, g, oh, ow, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: (need[2] && has_bias).then(|| bias_grad(grad_out)),
    }
}

pub(crate) fn check_transpose(input: Shape, weight: Shape, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<(usize, usize)> {
    if input.c != spec.in_channels {
        return Err(shape_err!(
            "transposed conv input has {} channels, spec expects {}",
            input.c,
            spec.in_channels
        ));
    }
    if weight != spec.transpose_weight_shape() {
        return Err(shape_err!(
            "transposed conv weight {weight}, spec expects {}",
            spec.transpose_weight_shape()
        ));
    }
    check_bias(bias, spec.out_channels)?;
    spec.transpose_output_hw(input.h, input.w)
}

/// Transposed convolution with weight `(in, out, kh, kw)`.
pub fn transpose_conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let s = input.shape();
    let (oh, ow) = check_transpose(s, weight.shape(), bias, spec)?;
    let g = spec.geom();
    let cout = spec.out_channels;
    let kk = cout * spec.taps();
    let plane_in = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, cout, oh, ow));
    let out_len = cout * oh * ow;
    let mut col = vec![0.0f32; kk * plane_in];
    for n in 0..s.n {
        col.fill(0.0);
        gemm_tn(kk, s.c, plane_in, weight.data(), input.item_slice(n), &mut col);
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        col2im(&col, cout, oh, ow, g, s.h, s.w, dst);
        if let Some(b) = bias {
            for (c, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[c * oh * ow..(c + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn transpose_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let s = input.shape();
    let go = grad_out.shape();
    let g = spec.geom();
    let cout = spec.out_channels;
    let kk = cout * spec.taps();
    let plane_in = s.plane();
    let mut col = vec![0.0f32; kk * plane_in];
    let mut dx = need[0].then(|| Tensor::zeros(s));
    let mut dw = need[1].then(|| Tensor::zeros(weight.shape()));
    let in_len = s.c * plane_in;
    for n in 0..s.n {
        im2col(grad_out.item_slice(n), cout, go.h, go.w, g, s.h, s.w, &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm_nn(s.c, kk, plane_in, weight.data(), &col, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
        }
        if let Some(dw) = dw.as_mut() {
            gemm_nt(s.c, plane_in, kk, input.item_slice(n), &col, dw.data_mut());
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: (need[2] && has_bias).then(|| bias_grad(grad_out)),
    }
}
