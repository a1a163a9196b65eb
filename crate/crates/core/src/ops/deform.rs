//! Bilinear sampling at fractional positions and modulated deformable
//! convolution built on it.
//!
//! Offset layout: for tap `j` (row-major over the kernel window) channel
//! `2j` holds the horizontal shift `dx_j` and channel `2j + 1` the vertical
//! shift `dy_j`. Mask channel `j` holds the modulation weight of tap `j`.
//! Samples that fall outside the image read zero.

use super::conv::{apply_weight, check_conv, ConvSpec, Geom};
use super::gemm::{gemm_nt, gemm_tn};
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Four bilinear neighbours of a fractional position. Out-of-range
/// neighbours carry weight zero and index zero.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Corners {
    idx: [u32; 4],
    wt: [f32; 4],
    valid: [bool; 4],
    lx: f32,
    ly: f32,
}

impl Corners {
    #[inline]
    pub fn new(h: usize, w: usize, px: f32, py: f32) -> Self {
        let x0 = px.floor();
        let y0 = py.floor();
        let lx = px - x0;
        let ly = py - y0;
        let hx = 1.0 - lx;
        let hy = 1.0 - ly;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut c = Corners {
            lx,
            ly,
            ..Default::default()
        };
        let cells = [(y0, x0, hy * hx), (y0, x0 + 1, hy * lx), (y0 + 1, x0, ly * hx), (y0 + 1, x0 + 1, ly * lx)];
        for (k, &(yy, xx, wt)) in cells.iter().enumerate() {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                c.idx[k] = (yy as usize * w + xx as usize) as u32;
                c.wt[k] = wt;
                c.valid[k] = true;
            }
        }
        c
    }

    #[inline]
    pub fn sample(&self, plane: &[f32]) -> f32 {
        let at = |k: usize| if self.valid[k] { plane[self.idx[k] as usize] } else { 0.0 };
        // nested lerps reproduce a constant neighbourhood exactly
        let top = at(0) + self.lx * (at(1) - at(0));
        let bottom = at(2) + self.lx * (at(3) - at(2));
        top + self.ly * (bottom - top)
    }

    /// Partial derivatives of the sampled value w.r.t. `(px, py)`.
    #[inline]
    pub fn position_grad(&self, plane: &[f32]) -> (f32, f32) {
        let hx = 1.0 - self.lx;
        let hy = 1.0 - self.ly;
        // d(weight)/dpx and d(weight)/dpy per corner
        let dwx = [-hy, hy, -self.ly, self.ly];
        let dwy = [-hx, -self.lx, hx, self.lx];
        let (mut gx, mut gy) = (0.0f32, 0.0f32);
        for k in 0..4 {
            if self.valid[k] {
                let p = plane[self.idx[k] as usize];
                gx += dwx[k] * p;
                gy += dwy[k] * p;
            }
        }
        (gx, gy)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f32], g: f32) {
        for k in 0..4 {
            if self.valid[k] {
                plane[self.idx[k] as usize] += self.wt[k] * g;
            }
        }
    }
}

/// Value of channel `c` of batch item `n` at horizontal position `px` and
/// vertical position `py`, interpolated bilinearly with zero padding.
pub fn bilinear_sample(x: &Tensor, px: f32, py: f32, n: usize, c: usize) -> f32 {
    let s = x.shape();
    let start = (n * s.c + c) * s.plane();
    Corners::new(s.h, s.w, px, py).sample(&x.data()[start..start + s.plane()])
}

/// Adjoint of [`bilinear_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearGrad {
    /// `(flat index into x, d value / d x[index])` for in-range neighbours.
    pub input: Vec<(usize, f32)>,
    pub dpx: f32,
    pub dpy: f32,
}

pub fn bilinear_sample_grad(x: &Tensor, px: f32, py: f32, n: usize, c: usize) -> BilinearGrad {
    let s = x.shape();
    let start = (n * s.c + c) * s.plane();
    let corners = Corners::new(s.h, s.w, px, py);
    let (dpx, dpy) = corners.position_grad(&x.data()[start..start + s.plane()]);
    let input = (0..4)
        .filter(|&k| corners.valid[k])
        .map(|k| (start + corners.idx[k] as usize, corners.wt[k]))
        .collect();
    BilinearGrad { input, dpx, dpy }
}

pub(crate) fn check_deform(
    input: Shape,
    offsets: Shape,
    mask: Shape,
    weight: Shape,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    let (oh, ow) = check_conv(input, weight, bias, spec)?;
    let k = spec.taps();
    if offsets != Shape::new(input.n, 2 * k, oh, ow) {
        return Err(shape_err!("offsets {offsets}, expected {}x{}x{oh}x{ow}", input.n, 2 * k));
    }
    if mask != Shape::new(input.n, k, oh, ow) {
        return Err(shape_err!("mask {mask}, expected {}x{k}x{oh}x{ow}", input.n));
    }
    Ok((oh, ow))
}

/// Sampling table for one batch item: `taps x plane` corner sets.
fn corner_table(item_h: usize, item_w: usize, offsets: &[f32], g: Geom, oh: usize, ow: usize) -> Vec<Corners> {
    let plane = oh * ow;
    let mut table = Vec::with_capacity(g.kh * g.kw * plane);
    for i in 0..g.kh {
        for j in 0..g.kw {
            let t = i * g.kw + j;
            let dx = &offsets[2 * t * plane..(2 * t + 1) * plane];
            let dy = &offsets[(2 * t + 1) * plane..(2 * t + 2) * plane];
            for oy in 0..oh {
                let base_y = (oy * g.sh + i * g.dh) as f32 - g.ph as f32;
                for ox in 0..ow {
                    let base_x = (ox * g.sw + j * g.dw) as f32 - g.pw as f32;
                    let pos = oy * ow + ox;
                    table.push(Corners::new(item_h, item_w, base_x + dx[pos], base_y + dy[pos]));
                }
            }
        }
    }
    table
}

fn deform_im2col(src: &[f32], channels: usize, h: usize, w: usize, table: &[Corners], mask: &[f32], taps: usize, plane: usize, col: &mut [f32]) {
    for c in 0..channels {
        let img = &src[c * h * w..(c + 1) * h * w];
        for t in 0..taps {
            let row = c * taps + t;
            let dst = &mut col[row * plane..(row + 1) * plane];
            let corners = &table[t * plane..(t + 1) * plane];
            let m = &mask[t * plane..(t + 1) * plane];
            for ((v, cs), &mv) in dst.iter_mut().zip(corners).zip(m) {
                *v = mv * cs.sample(img);
            }
        }
    }
}

pub fn modulated_deform_conv_forward(
    input: &Tensor,
    offsets: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let s = input.shape();
    let (oh, ow) = check_deform(s, offsets.shape(), mask.shape(), weight.shape(), bias, spec)?;
    let g = spec.geom();
    let taps = spec.taps();
    let plane = oh * ow;
    let k = s.c * taps;
    let cout = spec.out_channels;
    let mut out = Tensor::zeros(Shape::new(s.n, cout, oh, ow));
    let mut col = vec![0.0f32; k * plane];
    for n in 0..s.n {
        let table = corner_table(s.h, s.w, offsets.item_slice(n), g, oh, ow);
        deform_im2col(input.item_slice(n), s.c, s.h, s.w, &table, mask.item_slice(n), taps, plane, &mut col);
        apply_weight(
            &col,
            weight.data(),
            bias.map(|b| b.data()),
            cout,
            k,
            plane,
            &mut out.data_mut()[n * cout * plane..(n + 1) * cout * plane],
        );
    }
    Ok(out)
}

pub(crate) struct DeformGrads {
    pub input: Option<Tensor>,
    pub offsets: Option<Tensor>,
    pub mask: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// `need` flags: input, offsets, mask, weight, bias.
pub(crate) fn modulated_deform_conv_backward(
    input: &Tensor,
    offsets: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: [bool; 5],
) -> DeformGrads {
    let s = input.shape();
    let go = grad_out.shape();
    let (oh, ow) = (go.h, go.w);
    let g = spec.geom();
    let taps = spec.taps();
    let plane = oh * ow;
    let k = s.c * taps;
    let cout = spec.out_channels;
    let in_plane = s.plane();

    let mut dx = need[0].then(|| Tensor::zeros(s));
    let mut doff = need[1].then(|| Tensor::zeros(offsets.shape()));
    let mut dmask = need[2].then(|| Tensor::zeros(mask.shape()));
    let mut dw = need[3].then(|| Tensor::zeros(weight.shape()));
    let sampling_grads = need[0] || need[1] || need[2];

    let mut col = vec![0.0f32; k * plane];
    for n in 0..s.n {
        let gout = &grad_out.data()[n * cout * plane..(n + 1) * cout * plane];
        let src = input.item_slice(n);
        let m = mask.item_slice(n);
        let table = corner_table(s.h, s.w, offsets.item_slice(n), g, oh, ow);
        if let Some(dw) = dw.as_mut() {
            deform_im2col(src, s.c, s.h, s.w, &table, m, taps, plane, &mut col);
            gemm_nt(cout, plane, k, gout, &col, dw.data_mut());
        }
        if !sampling_grads {
            continue;
        }
        col.fill(0.0);
        gemm_tn(k, cout, plane, weight.data(), gout, &mut col);
        let dcol = &col;
        for c in 0..s.c {
            let img = &src[c * in_plane..(c + 1) * in_plane];
            for t in 0..taps {
                let row = &dcol[(c * taps + t) * plane..(c * taps + t + 1) * plane];
                let corners = &table[t * plane..(t + 1) * plane];
                let mt = &m[t * plane..(t + 1) * plane];
                if let Some(dmask) = dmask.as_mut() {
                    let dm = &mut dmask.data_mut()[(n * taps + t) * plane..(n * taps + t + 1) * plane];
                    for ((acc, &gv), cs) in dm.iter_mut().zip(row).zip(corners) {
                        *acc += gv * cs.sample(img);
                    }
                }
                if let Some(doff) = doff.as_mut() {
                    let base = (n * 2 * taps + 2 * t) * plane;
                    let (dox, doy) = doff.data_mut()[base..base + 2 * plane].split_at_mut(plane);
                    for pos in 0..plane {
                        let gm = row[pos] * mt[pos];
                        let (gx, gy) = corners[pos].position_grad(img);
                        dox[pos] += gm * gx;
                        doy[pos] += gm * gy;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let start = (n * s.c + c) * in_plane;
                    let dimg = &mut dx.data_mut()[start..start + in_plane];
                    for pos in 0..plane {
                        corners[pos].scatter(dimg, row[pos] * mt[pos]);
                    }
                }
            }
        }
    }
    DeformGrads {
        input: dx,
        offsets: doff,
        mask: dmask,
        weight: dw,
        bias: (need[4] && has_bias).then(|| super::conv::bias_grad(grad_out)),
    }
}
