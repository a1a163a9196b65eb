//! Shared helpers for the integration suites: naive `f64` oracles written
//! independently of the library kernels, and small fixtures.
#![allow(dead_code)]

use msanet::data::synthetic_scene;
use msanet::{ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(dims: [usize; 4], r: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn get(t: &Tensor, n: usize, c: usize, y: isize, x: isize) -> f64 {
    let s = t.shape();
    if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
        0.0
    } else {
        t.at(n, c, y as usize, x as usize) as f64
    }
}

/// `|a - e| <= rtol * max(|e|, 1)` for every element.
pub fn assert_close(actual: &[f32], expected: &[f64], rtol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        let err = (a as f64 - e).abs();
        assert!(err <= rtol * e.abs().max(1.0), "{what}[{i}]: got {a}, expected {e} (err {err:.3e})");
    }
}

pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, sp: &ConvSpec) -> (Vec<f64>, [usize; 4]) {
    let s = x.shape();
    let (kh, kw) = sp.kernel;
    let oh = (s.h + 2 * sp.padding.0 - sp.dilation.0 * (kh - 1) - 1) / sp.stride.0 + 1;
    let ow = (s.w + 2 * sp.padding.1 - sp.dilation.1 * (kw - 1) - 1) / sp.stride.1 + 1;
    let co = sp.out_channels;
    let mut out = Vec::with_capacity(s.n * co * oh * ow);
    for n in 0..s.n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                    for c in 0..s.c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * sp.stride.0 + i * sp.dilation.0) as isize - sp.padding.0 as isize;
                                let ix = (xo * sp.stride.1 + j * sp.dilation.1) as isize - sp.padding.1 as isize;
                                acc += w.at(o, c, i, j) as f64 * get(x, n, c, iy, ix);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (out, [s.n, co, oh, ow])
}

/// Output-centric (gather) form of the transposed convolution.
pub fn transpose_conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, sp: &ConvSpec) -> (Vec<f64>, [usize; 4]) {
    let s = x.shape();
    let (kh, kw) = sp.kernel;
    let oh = (s.h - 1) * sp.stride.0 + sp.dilation.0 * (kh - 1) + 1 - 2 * sp.padding.0;
    let ow = (s.w - 1) * sp.stride.1 + sp.dilation.1 * (kw - 1) + 1 - 2 * sp.padding.1;
    let co = sp.out_channels;
    let mut out = Vec::with_capacity(s.n * co * oh * ow);
    for n in 0..s.n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                    for c in 0..s.c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ty = y as isize + sp.padding.0 as isize - (i * sp.dilation.0) as isize;
                                let tx = xo as isize + sp.padding.1 as isize - (j * sp.dilation.1) as isize;
                                let (sy, sx) = (sp.stride.0 as isize, sp.stride.1 as isize);
                                if ty < 0 || tx < 0 || ty % sy != 0 || tx % sx != 0 {
                                    continue;
                                }
                                acc += w.at(c, o, i, j) as f64 * get(x, n, c, ty / sy, tx / sx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (out, [s.n, co, oh, ow])
}

/// Tent-kernel form: every integer neighbour within distance 1 on both axes
/// contributes `(1 - |dx|) (1 - |dy|)`.
pub fn bilinear_oracle(x: &Tensor, px: f64, py: f64, n: usize, c: usize) -> f64 {
    let mut acc = 0.0;
    for yy in (py.floor() as isize)..=(py.floor() as isize + 1) {
        for xx in (px.floor() as isize)..=(px.floor() as isize + 1) {
            let wy = 1.0 - (py - yy as f64).abs();
            let wx = 1.0 - (px - xx as f64).abs();
            if wy > 0.0 && wx > 0.0 {
                acc += wy * wx * get(x, n, c, yy, xx);
            }
        }
    }
    acc
}

/// Gather-and-sum over every tap: tap `t = i * kw + j` reads at its grid
/// position shifted by `(off[2t], off[2t + 1])` = `(dx, dy)`, scaled by `mask[t]`.
pub fn deform_oracle(x: &Tensor, off: &Tensor, mask: &Tensor, w: &Tensor, b: Option<&Tensor>, sp: &ConvSpec) -> Vec<f64> {
    let s = x.shape();
    let os = off.shape();
    let (kh, kw) = sp.kernel;
    let mut out = Vec::new();
    for n in 0..s.n {
        for o in 0..sp.out_channels {
            for y in 0..os.h {
                for xo in 0..os.w {
                    let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                    for i in 0..kh {
                        for j in 0..kw {
                            let t = i * kw + j;
                            let gy = (y * sp.stride.0 + i * sp.dilation.0) as f64 - sp.padding.0 as f64;
                            let gx = (xo * sp.stride.1 + j * sp.dilation.1) as f64 - sp.padding.1 as f64;
                            let px = gx + off.at(n, 2 * t, y, xo) as f64;
                            let py = gy + off.at(n, 2 * t + 1, y, xo) as f64;
                            let m = mask.at(n, t, y, xo) as f64;
                            for c in 0..s.c {
                                acc += w.at(o, c, i, j) as f64 * m * bilinear_oracle(x, px, py, n, c);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Writes `count` procedural RGB scenes of `h x w` as PNG files.
pub fn write_scenes(dir: &std::path::Path, count: u64, h: usize, w: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let t = synthetic_scene(3, h, w, seed + i);
        msanet::data::save_image(&t, dir.join(format!("scene_{i:02}.png"))).unwrap();
    }
}

/// Random geometry with `N, C <= 4` and `H, W <= 9` whose forward output is
/// non-empty. Returns `(x dims, spec)`.
pub fn random_geometry(r: &mut ChaCha8Rng) -> ([usize; 4], ConvSpec) {
    loop {
        let dims = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=9), r.gen_range(1..=9)];
        let k = r.gen_range(1..=3);
        let d = r.gen_range(1..=2);
        let spec = ConvSpec::new(dims[1], r.gen_range(1..=4), k)
            .stride(r.gen_range(1..=2))
            .dilation(d)
            .padding(r.gen_range(0..=d * (k - 1) / 2 + 1));
        if spec.output_hw(dims[2], dims[3]).is_ok() {
            return (dims, spec);
        }
    }
}

pub fn rand_bias(count: usize, r: &mut ChaCha8Rng) -> Option<Tensor> {
    r.gen_bool(0.7).then(|| rand_tensor([1, count, 1, 1], r))
}

/// Each runner returns the number of randomized cases it checked.
pub fn conv_cases(seed: u64, cases: usize, rtol: f64) -> usize {
    let mut r = rng(seed);
    for case in 0..cases {
        let (dims, sp) = random_geometry(&mut r);
        let x = rand_tensor(dims, &mut r);
        let w = rand_tensor(sp.weight_shape().dims(), &mut r);
        let b = rand_bias(sp.out_channels, &mut r);
        let y = msanet::ops::conv2d_forward(&x, &w, b.as_ref(), &sp).unwrap();
        let (e, odims) = conv_oracle(&x, &w, b.as_ref(), &sp);
        assert_eq!(y.shape(), odims.into(), "conv case {case} {sp:?}");
        assert_close(y.data(), &e, rtol, &format!("conv case {case} {sp:?}"));
    }
    cases
}

pub fn transpose_conv_cases(seed: u64, cases: usize, rtol: f64) -> usize {
    let mut r = rng(seed);
    let mut done = 0;
    while done < cases {
        let (dims, mut sp) = random_geometry(&mut r);
        sp.out_channels = r.gen_range(1..=4);
        if sp.transpose_output_hw(dims[2], dims[3]).is_err() {
            continue;
        }
        let x = rand_tensor(dims, &mut r);
        let w = rand_tensor(sp.transpose_weight_shape().dims(), &mut r);
        let b = rand_bias(sp.out_channels, &mut r);
        let y = msanet::ops::transpose_conv2d_forward(&x, &w, b.as_ref(), &sp).unwrap();
        let (e, odims) = transpose_conv_oracle(&x, &w, b.as_ref(), &sp);
        assert_eq!(y.shape(), odims.into(), "transpose case {done} {sp:?}");
        assert_close(y.data(), &e, rtol, &format!("transpose case {done} {sp:?}"));
        done += 1;
    }
    cases
}

pub fn linear_cases(seed: u64, cases: usize, rtol: f64) -> usize {
    let mut r = rng(seed);
    for case in 0..cases {
        let (n, cin, cout) = (r.gen_range(1..=4), r.gen_range(1..=9), r.gen_range(1..=9));
        let x = rand_tensor([n, cin, 1, 1], &mut r);
        let w = rand_tensor([cout, cin, 1, 1], &mut r);
        let b = rand_bias(cout, &mut r);
        let mut tape = msanet::Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let bv = b.clone().map(|b| tape.constant(b));
        let y = tape.linear(xv, wv, bv).unwrap();
        let mut e = Vec::new();
        for i in 0..n {
            for o in 0..cout {
                let dot: f64 = (0..cin).map(|c| w.at(o, c, 0, 0) as f64 * x.at(i, c, 0, 0) as f64).sum();
                e.push(dot + b.as_ref().map_or(0.0, |b| b.data()[o] as f64));
            }
        }
        assert_close(tape.value(y).data(), &e, rtol, &format!("linear case {case}"));
    }
    cases
}

pub fn bilinear_cases(seed: u64, cases: usize, rtol: f64) -> usize {
    let mut r = rng(seed);
    for case in 0..cases {
        let dims = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=9), r.gen_range(1..=9)];
        let x = rand_tensor(dims, &mut r);
        for _ in 0..20 {
            let px = r.gen_range(-2.0f32..dims[3] as f32 + 1.0);
            let py = r.gen_range(-2.0f32..dims[2] as f32 + 1.0);
            let (n, c) = (r.gen_range(0..dims[0]), r.gen_range(0..dims[1]));
            let got = msanet::ops::bilinear_sample(&x, px, py, n, c);
            let e = bilinear_oracle(&x, px as f64, py as f64, n, c);
            assert_close(&[got], &[e], rtol, &format!("bilinear case {case} at ({px}, {py})"));
        }
    }
    cases
}

pub fn deform_cases(seed: u64, cases: usize, rtol: f64) -> usize {
    let mut r = rng(seed);
    for case in 0..cases {
        let (dims, sp) = random_geometry(&mut r);
        let (oh, ow) = sp.output_hw(dims[2], dims[3]).unwrap();
        let taps = sp.taps();
        let x = rand_tensor(dims, &mut r);
        let off = rand_tensor([dims[0], 2 * taps, oh, ow], &mut r);
        let mask = rand_tensor([dims[0], taps, oh, ow], &mut r).map(|v| 0.5 * (v + 1.0));
        let w = rand_tensor(sp.weight_shape().dims(), &mut r);
        let b = rand_bias(sp.out_channels, &mut r);
        let y = msanet::ops::modulated_deform_conv_forward(&x, &off, &mask, &w, b.as_ref(), &sp).unwrap();
        let e = deform_oracle(&x, &off, &mask, &w, b.as_ref(), &sp);
        assert_eq!(y.shape(), [dims[0], sp.out_channels, oh, ow].into());
        assert_close(y.data(), &e, rtol, &format!("deform case {case} {sp:?}"));
    }
    cases
}
