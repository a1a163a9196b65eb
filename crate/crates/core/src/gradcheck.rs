//! Central finite-difference verification of tape gradients.
//!
//! The scalar under test is `sum(r * f(inputs))` for a fixed random
//! projection `r`. Analytic gradients come from the single-precision
//! backward pass. Numeric derivatives replay the same graph in double
//! precision ([`Tape::replay_f64`]) at `x +- eps` and are compared with
//! `|a - n| / max(|a|, |n|, 1e-6)`. Elements whose
//! one-sided slopes disagree (a kink between `x - eps` and `x + eps`) are
//! skipped and counted.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::blocks::{Afeb, Afub, Amb, MergeFusion, ResidualBlock};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::reference::Array;
use crate::ops::{ConvSpec, LEAKY_SLOPE};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-3;
/// Step for blocks and whole models, small enough that no leaky-relu or
/// bilinear kink falls inside the stencil.
pub const COMPOSITE_EPS: f64 = 1e-5;
pub const RTOL: f64 = 1e-2;
pub const RTOL_POINTWISE: f64 = 1e-3;
const DENOM_FLOOR: f64 = 1e-6;

/// Operators with a registered check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpId {
    Add,
    Sub,
    Mul,
    MulPerChannel,
    MulPerPosition,
    Scale,
    Concat,
    Slice,
    Conv2d,
    Conv2dStrided,
    Conv2dDilated,
    TransposeConv2d,
    DeformConv,
    LeakyRelu,
    Sigmoid,
    GlobalAvgPool,
    ChannelMean,
    Linear,
    Sum,
    LossL1,
    LossL2,
}

impl OpId {
    pub const ALL: [OpId; 21] = [
        OpId::Add,
        OpId::Sub,
        OpId::Mul,
        OpId::MulPerChannel,
        OpId::MulPerPosition,
        OpId::Scale,
        OpId::Concat,
        OpId::Slice,
        OpId::Conv2d,
        OpId::Conv2dStrided,
        OpId::Conv2dDilated,
        OpId::TransposeConv2d,
        OpId::DeformConv,
        OpId::LeakyRelu,
        OpId::Sigmoid,
        OpId::GlobalAvgPool,
        OpId::ChannelMean,
        OpId::Linear,
        OpId::Sum,
        OpId::LossL1,
        OpId::LossL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpId::Add => "add",
            OpId::Sub => "sub",
            OpId::Mul => "mul",
            OpId::MulPerChannel => "mul_per_channel",
            OpId::MulPerPosition => "mul_per_position",
            OpId::Scale => "scale",
            OpId::Concat => "concat_channels",
            OpId::Slice => "slice_channels",
            OpId::Conv2d => "conv2d",
            OpId::Conv2dStrided => "conv2d_strided",
            OpId::Conv2dDilated => "conv2d_dilated",
            OpId::TransposeConv2d => "transpose_conv2d",
            OpId::DeformConv => "modulated_deform_conv",
            OpId::LeakyRelu => "leaky_relu",
            OpId::Sigmoid => "sigmoid",
            OpId::GlobalAvgPool => "global_avg_pool",
            OpId::ChannelMean => "channel_mean",
            OpId::Linear => "linear",
            OpId::Sum => "sum",
            OpId::LossL1 => "loss_l1",
            OpId::LossL2 => "loss_l2",
        }
    }

    pub fn is_pointwise(self) -> bool {
        matches!(
            self,
            OpId::Add | OpId::Sub | OpId::Mul | OpId::Scale | OpId::LeakyRelu | OpId::Sigmoid
        )
    }

    pub fn tolerance(self) -> f64 {
        if self.is_pointwise() {
            RTOL_POINTWISE
        } else {
            RTOL
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpId::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown op id `{s}`")))
    }
}

/// Where the worst disagreement occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub target: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Elements dropped because a kink lies inside the difference stencil.
    pub skipped: usize,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    /// Within tolerance and with at most a tenth of elements skipped.
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.checked > 0 && self.skipped * 10 <= self.checked + self.skipped
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max rel err {:.3e} (tol {:.0e}, {} checked, {} skipped) {}",
            self.target,
            self.max_rel_err,
            self.tolerance,
            self.checked,
            self.skipped,
            if self.passed() { "ok" } else { "FAIL" }
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(f, " [{}[{}]: analytic {:.6e}, numeric {:.6e}]", w.input, w.index, w.analytic, w.numeric)?;
        }
        Ok(())
    }
}

/// A named differentiable input and the elements to probe.
pub struct Probe {
    pub name: String,
    pub value: Tensor,
    /// `None` probes every element.
    pub indices: Option<Vec<usize>>,
}

impl Probe {
    pub fn all(name: impl Into<String>, value: Tensor) -> Self {
        Probe {
            name: name.into(),
            value,
            indices: None,
        }
    }

    /// At most `limit` distinct elements chosen with `rng`.
    pub fn sampled(name: impl Into<String>, value: Tensor, limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = value.len();
        let indices = if n <= limit { None } else { Some(sample(rng, n, limit).into_vec()) };
        Probe {
            name: name.into(),
            value,
            indices,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: DEFAULT_EPS,
            tolerance: RTOL,
            seed: 0,
        }
    }
}

/// Checks `f` against central differences on every probe. `f` is called
/// twice and must record the same graph whatever the input values are.
pub fn check_fn<F>(target: &str, probes: &[Probe], f: F, opts: CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {}", opts.eps)));
    }
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = probes.iter().map(|p| tape.input(p.value.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let r64: Vec<f64> = (0..shape.numel()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let r = Tensor::from_vec(shape, r64.iter().map(|&v| v as f32).collect())?;
    let r64: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
    let rv = tape.constant(r);
    let weighted = tape.mul(out, rv)?;
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(probes)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();

    // numeric side: the same graph replayed in f64, perturbed exactly
    let mut oracle = Tape::new();
    let ovars: Vec<Var> = probes.iter().map(|p| oracle.constant(p.value.clone())).collect();
    let oout = f(&mut oracle, &ovars)?;
    let mut values: Vec<(Var, Array)> = ovars.iter().zip(probes).map(|(&v, p)| (v, Array::from(&p.value))).collect();
    let eval = |values: &[(Var, Array)]| -> Result<f64> {
        let o = oracle.replay_f64(values, oout)?;
        Ok(o.data.iter().zip(&r64).map(|(a, b)| a * b).sum())
    };
    let base = eval(&values)?;
    let mut report = GradCheckReport {
        target: target.to_string(),
        max_rel_err: 0.0,
        tolerance: opts.tolerance,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (k, p) in probes.iter().enumerate() {
        let all: Vec<usize>;
        let idx = match &p.indices {
            Some(v) => v.as_slice(),
            None => {
                all = (0..p.value.len()).collect();
                &all
            }
        };
        for &i in idx {
            let x0 = values[k].1.data[i];
            let (xp, xm) = (x0 + opts.eps, x0 - opts.eps);
            values[k].1.data[i] = xp;
            let fp = eval(&values)?;
            values[k].1.data[i] = xm;
            let fm = eval(&values)?;
            values[k].1.data[i] = x0;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[k].data()[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > opts.tolerance {
                let up = (fp - base) / opts.eps;
                let down = (base - fm) / opts.eps;
                let kink = (up - down).abs() / up.abs().max(down.abs()).max(DENOM_FLOOR);
                if kink > 2.0 * opts.tolerance {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(Worst {
                    input: p.name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn uniform(shape: impl Into<Shape>, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng.gen())
}

/// Uniform in `[-2, 2]` with every element at least `gap` from zero.
fn away_from_zero(shape: impl Into<Shape>, gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -2.0, 2.0, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Offsets whose fractional parts stay clear of the integer kinks of
/// bilinear interpolation.
fn fractional_offsets(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let data = (0..shape.numel())
        .map(|_| {
            let whole = rng.gen_range(-1i32..=1) as f32;
            whole + rng.gen_range(0.1f32..0.9)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// Runs the registered check for one operator on `1x4x8x8`-scale inputs.
pub fn grad_check(op: OpId, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_shape = Shape::new(1, 4, 8, 8);
    let gap = (10.0 * eps) as f32;
    let opts = CheckOptions {
        eps,
        tolerance: op.tolerance(),
        seed,
    };
    let name = op.name();
    let bias = |c: usize, rng: &mut ChaCha8Rng| uniform([1, c, 1, 1], -0.5, 0.5, rng);
    let conv_case = |spec: ConvSpec, rng: &mut ChaCha8Rng| -> Result<GradCheckReport> {
        let probes = [
            Probe::all("x", uniform(x_shape, -2.0, 2.0, rng)),
            Probe::all("w", uniform(spec.weight_shape(), -0.5, 0.5, rng)),
            Probe::all("b", uniform([1, spec.out_channels, 1, 1], -0.5, 0.5, rng)),
        ];
        check_fn(name, &probes, |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec), opts)
    };
    match op {
        OpId::Add | OpId::Sub | OpId::Mul => {
            let probes = [
                Probe::all("a", uniform(x_shape, -2.0, 2.0, &mut rng)),
                Probe::all("b", uniform(x_shape, -2.0, 2.0, &mut rng)),
            ];
            check_fn(
                name,
                &probes,
                |t, v| match op {
                    OpId::Add => t.add(v[0], v[1]),
                    OpId::Sub => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                },
                opts,
            )
        }
        OpId::MulPerChannel | OpId::MulPerPosition => {
            let factor = if op == OpId::MulPerChannel { Shape::new(1, 4, 1, 1) } else { Shape::new(1, 1, 8, 8) };
            let probes = [
                Probe::all("x", uniform(x_shape, -2.0, 2.0, &mut rng)),
                Probe::all("factor", uniform(factor, 0.0, 2.0, &mut rng)),
            ];
            check_fn(name, &probes, |t, v| t.mul(v[0], v[1]), opts)
        }
        OpId::Scale => {
            let probes = [Probe::all("x", uniform(x_shape, -2.0, 2.0, &mut rng))];
            check_fn(name, &probes, |t, v| Ok(t.scale(v[0], 2.0)), opts)
        }
        OpId::Concat => {
            let probes = [
                Probe::all("a", uniform([1, 2, 8, 8], -2.0, 2.0, &mut rng)),
                Probe::all("b", uniform([1, 3, 8, 8], -2.0, 2.0, &mut rng)),
            ];
            check_fn(name, &probes, |t, v| t.concat_channels(&[v[0], v[1]]), opts)
        }
        OpId::Slice => {
            let probes = [Probe::all("x", uniform(x_shape, -2.0, 2.0, &mut rng))];
            check_fn(name, &probes, |t, v| t.slice_channels(v[0], 1, 2), opts)
        }
        OpId::Conv2d => conv_case(ConvSpec::new(4, 4, 3), &mut rng),
        OpId::Conv2dStrided => conv_case(ConvSpec::new(4, 4, 3).stride(2), &mut rng),
        OpId::Conv2dDilated => conv_case(ConvSpec::new(4, 4, 3).dilation(2).padding(2), &mut rng),
        OpId::TransposeConv2d => {
            let spec = crate::blocks::upsample_spec(8, 4);
            let probes = [
                Probe::all("x", uniform([1, 8, 4, 4], -2.0, 2.0, &mut rng)),
                Probe::all("w", uniform(spec.transpose_weight_shape(), -0.5, 0.5, &mut rng)),
                Probe::all("b", bias(4, &mut rng)),
            ];
            check_fn(name, &probes, |t, v| t.transpose_conv2d(v[0], v[1], Some(v[2]), spec), opts)
        }
        OpId::DeformConv => {
            let spec = ConvSpec::new(4, 4, 3);
            let probes = [
                Probe::all("x", uniform(x_shape, -2.0, 2.0, &mut rng)),
                Probe::all("offsets", fractional_offsets([1, 18, 8, 8], &mut rng)),
                Probe::all("mask", uniform([1, 9, 8, 8], 0.05, 0.95, &mut rng)),
                Probe::all("w", uniform(spec.weight_shape(), -0.5, 0.5, &mut rng)),
                Probe::all("b", bias(4, &mut rng)),
            ];
            check_fn(name, &probes, |t, v| t.deform_conv2d(v[0], v[1], v[2], v[3], Some(v[4]), spec), opts)
        }
        OpId::LeakyRelu => {
            let probes = [Probe::all("x", away_from_zero(x_shape, gap, &mut rng))];
            check_fn(name, &probes, |t, v| Ok(t.leaky_relu(v[0], LEAKY_SLOPE)), opts)
        }
        OpId::Sigmoid => {
            let probes = [Probe::all("x", uniform(x_shape, -2.0, 2.0, &mut rng))];
            check_fn(name, &probes, |t, v| Ok(t.sigmoid(v[0])), opts)
        }
        OpId::GlobalAvgPool | OpId::ChannelMean | OpId::Sum => {
            let probes = [Probe::all("x", uniform(x_shape, -2.0, 2.0, &mut rng))];
            check_fn(
                name,
                &probes,
                |t, v| match op {
                    OpId::GlobalAvgPool => t.global_avg_pool(v[0]),
                    OpId::ChannelMean => t.channel_mean(v[0]),
                    _ => Ok(t.sum(v[0])),
                },
                opts,
            )
        }
        OpId::Linear => {
            let probes = [
                Probe::all("x", uniform([2, 4, 1, 1], -2.0, 2.0, &mut rng)),
                Probe::all("w", uniform([3, 4, 1, 1], -0.5, 0.5, &mut rng)),
                Probe::all("b", bias(3, &mut rng)),
            ];
            check_fn(name, &probes, |t, v| t.linear(v[0], v[1], Some(v[2])), opts)
        }
        OpId::LossL1 | OpId::LossL2 => {
            let target = uniform(x_shape, -2.0, 2.0, &mut rng);
            let residual = away_from_zero(x_shape, gap, &mut rng).map(|v| 0.5 * v);
            let mut pred = target.clone();
            pred.add_assign(&residual)?;
            let p = if op == OpId::LossL1 { 1 } else { 2 };
            let probes = [Probe::all("target", target), Probe::all("pred", pred)];
            check_fn(name, &probes, |t, v| t.loss_lp(v[0], v[1], p), opts)
        }
    }
}

/// Every registered operator check.
pub fn check_all_ops(seed: u64, eps: f64) -> Result<Vec<GradCheckReport>> {
    OpId::ALL.iter().map(|&op| grad_check(op, seed, eps)).collect()
}

/// Replaces every parameter with small random values so no block sits at a
/// degenerate point.
fn randomize(store: &mut ParamStore, scale: f32, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    settle_fields(store, rng);
}

/// Zero-initialized sampling fields put every tap exactly on the integer
/// grid, where bilinear sampling has kinks. Small weights plus biases with a
/// fractional part in [0.2, 0.8] keep sample positions well inside cells.
fn settle_fields(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        if name.ends_with(".field.weight") {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.01..0.01);
            }
        } else if name.ends_with(".field.bias") {
            for v in p.value.data_mut() {
                let m: f32 = rng.gen_range(0.2..0.8);
                *v = if rng.gen() { m } else { -m };
            }
        }
    }
}

fn store_probes(store: &ParamStore, limit: usize, rng: &mut ChaCha8Rng) -> Vec<Probe> {
    store
        .iter()
        .map(|(n, p)| Probe::sampled(n, p.value.clone(), limit, rng))
        .collect()
}

fn bind_probes(store: &ParamStore, vars: &[Var]) -> Bindings {
    store.names().map(str::to_string).zip(vars.iter().copied()).collect()
}

/// Checks a block given as `(store, inputs, forward)`.
fn check_block<F>(
    target: &str,
    mut store: ParamStore,
    inputs: Vec<Tensor>,
    forward: F,
    opts: CheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings, &[Var]) -> Result<Var>,
{
    randomize(&mut store, 0.3, rng);
    let n_in = inputs.len();
    let mut probes: Vec<Probe> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| Probe::sampled(format!("input{i}"), t, 64, rng))
        .collect();
    probes.extend(store_probes(&store, 24, rng));
    check_fn(
        target,
        &probes,
        |t, v| {
            let b = bind_probes(&store, &v[n_in..]);
            forward(t, &b, &v[..n_in])
        },
        opts,
    )
}

/// Residual, AFeB, AMB, AFuB and merge-fusion blocks on `1x4x8x8` inputs.
pub fn check_blocks(seed: u64, eps: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOptions {
        eps,
        tolerance: RTOL,
        seed,
    };
    let c = 4;
    let fine = |rng: &mut ChaCha8Rng| uniform([1, c, 8, 8], -1.0, 1.0, rng);
    let coarse = |rng: &mut ChaCha8Rng| uniform([1, 2 * c, 4, 4], -1.0, 1.0, rng);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let b = ResidualBlock::new(&mut s, &mut rng, "res", c, c, 1)?;
    let x = fine(&mut rng);
    out.push(check_block("residual_block", s, vec![x], |t, p, v| b.forward(t, p, v[0]), opts, &mut rng)?);

    let mut s = ParamStore::new();
    let b = ResidualBlock::new(&mut s, &mut rng, "res", c, 2 * c, 2)?;
    let x = fine(&mut rng);
    out.push(check_block("residual_block_stride2", s, vec![x], |t, p, v| b.forward(t, p, v[0]), opts, &mut rng)?);

    let mut s = ParamStore::new();
    let b = Afeb::new(&mut s, &mut rng, "afeb", c)?;
    let x = fine(&mut rng);
    out.push(check_block("afeb", s, vec![x], |t, p, v| b.forward(t, p, v[0]), opts, &mut rng)?);

    let mut s = ParamStore::new();
    let b = Amb::new(&mut s, &mut rng, "amb", c, &[1, 2, 3, 4])?;
    let x = fine(&mut rng);
    out.push(check_block("amb", s, vec![x], |t, p, v| b.forward(t, p, v[0]), opts, &mut rng)?);

    let mut s = ParamStore::new();
    let b = Afub::new(&mut s, &mut rng, "afub", c, true)?;
    let xs = vec![coarse(&mut rng), fine(&mut rng)];
    out.push(check_block("afub_upsample", s, xs, |t, p, v| b.forward(t, p, v[0], v[1]), opts, &mut rng)?);

    let mut s = ParamStore::new();
    let b = Afub::new(&mut s, &mut rng, "afub", c, false)?;
    let xs = vec![fine(&mut rng), fine(&mut rng)];
    out.push(check_block("afub", s, xs, |t, p, v| b.forward(t, p, v[0], v[1]), opts, &mut rng)?);

    let mut s = ParamStore::new();
    let b = MergeFusion::new(&mut s, &mut rng, "merge", c, true, true)?;
    let xs = vec![coarse(&mut rng), fine(&mut rng)];
    out.push(check_block("merge_fusion", s, xs, |t, p, v| b.forward(t, p, v[0], v[1]), opts, &mut rng)?);

    Ok(out)
}

/// End-to-end check of `count` randomly chosen parameter scalars of a model
/// built from `config` on a random input of `input` shape.
pub fn check_model(config: ModelConfig, input: Shape, count: usize, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(config, seed)?;
    settle_fields(&mut model.params, &mut rng);
    let total = model.count_params();
    let picks = sample(&mut rng, total, count.min(total)).into_vec();
    // map flat indices to (tensor, element)
    let mut starts = Vec::new();
    let mut acc = 0;
    for (_, p) in model.params.iter() {
        starts.push(acc);
        acc += p.value.len();
    }
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); starts.len()];
    for flat in picks {
        let k = starts.partition_point(|&s| s <= flat) - 1;
        chosen[k].push(flat - starts[k]);
    }
    let x = uniform(input, 0.0, 1.0, &mut rng);
    let mut probes = vec![Probe {
        name: "input".into(),
        value: x,
        indices: Some(Vec::new()),
    }];
    for ((name, p), idx) in model.params.iter().zip(chosen) {
        probes.push(Probe {
            name: name.to_string(),
            value: p.value.clone(),
            indices: Some(idx),
        });
    }
    let opts = CheckOptions {
        eps,
        tolerance: RTOL,
        seed,
    };
    let params = &model.params;
    check_fn(
        "model",
        &probes,
        |t, v| {
            let b = bind_probes(params, &v[1..]);
            model.forward(t, &b, v[0])
        },
        opts,
    )
}

/// The default-width model on `1x3x16x16`.
pub fn check_default_model(seed: u64, eps: f64) -> Result<GradCheckReport> {
    check_model(ModelConfig::default(), Shape::new(1, 3, 16, 16), 20, seed, eps)
}
