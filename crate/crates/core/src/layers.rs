//! Parameterized layers: thin wrappers that own parameter names and a
//! geometry, registering their tensors in a [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::ConvSpec;
use crate::params::{Bindings, Init, ParamStore};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    Kaiming,
    /// Kaiming scaled by [`RESIDUAL_GAIN`]: last conv of a residual branch,
    /// so stacked blocks start close to identity, and the output head.
    Residual,
    Zeros,
}

pub const RESIDUAL_GAIN: f32 = 0.1;

fn weight_init(kind: WeightInit, fan_in: usize) -> Init {
    match kind {
        WeightInit::Kaiming => Init::KaimingUniform { fan_in },
        WeightInit::Residual => Init::ScaledKaiming { fan_in, gain: RESIDUAL_GAIN },
        WeightInit::Zeros => Init::Zeros,
    }
}

fn register_bias(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, count: usize) -> Result<String> {
    store.register(name, Shape::new(1, count, 1, 1), vec![count], Init::Zeros, rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec, init: WeightInit) -> Result<Self> {
        let ws = spec.weight_shape();
        let fan_in = spec.in_channels * spec.taps();
        let weight = store.register(&format!("{name}.weight"), ws, ws.dims().to_vec(), weight_init(init, fan_in), rng)?;
        let bias = register_bias(store, rng, &format!("{name}.bias"), spec.out_channels)?;
        Ok(Conv { weight, bias, spec })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let (w, b) = (p.get(&self.weight)?, p.get(&self.bias)?);
        tape.conv2d(x, w, Some(b), self.spec)
    }

    pub fn param_count(spec: &ConvSpec) -> usize {
        spec.out_channels * spec.in_channels * spec.taps() + spec.out_channels
    }
}

/// Transposed convolution; weight layout `(in, out, kh, kw)`.
#[derive(Clone, Debug)]
pub struct TransposeConv {
    pub weight: String,
    pub bias: String,
    pub spec: ConvSpec,
}

impl TransposeConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec) -> Result<Self> {
        let ws = spec.transpose_weight_shape();
        // each output pixel receives in_channels * taps / stride^2 contributions
        let fan_in = (spec.in_channels * spec.taps() / (spec.stride.0 * spec.stride.1)).max(1);
        let weight = store.register(
            &format!("{name}.weight"),
            ws,
            ws.dims().to_vec(),
            Init::KaimingUniform { fan_in },
            rng,
        )?;
        let bias = register_bias(store, rng, &format!("{name}.bias"), spec.out_channels)?;
        Ok(TransposeConv { weight, bias, spec })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let (w, b) = (p.get(&self.weight)?, p.get(&self.bias)?);
        tape.transpose_conv2d(x, w, Some(b), self.spec)
    }

    pub fn param_count(spec: &ConvSpec) -> usize {
        Conv::param_count(spec)
    }
}

/// Weights of a modulated deformable convolution. The sampling field is
/// supplied at call time.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub weight: String,
    pub bias: String,
    pub spec: ConvSpec,
}

impl DeformConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec) -> Result<Self> {
        let c = Conv::new(store, rng, name, spec, WeightInit::Kaiming)?;
        Ok(DeformConv {
            weight: c.weight,
            bias: c.bias,
            spec,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var, offsets: Var, mask: Var) -> Result<Var> {
        let (w, b) = (p.get(&self.weight)?, p.get(&self.bias)?);
        tape.deform_conv2d(x, offsets, mask, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            Shape::new(out_features, in_features, 1, 1),
            vec![out_features, in_features],
            Init::KaimingUniform { fan_in: in_features },
            rng,
        )?;
        let bias = register_bias(store, rng, &format!("{name}.bias"), out_features)?;
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let (w, b) = (p.get(&self.weight)?, p.get(&self.bias)?);
        tape.linear(x, w, Some(b))
    }

    pub fn param_count(in_features: usize, out_features: usize) -> usize {
        in_features * out_features + out_features
    }
}
