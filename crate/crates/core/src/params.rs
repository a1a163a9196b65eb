//! Named learnable tensors and their gradient slots.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::LEAKY_SLOPE;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / ((1 + a^2) fan_in))` with `a` the leaky slope.
    KaimingUniform { fan_in: usize },
    /// Kaiming bound times `gain`.
    ScaledKaiming { fan_in: usize, gain: f32 },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Logical extents, e.g. `[C]` for a bias stored as `1xCx1x1`.
    pub dims: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Adds a parameter, drawing its initial values from `rng`.
    pub fn register(&mut self, name: &str, shape: Shape, dims: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> Result<String> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if dims.iter().product::<usize>() != shape.numel() {
            return Err(shape_err!("logical dims {dims:?} do not match storage {shape}"));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::KaimingUniform { fan_in } | Init::ScaledKaiming { fan_in, .. } => {
                let gain = if let Init::ScaledKaiming { gain, .. } = init { gain } else { 1.0 };
                let bound = gain * (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in.max(1) as f32)).sqrt();
                let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_vec(shape, data)?
            }
        };
        self.params.insert(
            name.to_string(),
            Param {
                grad: Tensor::zeros(shape),
                value,
                dims,
                init,
            },
        );
        Ok(name.to_string())
    }

    /// Inserts a parameter with explicit contents (used by checkpoint loading).
    pub fn insert(&mut self, name: &str, value: Tensor, dims: Vec<usize>) -> Result<()> {
        if dims.iter().product::<usize>() != value.len() {
            return Err(shape_err!("logical dims {dims:?} do not match {} values", value.len()));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad,
                dims,
                init: Init::Zeros,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds tape gradients into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.params() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter `{name}`")))?;
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Records every parameter on `tape`. Untracked bindings are constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bindings {
        let map = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if track {
                    tape.param(name.clone(), p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { map }
    }
}

/// Parameter name to tape variable map for one forward pass.
pub struct Bindings {
    map: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("parameter `{name}` is not bound")))
    }
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bindings {
            map: iter.into_iter().collect(),
        }
    }
}
