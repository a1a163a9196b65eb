//! Full network assembly: a strided residual encoder, one scale-specific
//! subnetwork per resolution and a coarse-to-fine fusion decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::{Afub, BlockKind, MergeFusion, ResidualBlock, SubnetBlock};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, WeightInit};
use crate::ops::ConvSpec;
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

/// Which blocks are active; the ablation rows of the architecture study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Encoder-decoder with skip connections and no subnetworks.
    #[serde(rename = "ED")]
    Ed,
    /// Every adaptive block replaced by a residual block.
    #[serde(rename = "ResB")]
    ResB,
    #[serde(rename = "AFeB")]
    Afeb,
    #[serde(rename = "AMB")]
    Amb,
    #[serde(rename = "AFuB")]
    Afub,
    #[serde(rename = "AFeB+AMB")]
    AfebAmb,
    #[serde(rename = "AFeB+AFuB")]
    AfebAfub,
    #[serde(rename = "AMB+AFuB")]
    AmbAfub,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Ed,
        Variant::ResB,
        Variant::Afeb,
        Variant::Amb,
        Variant::Afub,
        Variant::AfebAmb,
        Variant::AfebAfub,
        Variant::AmbAfub,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Ed => "ED",
            Variant::ResB => "ResB",
            Variant::Afeb => "AFeB",
            Variant::Amb => "AMB",
            Variant::Afub => "AFuB",
            Variant::AfebAmb => "AFeB+AMB",
            Variant::AfebAfub => "AFeB+AFuB",
            Variant::AmbAfub => "AMB+AFuB",
        }
    }

    pub fn has_subnets(self) -> bool {
        self != Variant::Ed
    }

    pub fn uses_afeb(self) -> bool {
        matches!(self, Variant::Full | Variant::Afeb | Variant::AfebAmb | Variant::AfebAfub)
    }

    pub fn uses_amb(self) -> bool {
        matches!(self, Variant::Full | Variant::Amb | Variant::AfebAmb | Variant::AmbAfub)
    }

    pub fn uses_afub(self) -> bool {
        matches!(self, Variant::Full | Variant::Afub | Variant::AfebAfub | Variant::AmbAfub)
    }

    /// Block actually built for a layout entry under this variant.
    pub fn substitute(self, kind: BlockKind) -> BlockKind {
        match kind {
            BlockKind::Afeb if !self.uses_afeb() => BlockKind::Residual,
            BlockKind::Amb if !self.uses_amb() => BlockKind::Residual,
            k => k,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Block sequences for subnetworks of the given depths, bottom (finest)
/// first. The bottom alternates AFeB and AMB, the top uses only AMB and the
/// middles start and end with AFeB, leaning towards the nearer extreme in
/// between.
pub fn subnet_layout(depths: &[usize]) -> Vec<Vec<BlockKind>> {
    let scales = depths.len();
    depths
        .iter()
        .enumerate()
        .map(|(s, &d)| {
            if s == 0 {
                (0..d).map(|i| if i % 2 == 0 { BlockKind::Afeb } else { BlockKind::Amb }).collect()
            } else if s + 1 == scales {
                vec![BlockKind::Amb; d]
            } else {
                let near_bottom = 2 * s < scales;
                (0..d)
                    .map(|i| {
                        if i == 0 || i + 1 == d || (near_bottom && i % 2 == 0) {
                            BlockKind::Afeb
                        } else {
                            BlockKind::Amb
                        }
                    })
                    .collect()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub scale_channels: Vec<usize>,
    pub subnet_specs: Vec<Vec<BlockKind>>,
    pub dilations: Vec<usize>,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            base_channels: 32,
            scale_channels: vec![32, 64, 128, 256],
            subnet_specs: subnet_layout(&[6, 5, 4, 2]),
            dilations: vec![1, 2, 3, 4],
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Width doubling from `base_channels` over `depths.len()` scales.
    pub fn with_depths(in_channels: usize, base_channels: usize, depths: &[usize]) -> Self {
        ModelConfig {
            in_channels,
            base_channels,
            scale_channels: (0..depths.len()).map(|i| base_channels << i).collect(),
            subnet_specs: subnet_layout(depths),
            ..ModelConfig::default()
        }
    }

    pub fn variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn scales(&self) -> usize {
        self.scale_channels.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales().saturating_sub(1))
    }

    pub fn effective_subnets(&self) -> Vec<Vec<BlockKind>> {
        if !self.variant.has_subnets() {
            return vec![Vec::new(); self.scales()];
        }
        self.subnet_specs
            .iter()
            .map(|seq| seq.iter().map(|&k| self.variant.substitute(k)).collect())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        let s = self.scales();
        if !(2..=5).contains(&s) {
            return Err(Error::Config(format!("scale count must be in 2..=5, got {s}")));
        }
        if self.scale_channels[0] != self.base_channels {
            return Err(Error::Config(format!(
                "scale_channels[0] = {} differs from base_channels = {}",
                self.scale_channels[0], self.base_channels
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        for w in self.scale_channels.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::Config(format!("scale_channels must double: {:?}", self.scale_channels)));
            }
        }
        if self.subnet_specs.len() != s {
            return Err(Error::Config(format!(
                "subnet_specs has {} entries for {s} scales",
                self.subnet_specs.len()
            )));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config(format!("invalid dilation set {:?}", self.dilations)));
        }
        for (seq, &c) in self.effective_subnets().iter().zip(&self.scale_channels) {
            if seq.contains(&BlockKind::Amb) && c % self.dilations.len() != 0 {
                return Err(Error::Config(format!(
                    "width {c} not divisible by {} AMB branches",
                    self.dilations.len()
                )));
            }
        }
        Ok(())
    }

    /// Learnable scalar count from the per-block closed forms.
    pub fn param_count(&self) -> usize {
        let ch = &self.scale_channels;
        let mut total = ResidualBlock::param_count(self.in_channels, ch[0], 1);
        for w in ch.windows(2) {
            total += ResidualBlock::param_count(w[0], w[1], 2);
        }
        for (seq, &c) in self.effective_subnets().iter().zip(ch) {
            total += seq
                .iter()
                .map(|&k| SubnetBlock::param_count(k, c, self.dilations.len()))
                .sum::<usize>();
        }
        // fusions at scales S-2..0 upsample; the last one stays at full resolution
        let slots = (0..ch.len() - 1).map(|s| (ch[s], true)).chain([(ch[0], false)]);
        for (c, upsample) in slots {
            total += if self.variant.uses_afub() {
                Afub::param_count(c, upsample)
            } else {
                MergeFusion::param_count(c, upsample, self.variant != Variant::Ed)
            };
        }
        let lift = Conv::param_count(&ConvSpec::new(self.in_channels, ch[0], 3));
        let head = Conv::param_count(&ConvSpec::new(ch[0], self.in_channels, 3));
        total + lift + head
    }

    /// First field where `other` differs, as `(field, self value, other value)`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(&'static str, String, String)> {
        macro_rules! cmp {
            ($f:ident) => {
                if self.$f != other.$f {
                    return Some((stringify!($f), format!("{:?}", self.$f), format!("{:?}", other.$f)));
                }
            };
        }
        cmp!(in_channels);
        cmp!(base_channels);
        cmp!(scale_channels);
        cmp!(subnet_specs);
        cmp!(dilations);
        cmp!(variant);
        None
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Adaptive(Afub),
    Merge(MergeFusion),
}

impl Fusion {
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, coarse: Var, fine: Var) -> Result<Var> {
        match self {
            Fusion::Adaptive(b) => b.forward(tape, p, coarse, fine),
            Fusion::Merge(b) => b.forward(tape, p, coarse, fine),
        }
    }

    pub fn final_conv(&self) -> &Conv {
        match self {
            Fusion::Adaptive(b) => b.final_conv(),
            Fusion::Merge(b) => match &b.post {
                Some(r) => r.final_conv(),
                None => &b.merge,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Vec<ResidualBlock>,
    pub subnets: Vec<Vec<SubnetBlock>>,
    /// Coarsest fusion first; the last entry works at full resolution.
    pub decoder: Vec<Fusion>,
    /// Lifts the noisy input to the base width for the last fusion.
    pub lift: Conv,
    pub head: Conv,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = config.scale_channels.clone();

        let mut encoder = Vec::with_capacity(ch.len());
        encoder.push(ResidualBlock::new(&mut store, &mut rng, "enc0", config.in_channels, ch[0], 1)?);
        for i in 1..ch.len() {
            encoder.push(ResidualBlock::new(&mut store, &mut rng, &format!("enc{i}"), ch[i - 1], ch[i], 2)?);
        }

        let mut subnets = Vec::with_capacity(ch.len());
        for (s, seq) in config.effective_subnets().iter().enumerate() {
            let blocks = seq
                .iter()
                .enumerate()
                .map(|(j, &k)| SubnetBlock::new(&mut store, &mut rng, &format!("sub{s}.{j}"), k, ch[s], &config.dilations))
                .collect::<Result<Vec<_>>>()?;
            subnets.push(blocks);
        }

        let lift = Conv::new(&mut store, &mut rng, "lift", ConvSpec::new(config.in_channels, ch[0], 3), WeightInit::Kaiming)?;

        let mut decoder = Vec::with_capacity(ch.len());
        // scales S-2 .. 0 upsample, then one full-resolution fusion with the input
        let slots: Vec<(usize, bool)> = (0..ch.len() - 1).rev().map(|s| (s, true)).chain([(0, false)]).collect();
        for (i, &(s, upsample)) in slots.iter().enumerate() {
            let name = format!("dec{i}");
            decoder.push(if config.variant.uses_afub() {
                Fusion::Adaptive(Afub::new(&mut store, &mut rng, &name, ch[s], upsample)?)
            } else {
                Fusion::Merge(MergeFusion::new(
                    &mut store,
                    &mut rng,
                    &name,
                    ch[s],
                    upsample,
                    config.variant != Variant::Ed,
                )?)
            });
        }

        let head = Conv::new(&mut store, &mut rng, "head", ConvSpec::new(ch[0], config.in_channels, 3), WeightInit::Residual)?;

        Ok(Model {
            config,
            params: store,
            encoder,
            subnets,
            decoder,
            lift,
            head,
        })
    }

    /// Topology from `config` carrying the given parameter values.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Model::build(config, 0)?;
        let expected: Vec<&str> = m.params.names().collect();
        let found: Vec<&str> = params.names().collect();
        if expected != found {
            return Err(Error::Contract("parameter set does not match the configured architecture".into()));
        }
        for ((_, a), (_, b)) in m.params.iter().zip(params.iter()) {
            if a.value.shape() != b.value.shape() {
                return Err(shape_err!("parameter shape {} differs from architecture {}", b.value.shape(), a.value.shape()));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.c != self.config.in_channels {
            return Err(shape_err!("model expects {} input channels, got {}", self.config.in_channels, s.c));
        }
        let m = self.config.size_multiple();
        if s.h == 0 || s.w == 0 || s.h % m != 0 || s.w % m != 0 {
            return Err(shape_err!("input extent {}x{} must be a positive multiple of {m}", s.h, s.w));
        }
        Ok(())
    }

    /// Encoder features, finest first.
    pub fn encode(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Vec<Var>> {
        self.check_input(tape, x)?;
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut f = x;
        for block in &self.encoder {
            f = block.forward(tape, p, f)?;
            feats.push(f);
        }
        Ok(feats)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let feats = self.encode(tape, p, x)?;
        let mut refined = Vec::with_capacity(feats.len());
        for (f, blocks) in feats.into_iter().zip(&self.subnets) {
            let mut h = f;
            for b in blocks {
                h = b.forward(tape, p, h)?;
            }
            refined.push(h);
        }
        let scales = refined.len();
        let mut d = refined[scales - 1];
        for (i, fusion) in self.decoder.iter().enumerate() {
            let fine = if i + 1 < self.decoder.len() {
                refined[scales - 2 - i]
            } else {
                self.lift.forward(tape, p, x)?
            };
            d = fusion.forward(tape, p, d, fine)?;
        }
        self.head.forward(tape, p, d)
    }

    /// Untracked forward pass on a tensor value.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xi = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xi)?;
        Ok(tape.value(y).clone())
    }

    /// Final convolution of every skip-connected block plus the output head.
    pub fn final_convs(&self) -> Vec<&Conv> {
        let mut v: Vec<&Conv> = self.encoder.iter().map(|b| b.final_conv()).collect();
        v.extend(self.subnets.iter().flatten().map(|b| b.final_conv()));
        v.extend(self.decoder.iter().map(|f| f.final_conv()));
        v.push(&self.head);
        v
    }
}

/// Anything that maps a noisy image to an estimate of the clean one.
pub trait Denoiser {
    fn denoise(&self, noisy: &Tensor) -> Result<Tensor>;

    /// Required spatial multiple of the input (1 when unconstrained).
    fn size_multiple(&self) -> usize {
        1
    }

    fn in_channels(&self) -> Option<usize> {
        None
    }
}

impl Denoiser for Model {
    fn denoise(&self, noisy: &Tensor) -> Result<Tensor> {
        self.infer(noisy)
    }

    fn size_multiple(&self) -> usize {
        self.config.size_multiple()
    }

    fn in_channels(&self) -> Option<usize> {
        Some(self.config.in_channels)
    }
}

/// Returns its input unchanged; gives the noise-floor reference.
#[derive(Clone, Copy, Debug, Default)]
pub struct Passthrough;

impl Denoiser for Passthrough {
    fn denoise(&self, noisy: &Tensor) -> Result<Tensor> {
        Ok(noisy.clone())
    }
}

/// Reflect-pads to the denoiser's size multiple, denoises and crops back.
pub fn denoise_padded(d: &dyn Denoiser, noisy: &Tensor) -> Result<Tensor> {
    let s = noisy.shape();
    if let Some(c) = d.in_channels() {
        if c != s.c {
            return Err(Error::Config(format!(
                "denoiser expects {c}-channel images, input has {} channels",
                s.c
            )));
        }
    }
    let m = d.size_multiple();
    let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    if (ph, pw) == (s.h, s.w) {
        return d.denoise(noisy);
    }
    let padded = crate::data::reflect_pad(noisy, ph, pw)?;
    let out = d.denoise(&padded)?;
    crate::data::crop(&out, s.h, s.w)
}
