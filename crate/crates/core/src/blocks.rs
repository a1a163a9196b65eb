//! The network's building blocks: the encoder residual block, the adaptive
//! feature block (AFeB), the adaptive multi-scale block (AMB), the adaptive
//! fusion block (AFuB) and the plain upsample-concat-merge fusion used by
//! the ablation variants.
//!
//! Every block ends in a skip connection, so zeroing its final convolution
//! turns it into the identity on the skip input.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv, DeformConv, Linear, TransposeConv, WeightInit};
use crate::ops::{ConvSpec, LEAKY_SLOPE};
use crate::params::{Bindings, ParamStore};

/// Deformable taps per output position (3x3 window).
pub const DEFORM_TAPS: usize = 9;
/// Kernel of the AMB spatial-attention convolution.
pub const SPATIAL_KERNEL: usize = 3;

/// Block kinds that can appear in a scale-specific subnetwork.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "ResB")]
    Residual,
    #[serde(rename = "AFeB")]
    Afeb,
    #[serde(rename = "AMB")]
    Amb,
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::Residual => "ResB",
            BlockKind::Afeb => "AFeB",
            BlockKind::Amb => "AMB",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("residual block stride must be 1 or 2, got {stride}")));
        }
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), ConvSpec::new(c_in, c_out, 3).stride(stride), WeightInit::Kaiming)?;
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), ConvSpec::new(c_out, c_out, 3), WeightInit::Residual)?;
        let skip = if stride == 1 && c_in == c_out {
            None
        } else {
            Some(Conv::new(
                store,
                rng,
                &format!("{name}.skip"),
                ConvSpec::new(c_in, c_out, 1).stride(stride),
                WeightInit::Kaiming,
            )?)
        };
        Ok(ResidualBlock { conv1, conv2, skip })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, f: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, f)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, p, f)?,
            None => f,
        };
        tape.add(h, skip)
    }

    /// Name of the convolution whose zeroing leaves only the skip path.
    pub fn final_conv(&self) -> &Conv {
        &self.conv2
    }

    pub fn param_count(c_in: usize, c_out: usize, stride: usize) -> usize {
        let main = 9 * c_in * c_out + c_out + 9 * c_out * c_out + c_out;
        let skip = if stride == 1 && c_in == c_out { 0 } else { c_in * c_out + c_out };
        main + skip
    }
}

/// Splits a `3K`-channel field prediction into offsets and a sigmoid mask.
fn split_field(tape: &mut Tape, raw: Var) -> Result<(Var, Var)> {
    let offsets = tape.slice_channels(raw, 0, 2 * DEFORM_TAPS)?;
    let logits = tape.slice_channels(raw, 2 * DEFORM_TAPS, DEFORM_TAPS)?;
    Ok((offsets, tape.sigmoid(logits)))
}

/// Adaptive feature block: predicts a sampling field from its input, samples
/// the input deformably, then refines with a residual convolution.
#[derive(Clone, Debug)]
pub struct Afeb {
    pub field: Conv,
    pub deform: DeformConv,
    pub out: Conv,
    pub channels: usize,
}

impl Afeb {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        let field = Conv::new(
            store,
            rng,
            &format!("{name}.field"),
            ConvSpec::new(channels, 3 * DEFORM_TAPS, 3),
            WeightInit::Zeros,
        )?;
        let deform = DeformConv::new(store, rng, &format!("{name}.deform"), ConvSpec::new(channels, channels, 3))?;
        let out = Conv::new(store, rng, &format!("{name}.out"), ConvSpec::new(channels, channels, 3), WeightInit::Residual)?;
        Ok(Afeb {
            field,
            deform,
            out,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, f: Var) -> Result<Var> {
        let c = tape.shape(f).c;
        if c != self.channels {
            return Err(shape_err!("AFeB expects {} channels, got {c}", self.channels));
        }
        let raw = self.field.forward(tape, p, f)?;
        let (offsets, mask) = split_field(tape, raw)?;
        let sampled = self.deform.forward(tape, p, f, offsets, mask)?;
        let h = tape.leaky_relu(sampled, LEAKY_SLOPE);
        let h = self.out.forward(tape, p, h)?;
        tape.add(f, h)
    }

    pub fn final_conv(&self) -> &Conv {
        &self.out
    }

    pub fn param_count(c: usize) -> usize {
        let k = DEFORM_TAPS;
        (3 * k * c * 9 + 3 * k) + 2 * (9 * c * c + c)
    }
}

/// Intermediate values of an AMB forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AmbTrace {
    pub output: Var,
    /// `(N, C, 1, 1)` factors in `(0, 2)`
    pub channel_factor: Var,
    /// `(N, 1, H, W)` factors in `(0, 2)`
    pub spatial_factor: Var,
}

/// Adaptive multi-scale block: parallel dilated convolutions whose outputs
/// are concatenated, rescaled per channel and then per position.
#[derive(Clone, Debug)]
pub struct Amb {
    pub branches: Vec<Conv>,
    pub fc: Linear,
    pub spatial: Conv,
    pub out: Conv,
    pub channels: usize,
    pub dilations: Vec<usize>,
}

impl Amb {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, dilations: &[usize]) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::Config("AMB needs at least one dilation".into()));
        }
        if dilations.contains(&0) {
            return Err(Error::Config("AMB dilations must be positive".into()));
        }
        if channels % dilations.len() != 0 {
            return Err(Error::Config(format!(
                "AMB width {channels} is not divisible by {} dilation branches",
                dilations.len()
            )));
        }
        let part = channels / dilations.len();
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.branch{i}"),
                    ConvSpec::new(channels, part, 3).dilation(d).padding(d),
                    WeightInit::Kaiming,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fc = Linear::new(store, rng, &format!("{name}.fc"), channels, channels)?;
        let spatial = Conv::new(
            store,
            rng,
            &format!("{name}.spatial"),
            ConvSpec::new(1, 1, SPATIAL_KERNEL),
            WeightInit::Kaiming,
        )?;
        let out = Conv::new(store, rng, &format!("{name}.out"), ConvSpec::new(channels, channels, 3), WeightInit::Residual)?;
        Ok(Amb {
            branches,
            fc,
            spatial,
            out,
            channels,
            dilations: dilations.to_vec(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, f: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, f)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &Bindings, f: Var) -> Result<AmbTrace> {
        let c = tape.shape(f).c;
        if c != self.channels {
            return Err(shape_err!("AMB expects {} channels, got {c}", self.channels));
        }
        let parts = self
            .branches
            .iter()
            .map(|b| b.forward(tape, p, f))
            .collect::<Result<Vec<_>>>()?;
        let multi = tape.concat_channels(&parts)?;

        let pooled = tape.global_avg_pool(multi)?;
        let ch = self.fc.forward(tape, p, pooled)?;
        let ch = tape.sigmoid(ch);
        let channel_factor = tape.scale(ch, 2.0);
        let multi = tape.mul(multi, channel_factor)?;

        let avg = tape.channel_mean(multi)?;
        let sp = self.spatial.forward(tape, p, avg)?;
        let sp = tape.sigmoid(sp);
        let spatial_factor = tape.scale(sp, 2.0);
        let multi = tape.mul(multi, spatial_factor)?;

        let h = tape.leaky_relu(multi, LEAKY_SLOPE);
        let h = self.out.forward(tape, p, h)?;
        Ok(AmbTrace {
            output: tape.add(f, h)?,
            channel_factor,
            spatial_factor,
        })
    }

    pub fn final_conv(&self) -> &Conv {
        &self.out
    }

    pub fn param_count(c: usize, branches: usize) -> usize {
        let part = c / branches;
        let branch = branches * (9 * c * part + part);
        let spatial = SPATIAL_KERNEL * SPATIAL_KERNEL + 1;
        branch + Linear::param_count(c, c) + spatial + 9 * c * c + c
    }
}

/// Intermediate values of an AFuB forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AfubTrace {
    pub output: Var,
    /// Upsampled (or passed-through) coarse features.
    pub coarse: Var,
    /// Coarse features after receiving the sampled fine details.
    pub fused: Var,
}

/// Adaptive fusion block: upsamples coarse features, samples fine features
/// deformably under guidance from both, adds them in and refines.
#[derive(Clone, Debug)]
pub struct Afub {
    pub up: Option<TransposeConv>,
    pub field: Conv,
    pub deform: DeformConv,
    pub refine1: Conv,
    pub refine2: Conv,
    pub channels: usize,
}

/// Upsampling geometry: exact x2 with kernel 4, stride 2, padding 1.
pub fn upsample_spec(c_in: usize, c_out: usize) -> ConvSpec {
    ConvSpec::new(c_in, c_out, 4).stride(2).padding(1)
}

impl Afub {
    /// `channels` is the fine (output) width; with `upsample` the coarse
    /// input carries twice as many channels at half the resolution.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, upsample: bool) -> Result<Self> {
        let up = if upsample {
            Some(TransposeConv::new(store, rng, &format!("{name}.up"), upsample_spec(2 * channels, channels))?)
        } else {
            None
        };
        let field = Conv::new(
            store,
            rng,
            &format!("{name}.field"),
            ConvSpec::new(2 * channels, 3 * DEFORM_TAPS, 3),
            WeightInit::Zeros,
        )?;
        let deform = DeformConv::new(store, rng, &format!("{name}.deform"), ConvSpec::new(channels, channels, 3))?;
        let refine1 = Conv::new(store, rng, &format!("{name}.refine1"), ConvSpec::new(channels, channels, 3), WeightInit::Kaiming)?;
        let refine2 = Conv::new(store, rng, &format!("{name}.refine2"), ConvSpec::new(channels, channels, 3), WeightInit::Residual)?;
        Ok(Afub {
            up,
            field,
            deform,
            refine1,
            refine2,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, coarse_low: Var, fine: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, coarse_low, fine)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &Bindings, coarse_low: Var, fine: Var) -> Result<AfubTrace> {
        let (sc, sf) = (tape.shape(coarse_low), tape.shape(fine));
        let expected = match self.up {
            Some(_) => (sf.n, 2 * sf.c, sf.h / 2, sf.w / 2),
            None => (sf.n, sf.c, sf.h, sf.w),
        };
        let ok_parity = self.up.is_none() || (sf.h % 2 == 0 && sf.w % 2 == 0);
        if sf.c != self.channels || (sc.n, sc.c, sc.h, sc.w) != expected || !ok_parity {
            return Err(shape_err!(
                "AFuB scale mismatch: coarse {sc}, fine {sf}, width {}, upsample {}",
                self.channels,
                self.up.is_some()
            ));
        }
        let coarse = match &self.up {
            Some(up) => up.forward(tape, p, coarse_low)?,
            None => coarse_low,
        };
        let guide = tape.concat_channels(&[coarse, fine])?;
        let raw = self.field.forward(tape, p, guide)?;
        let (offsets, mask) = split_field(tape, raw)?;
        let details = self.deform.forward(tape, p, fine, offsets, mask)?;
        let fused = tape.add(coarse, details)?;
        let h = self.refine1.forward(tape, p, fused)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.refine2.forward(tape, p, h)?;
        Ok(AfubTrace {
            output: tape.add(fused, h)?,
            coarse,
            fused,
        })
    }

    pub fn final_conv(&self) -> &Conv {
        &self.refine2
    }

    pub fn param_count(c: usize, upsample: bool) -> usize {
        let k = DEFORM_TAPS;
        let up = if upsample { 2 * c * c * 16 + c } else { 0 };
        up + (3 * k * 2 * c * 9 + 3 * k) + 3 * (9 * c * c + c)
    }
}

/// Conventional skip fusion: optional x2 transposed-conv upsample, channel
/// concat with the skip features and a 3x3 merge, optionally followed by a
/// residual block.
#[derive(Clone, Debug)]
pub struct MergeFusion {
    pub up: Option<TransposeConv>,
    pub merge: Conv,
    pub post: Option<ResidualBlock>,
    pub channels: usize,
}

impl MergeFusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        upsample: bool,
        with_residual: bool,
    ) -> Result<Self> {
        let up = if upsample {
            Some(TransposeConv::new(store, rng, &format!("{name}.up"), upsample_spec(2 * channels, channels))?)
        } else {
            None
        };
        let merge = Conv::new(store, rng, &format!("{name}.merge"), ConvSpec::new(2 * channels, channels, 3), WeightInit::Kaiming)?;
        let post = if with_residual {
            Some(ResidualBlock::new(store, rng, &format!("{name}.res"), channels, channels, 1)?)
        } else {
            None
        };
        Ok(MergeFusion {
            up,
            merge,
            post,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, coarse_low: Var, fine: Var) -> Result<Var> {
        let coarse = match &self.up {
            Some(up) => up.forward(tape, p, coarse_low)?,
            None => coarse_low,
        };
        let (sc, sf) = (tape.shape(coarse), tape.shape(fine));
        if sc != sf || sf.c != self.channels {
            return Err(shape_err!("fusion scale mismatch: coarse {sc}, fine {sf}"));
        }
        let cat = tape.concat_channels(&[coarse, fine])?;
        let merged = self.merge.forward(tape, p, cat)?;
        match &self.post {
            Some(r) => r.forward(tape, p, merged),
            None => Ok(merged),
        }
    }

    pub fn param_count(c: usize, upsample: bool, with_residual: bool) -> usize {
        let up = if upsample { 2 * c * c * 16 + c } else { 0 };
        let post = if with_residual { ResidualBlock::param_count(c, c, 1) } else { 0 };
        up + 9 * 2 * c * c + c + post
    }
}

/// One block of a scale-specific subnetwork.
#[derive(Clone, Debug)]
pub enum SubnetBlock {
    Residual(ResidualBlock),
    Afeb(Afeb),
    Amb(Amb),
}

impl SubnetBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: BlockKind,
        channels: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Residual => SubnetBlock::Residual(ResidualBlock::new(store, rng, name, channels, channels, 1)?),
            BlockKind::Afeb => SubnetBlock::Afeb(Afeb::new(store, rng, name, channels)?),
            BlockKind::Amb => SubnetBlock::Amb(Amb::new(store, rng, name, channels, dilations)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            SubnetBlock::Residual(_) => BlockKind::Residual,
            SubnetBlock::Afeb(_) => BlockKind::Afeb,
            SubnetBlock::Amb(_) => BlockKind::Amb,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, f: Var) -> Result<Var> {
        match self {
            SubnetBlock::Residual(b) => b.forward(tape, p, f),
            SubnetBlock::Afeb(b) => b.forward(tape, p, f),
            SubnetBlock::Amb(b) => b.forward(tape, p, f),
        }
    }

    pub fn final_conv(&self) -> &Conv {
        match self {
            SubnetBlock::Residual(b) => b.final_conv(),
            SubnetBlock::Afeb(b) => b.final_conv(),
            SubnetBlock::Amb(b) => b.final_conv(),
        }
    }

    pub fn param_count(kind: BlockKind, c: usize, branches: usize) -> usize {
        match kind {
            BlockKind::Residual => ResidualBlock::param_count(c, c, 1),
            BlockKind::Afeb => Afeb::param_count(c),
            BlockKind::Amb => Amb::param_count(c, branches),
        }
    }
}
