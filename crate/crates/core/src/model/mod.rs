//! The three networks: reusable encoder, alignment auxiliary head, and the
//! change-detection decoder, with seeded initialization and plain forwards.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, Role,
};

use crate::autodiff::{Gradients, ParamSet, Tape, Tensor, Var};
use crate::error::{CdError, CdResult};
use crate::raster::Raster;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture description shared by all three checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 3],
    pub descriptor_dim: usize,
    pub patch_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 32, 64],
            descriptor_dim: 64,
            patch_size: 256,
        }
    }
}

/// Decoder trunk/refine widths; architecture detail, not externally tunable.
const DEC_TRUNK: usize = 48;
const DEC_REFINE: usize = 24;

impl EncoderConfig {
    pub fn validate(&self) -> CdResult<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(CdError::InvalidConfig(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.descriptor_dim == 0 {
            return Err(CdError::InvalidConfig(
                "channel counts must be positive".into(),
            ));
        }
        if self.patch_size < 8 || self.patch_size % 8 != 0 {
            return Err(CdError::InvalidConfig(format!(
                "patch_size must be a positive multiple of 8, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Channel count of a fused per-patch feature map:
    /// the raw patch concatenated with the upsampled deep features.
    pub fn fused_channels(&self) -> usize {
        self.in_channels + self.stage_channels[2]
    }
}

/// Glorot-uniform conv parameters under `prefix.w` / `prefix.b` (bias zero).
fn init_conv<S: Scalar>(
    params: &mut ParamSet<S>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
) -> CdResult<()> {
    let fan_in = (in_ch * k * k) as f64;
    let fan_out = (out_ch * k * k) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let n = out_ch * in_ch * k * k;
    let data = (0..n)
        .map(|_| S::from64(rng.random_range(-limit..limit)))
        .collect();
    params.insert(
        format!("{prefix}.w"),
        Tensor::new(vec![out_ch, in_ch, k, k], data)?,
    )?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![out_ch]))?;
    Ok(())
}

/// Fresh encoder parameters: three stages of two 3x3 convs each.
pub fn init_encoder<S: Scalar>(cfg: &EncoderConfig, seed: u64) -> CdResult<ParamSet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut in_ch = cfg.in_channels;
    for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
        init_conv(&mut p, &mut rng, &format!("s{}.c1", i + 1), in_ch, out_ch, 3)?;
        init_conv(&mut p, &mut rng, &format!("s{}.c2", i + 1), out_ch, out_ch, 3)?;
        in_ch = out_ch;
    }
    Ok(p)
}

/// Fresh alignment-head parameters: two 1x1 convs.
pub fn init_align_head<S: Scalar>(cfg: &EncoderConfig, seed: u64) -> CdResult<ParamSet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let c = cfg.stage_channels[2];
    init_conv(&mut p, &mut rng, "h.c1", c, c, 1)?;
    init_conv(&mut p, &mut rng, "h.c2", c, cfg.descriptor_dim, 1)?;
    Ok(p)
}

/// Fresh decoder parameters. Input width is three fused feature maps
/// (|f1-f2|, f1, f2) stacked channelwise.
pub fn init_decoder<S: Scalar>(cfg: &EncoderConfig, seed: u64) -> CdResult<ParamSet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let in_ch = 3 * cfg.fused_channels();
    init_conv(&mut p, &mut rng, "d.c1", in_ch, DEC_TRUNK, 1)?;
    init_conv(&mut p, &mut rng, "d.c2", DEC_TRUNK, DEC_TRUNK, 3)?;
    init_conv(&mut p, &mut rng, "d.c3", DEC_TRUNK, DEC_REFINE, 3)?;
    init_conv(&mut p, &mut rng, "d.c4", DEC_REFINE, 1, 3)?;
    Ok(p)
}

/// Parameters registered on a tape, by name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> CdResult<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CdError::InvalidConfig(format!("no parameter named '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Puts every parameter on the tape; `trainable` controls gradient flow.
pub fn bind_params<S: Scalar>(
    tape: &Tape<S>,
    params: &ParamSet<S>,
    trainable: bool,
) -> BoundParams {
    BoundParams {
        vars: params
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect(),
    }
}

/// Copies gradients from a backward sweep into the parameter tensors.
pub fn absorb_grads<S: Scalar>(
    params: &mut ParamSet<S>,
    bound: &BoundParams,
    grads: &Gradients<S>,
) -> CdResult<()> {
    for (name, &var) in bound.iter() {
        let g = grads
            .get(var)
            .ok_or_else(|| CdError::MissingGradient(name.clone()))?;
        params.get_mut(name)?.set_grad(g.to_vec())?;
    }
    Ok(())
}

fn conv_block<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    p: &BoundParams,
    name: &str,
    pad: usize,
) -> CdResult<Var> {
    tape.conv2d(
        x,
        p.var(&format!("{name}.w"))?,
        p.var(&format!("{name}.b"))?,
        1,
        pad,
    )
}

/// Encoder trunk on an NCHW batch. Returns the stride-4 descriptor map
/// (stage-3 conv output) and the stride-8 deep features (after the final
/// pool).
pub fn encoder_graph<S: Scalar>(tape: &Tape<S>, x: Var, p: &BoundParams) -> CdResult<(Var, Var)> {
    let mut h = x;
    for stage in 1..=3 {
        h = tape.relu(conv_block(tape, h, p, &format!("s{stage}.c1"), 1)?);
        h = tape.relu(conv_block(tape, h, p, &format!("s{stage}.c2"), 1)?);
        if stage < 3 {
            h = tape.avg_pool2(h)?;
        }
    }
    let desc_map = h;
    let deep = tape.avg_pool2(desc_map)?;
    Ok((desc_map, deep))
}

/// Alignment head: two 1x1 convs with a ReLU between, then per-position
/// L2 normalization to unit descriptor vectors.
pub fn align_head_graph<S: Scalar>(tape: &Tape<S>, desc_map: Var, p: &BoundParams) -> CdResult<Var> {
    let h = tape.relu(conv_block(tape, desc_map, p, "h.c1", 0)?);
    let h = conv_block(tape, h, p, "h.c2", 0)?;
    tape.l2_normalize_channels(h)
}

/// The decoder's temporal-difference fusion: `[|f1-f2|, f1, f2]` stacked
/// channelwise.
pub fn fused_difference<S: Scalar>(tape: &Tape<S>, f1: Var, f2: Var) -> CdResult<Var> {
    let d = tape.abs(tape.sub(f1, f2)?);
    tape.concat_channels(&[d, f1, f2])
}

/// Decoder on two fused feature maps of equal shape. Works at quarter
/// resolution, then two bilinear 2x upsamplings restore the input size;
/// output is one logit plane per batch item.
pub fn decoder_graph<S: Scalar>(tape: &Tape<S>, f1: Var, f2: Var, p: &BoundParams) -> CdResult<Var> {
    let fused = fused_difference(tape, f1, f2)?;
    let down = tape.avg_pool2(tape.avg_pool2(fused)?)?;
    let h = tape.relu(conv_block(tape, down, p, "d.c1", 0)?);
    let h = tape.relu(conv_block(tape, h, p, "d.c2", 1)?);
    let h = tape.upsample_bilinear2x(h)?;
    let h = tape.relu(conv_block(tape, h, p, "d.c3", 1)?);
    let h = tape.upsample_bilinear2x(h)?;
    conv_block(tape, h, p, "d.c4", 1)
}

fn check_patch<S: Scalar>(raster: &Raster<S>, in_channels: usize) -> CdResult<()> {
    if raster.height() != raster.width() {
        return Err(CdError::ShapeMismatch(format!(
            "encoder patch must be square, got {}x{}",
            raster.height(),
            raster.width()
        )));
    }
    if raster.height() % 8 != 0 {
        return Err(CdError::ShapeMismatch(format!(
            "patch side {} is not divisible by 8",
            raster.height()
        )));
    }
    if raster.channels() != in_channels {
        return Err(CdError::ShapeMismatch(format!(
            "patch has {} channels, encoder expects {in_channels}",
            raster.channels()
        )));
    }
    Ok(())
}

/// Plain (non-training) encoder pass over one patch.
/// Returns `(desc_map, deep)` with batch axis 1.
pub fn encoder_forward<S: Scalar>(
    raster: &Raster<S>,
    params: &ParamSet<S>,
) -> CdResult<(Tensor<S>, Tensor<S>)> {
    let in_channels = params.get("s1.c1.w")?.shape()[1];
    check_patch(raster, in_channels)?;
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_raster(raster));
    let bound = bind_params(&tape, params, false);
    let (desc, deep) = encoder_graph(&tape, x, &bound)?;
    Ok((tape.value(desc), tape.value(deep)))
}

/// Plain alignment-head pass over a descriptor map.
pub fn align_head_forward<S: Scalar>(
    desc_map: &Tensor<S>,
    params: &ParamSet<S>,
) -> CdResult<Tensor<S>> {
    let tape = Tape::new();
    let x = tape.constant(desc_map.clone());
    let bound = bind_params(&tape, params, false);
    let out = align_head_graph(&tape, x, &bound)?;
    Ok(tape.value(out))
}

/// Plain decoder pass over two fused feature maps.
pub fn decoder_forward<S: Scalar>(
    f_t1: &Tensor<S>,
    f_t2: &Tensor<S>,
    params: &ParamSet<S>,
) -> CdResult<Tensor<S>> {
    if f_t1.shape() != f_t2.shape() {
        return Err(CdError::ShapeMismatch(format!(
            "temporal features {:?} vs {:?}",
            f_t1.shape(),
            f_t2.shape()
        )));
    }
    let tape = Tape::new();
    let a = tape.constant(f_t1.clone());
    let b = tape.constant(f_t2.clone());
    let bound = bind_params(&tape, params, false);
    let out = decoder_graph(&tape, a, b, &bound)?;
    Ok(tape.value(out))
}
