//! Change-detection fine-tuning and tiled scene inference.
//!
//! The pre-trained encoder stays frozen throughout. Each temporal input is
//! fused as `Concat[T, Enc(T)]` with the stride-8 deep features bilinearly
//! upsampled back to patch resolution; the decoder consumes the fused pair
//! and is the only network trained here (AdamW on a BCE-with-logits loss).

use crate::autodiff::{adamw_step, OptimState, ParamSet, Tape, Tensor, Var};
use crate::error::{CdError, CdResult};
use crate::model::{
    absorb_grads, bind_params, decoder_graph, encoder_forward, init_decoder, Checkpoint, Role,
};
use crate::pretext::shuffled_indices;
use crate::raster::{tile_grid, Raster, Window};
use crate::scenario::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// AdamW first-moment coefficient; the configurable `beta2` rides on top.
const BETA1: f64 = 0.9;

/// One labeled bitemporal training sample.
#[derive(Debug, Clone)]
pub struct CdPair {
    pub t1_patch: Raster<f32>,
    pub t2_patch: Raster<f32>,
    /// Single-channel mask with values exactly 0 or 1.
    pub gt_mask: Raster<f32>,
}

impl CdPair {
    pub fn validate(&self) -> CdResult<()> {
        let (h, w) = (self.t1_patch.height(), self.t1_patch.width());
        for (name, r) in [("t2_patch", &self.t2_patch), ("gt_mask", &self.gt_mask)] {
            if r.height() != h || r.width() != w {
                return Err(CdError::ShapeMismatch(format!(
                    "{name} is {}x{}, t1_patch is {h}x{w}",
                    r.height(),
                    r.width()
                )));
            }
        }
        if self.t2_patch.channels() != self.t1_patch.channels() {
            return Err(CdError::ShapeMismatch(format!(
                "t2_patch has {} channels, t1_patch has {}",
                self.t2_patch.channels(),
                self.t1_patch.channels()
            )));
        }
        if self.gt_mask.channels() != 1 {
            return Err(CdError::InvalidTarget(format!(
                "gt_mask must be single-channel, got {}",
                self.gt_mask.channels()
            )));
        }
        if self.gt_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CdError::InvalidTarget(
                "gt_mask contains values other than 0 and 1".into(),
            ));
        }
        Ok(())
    }
}

/// Decoder fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// AdamW second-moment coefficient.
    pub beta2: f64,
    pub weight_decay: f64,
    /// Probability cut for turning the sigmoid map into a mask.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 0.001,
            beta2: 0.999,
            weight_decay: 0.01,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> CdResult<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CdError::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CdError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(CdError::InvalidConfig(format!(
                "beta2 {} outside [0, 1)",
                self.beta2
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CdError::InvalidConfig(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CdError::InvalidConfig(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

fn expect_role(ckpt: &Checkpoint, role: Role) -> CdResult<()> {
    if ckpt.role != role {
        return Err(CdError::RoleMismatch {
            expected: role.name().into(),
            found: ckpt.role.name().into(),
        });
    }
    Ok(())
}

/// Fusion subgraph: raw patch concatenated with the deep features
/// upsampled from stride 8 back to full resolution.
fn fused_graph<S: crate::scalar::Scalar>(
    tape: &Tape<S>,
    patch: Var,
    deep: Var,
) -> CdResult<Var> {
    let mut up = deep;
    for _ in 0..3 {
        up = tape.upsample_bilinear2x(up)?;
    }
    tape.concat_channels(&[patch, up])
}

/// Eq.-3 fusion of one patch through a frozen encoder: `Concat[T, Enc(T)]`
/// with `Enc(T)` bilinearly upsampled to patch resolution.
pub fn fuse_features(patch: &Raster<f32>, enc_ckpt: &Checkpoint) -> CdResult<Tensor<f32>> {
    expect_role(enc_ckpt, Role::Encoder)?;
    let (_, deep) = encoder_forward(patch, &enc_ckpt.params)?;
    let tape = Tape::new();
    let p = tape.constant(Tensor::from_raster(patch));
    let d = tape.constant(deep);
    let fused = fused_graph(&tape, p, d)?;
    Ok(tape.value(fused))
}

/// Frozen deep features for every pair, computed once up front.
fn cache_deep(
    pairs: &[CdPair],
    enc: &ParamSet<f32>,
) -> CdResult<Vec<(Tensor<f32>, Tensor<f32>)>> {
    pairs
        .par_iter()
        .map(|pair| {
            let (_, d1) = encoder_forward(&pair.t1_patch, enc)?;
            let (_, d2) = encoder_forward(&pair.t2_patch, enc)?;
            Ok((d1, d2))
        })
        .collect()
}

/// Trains the decoder on labeled pairs while the encoder stays frozen.
/// Returns the decoder checkpoint and the per-epoch mean BCE loss.
pub fn finetune(
    pairs: &[CdPair],
    enc_ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
) -> CdResult<(Checkpoint, Vec<f64>)> {
    expect_role(enc_ckpt, Role::Encoder)?;
    cfg.validate()?;
    if pairs.len() < cfg.batch_size {
        return Err(CdError::InvalidDataset(format!(
            "{} pairs cannot fill one batch of {}",
            pairs.len(),
            cfg.batch_size
        )));
    }
    let (h0, w0) = (pairs[0].t1_patch.height(), pairs[0].t1_patch.width());
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate()?;
        if pair.t1_patch.height() != h0 || pair.t1_patch.width() != w0 {
            return Err(CdError::InvalidDataset(format!(
                "pair {i} is {}x{}, pair 0 is {h0}x{w0}",
                pair.t1_patch.height(),
                pair.t1_patch.width()
            )));
        }
    }

    let deep = cache_deep(pairs, &enc_ckpt.params)?;
    let mut dec_params: ParamSet<f32> =
        init_decoder(&enc_ckpt.config, derive_seed(cfg.seed, 0xDEC0))?;
    let mut state = OptimState::new();
    let b = cfg.batch_size;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(cfg.seed, epoch, pairs.len());
        let mut step_losses = Vec::new();

        for chunk in order.chunks_exact(b) {
            let t1: Vec<Raster<f32>> = chunk.iter().map(|&i| pairs[i].t1_patch.clone()).collect();
            let t2: Vec<Raster<f32>> = chunk.iter().map(|&i| pairs[i].t2_patch.clone()).collect();
            let gt: Vec<Raster<f32>> = chunk.iter().map(|&i| pairs[i].gt_mask.clone()).collect();
            let d1: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &deep[i].0).collect();
            let d2: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &deep[i].1).collect();

            let tape = Tape::new();
            let dec = bind_params(&tape, &dec_params, true);
            let f1 = fused_graph(
                &tape,
                tape.constant(Tensor::from_rasters(&t1)?),
                tape.constant(Tensor::stack(&d1)?),
            )?;
            let f2 = fused_graph(
                &tape,
                tape.constant(Tensor::from_rasters(&t2)?),
                tape.constant(Tensor::stack(&d2)?),
            )?;
            let logits = decoder_graph(&tape, f1, f2, &dec)?;
            let target = tape.constant(Tensor::from_rasters(&gt)?);
            let loss = tape.bce_with_logits(logits, target)?;
            step_losses.push(tape.value(loss).item() as f64);

            let grads = tape.backward(loss)?;
            absorb_grads(&mut dec_params, &dec, &grads)?;
            adamw_step(&mut dec_params, &mut state, cfg.lr, BETA1, cfg.beta2, cfg.weight_decay)?;
        }

        if step_losses.is_empty() {
            return Err(CdError::InvalidDataset(format!(
                "{} pairs yield no full batch of {b}",
                pairs.len()
            )));
        }
        epoch_losses.push(step_losses.iter().sum::<f64>() / step_losses.len() as f64);
    }

    Ok((
        Checkpoint::new(Role::Decoder, enc_ckpt.config.clone(), dec_params),
        epoch_losses,
    ))
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Uniform-average stitching of per-window planes into one scene plane.
/// Accumulation runs in window index order, so the result is independent
/// of how the tiles were produced.
fn stitch_mean(h: usize, w: usize, windows: &[Window], tiles: &[Vec<f32>]) -> Vec<f32> {
    let mut sum = vec![0.0f64; h * w];
    let mut hits = vec![0u32; h * w];
    for (win, tile) in windows.iter().zip(tiles) {
        for ty in 0..win.size {
            let row = (win.y0 + ty) * w + win.x0;
            let trow = ty * win.size;
            for tx in 0..win.size {
                sum[row + tx] += tile[trow + tx] as f64;
                hits[row + tx] += 1;
            }
        }
    }
    sum.iter()
        .zip(&hits)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { (s / n as f64) as f32 })
        .collect()
}

/// Tiled decoder inference over an aligned scene pair.
///
/// Windows of `tile` pixels (clamped to the scene and rounded down to a
/// multiple of 8) advance by `stride`; overlapping probabilities are
/// averaged with uniform weights. Returns the probability map and the
/// thresholded `{0,1}` mask (`p >= threshold` counts as change).
pub fn infer_scene(
    t1: &Raster<f32>,
    t2_calibrated: &Raster<f32>,
    enc_ckpt: &Checkpoint,
    dec_ckpt: &Checkpoint,
    tile: usize,
    stride: usize,
    threshold: f64,
) -> CdResult<(Raster<f32>, Raster<f32>)> {
    expect_role(enc_ckpt, Role::Encoder)?;
    expect_role(dec_ckpt, Role::Decoder)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CdError::InvalidConfig(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let (h, w) = (t1.height(), t1.width());
    if t2_calibrated.height() != h || t2_calibrated.width() != w {
        return Err(CdError::ExtentMismatch(format!(
            "t2 is {}x{}, t1 is {h}x{w}",
            t2_calibrated.height(),
            t2_calibrated.width()
        )));
    }
    if t2_calibrated.channels() != t1.channels() {
        return Err(CdError::ExtentMismatch(format!(
            "t2 has {} channels, t1 has {}",
            t2_calibrated.channels(),
            t1.channels()
        )));
    }

    let eff_tile = (tile.min(h).min(w) / 8) * 8;
    if eff_tile == 0 {
        return Err(CdError::InvalidConfig(format!(
            "tile {tile} on a {h}x{w} scene leaves no usable window"
        )));
    }
    let windows = tile_grid(h, w, eff_tile, stride.min(eff_tile).max(1))?;

    let tiles: Vec<Vec<f32>> = windows
        .par_iter()
        .map(|&win| -> CdResult<Vec<f32>> {
            let p1 = t1.crop(win)?;
            let p2 = t2_calibrated.crop(win)?;
            let (_, d1) = encoder_forward(&p1, &enc_ckpt.params)?;
            let (_, d2) = encoder_forward(&p2, &enc_ckpt.params)?;
            let tape = Tape::new();
            let dec = bind_params(&tape, &dec_ckpt.params, false);
            let f1 = fused_graph(&tape, tape.constant(Tensor::from_raster(&p1)), tape.constant(d1))?;
            let f2 = fused_graph(&tape, tape.constant(Tensor::from_raster(&p2)), tape.constant(d2))?;
            let logits = decoder_graph(&tape, f1, f2, &dec)?;
            Ok(tape.value(logits).data().iter().map(|&x| sigmoid(x)).collect())
        })
        .collect::<CdResult<_>>()?;

    let prob = Raster::new(h, w, 1, stitch_mean(h, w, &windows, &tiles))?;
    let mask = Raster::from_fn(h, w, 1, |x, y, _| {
        if prob.get(x, y, 0) as f64 >= threshold {
            1.0
        } else {
            0.0
        }
    })?;
    Ok((prob, mask))
}
