//! Self-supervised pre-training of the encoder and alignment head.
//!
//! Each training step embeds a batch of patches twice: once as-is (top
//! branch) and once through `M` random augmentations per sample (bottom
//! branch). The loss is the mean over views of the negative cosine
//! similarity between the top embedding and the stop-gradient bottom
//! embedding, so gradients flow through the top branch only while both
//! branches share one parameter set.

use crate::autodiff::{sgd_momentum_step, OptimState, ParamSet, Tape, Tensor, Var};
use crate::error::{CdError, CdResult};
use crate::model::{
    absorb_grads, align_head_graph, bind_params, encoder_graph, init_align_head, init_encoder,
    BoundParams, Checkpoint, EncoderConfig, Role,
};
use crate::raster::{load_png, Raster};
use crate::scalar::Scalar;
use crate::scenario::derive_seed;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One photometric + geometric view transform, drawn entirely from `seed`.
///
/// `augment` applies the fields in a fixed order: gain/bias with clamping
/// to [0, 1], exact quarter-turn rotation, bilinear jitter rotation with
/// zero fill, then an optional horizontal flip.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    /// Multiplicative intensity factor, in [0.6, 1.4].
    pub gain: f64,
    /// Additive intensity offset, in [-0.2, 0.2].
    pub bias: f64,
    /// Number of exact 90-degree clockwise turns, 0..=3.
    pub quarter_turns: u8,
    /// Continuous rotation on top of the quarter turns, degrees in [-15, 15].
    pub jitter_deg: f64,
    /// Mirror left-right after rotation.
    pub hflip: bool,
    /// Seed the spec was drawn from (kept for provenance/logging).
    pub seed: u64,
}

impl AugmentationSpec {
    /// Draws every field from a seeded stream; equal seeds give equal specs.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gain: rng.random_range(0.6..=1.4),
            bias: rng.random_range(-0.2..=0.2),
            quarter_turns: rng.random_range(0..4u8),
            jitter_deg: rng.random_range(-15.0..=15.0),
            hflip: rng.random(),
            seed,
        }
    }

    /// The do-nothing transform.
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            quarter_turns: 0,
            jitter_deg: 0.0,
            hflip: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> CdResult<()> {
        if !(0.6..=1.4).contains(&self.gain) {
            return Err(CdError::InvalidConfig(format!(
                "augmentation gain {} outside [0.6, 1.4]",
                self.gain
            )));
        }
        if !(-0.2..=0.2).contains(&self.bias) {
            return Err(CdError::InvalidConfig(format!(
                "augmentation bias {} outside [-0.2, 0.2]",
                self.bias
            )));
        }
        if self.quarter_turns > 3 {
            return Err(CdError::InvalidConfig(format!(
                "quarter_turns {} outside 0..=3",
                self.quarter_turns
            )));
        }
        if !(-15.0..=15.0).contains(&self.jitter_deg) {
            return Err(CdError::InvalidConfig(format!(
                "rotation jitter {} deg outside [-15, 15]",
                self.jitter_deg
            )));
        }
        Ok(())
    }
}

/// Pre-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Augmented views per sample (the M of the view sum).
    pub views_per_sample: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 96,
            views_per_sample: 2,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl PretextConfig {
    pub fn validate(&self) -> CdResult<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.views_per_sample == 0 {
            return Err(CdError::InvalidConfig(
                "epochs, batch_size and views_per_sample must all be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CdError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CdError::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CdError::InvalidConfig(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Exact 90-degree clockwise rotation of a square raster, `k` times.
fn rotate_quarters<S: Scalar>(p: &Raster<S>, k: u8) -> Raster<S> {
    let n = p.height();
    let c = p.channels();
    let mut out = p.clone();
    for _ in 0..(k % 4) {
        let src = out.clone();
        out = Raster::from_fn(n, n, c, |x, y, ch| src.get(y, n - 1 - x, ch))
            .expect("square rotation preserves shape");
    }
    out
}

/// Bilinear rotation about the image center; samples outside come back zero.
fn rotate_bilinear<S: Scalar>(p: &Raster<S>, degrees: f64) -> Raster<S> {
    let n = p.height();
    let c = p.channels();
    let center = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    Raster::from_fn(n, n, c, |x, y, ch| {
        // inverse-map the output pixel back into the source frame
        let dx = x as f64 - center;
        let dy = y as f64 - center;
        let sx = center + cos * dx + sin * dy;
        let sy = center - sin * dx + cos * dy;
        p.sample_bilinear(sx, sy, ch)
    })
    .expect("rotation preserves shape")
}

/// Applies one augmentation spec to a square patch. Deterministic; the
/// output has the same shape and stays inside [0, 1].
pub fn augment<S: Scalar>(p: &Raster<S>, spec: &AugmentationSpec) -> CdResult<Raster<S>> {
    spec.validate()?;
    if p.height() != p.width() {
        return Err(CdError::InvalidRaster(format!(
            "augment expects a square patch, got {}x{}",
            p.height(),
            p.width()
        )));
    }
    let n = p.height();
    let c = p.channels();

    let gain = S::from64(spec.gain);
    let bias = S::from64(spec.bias);
    let mut out = Raster::from_fn(n, n, c, |x, y, ch| {
        (gain * p.get(x, y, ch) + bias).clamp(S::zero(), S::one())
    })?;

    if spec.quarter_turns % 4 != 0 {
        out = rotate_quarters(&out, spec.quarter_turns);
    }
    if spec.jitter_deg != 0.0 {
        out = rotate_bilinear(&out, spec.jitter_deg);
    }
    if spec.hflip {
        let src = out.clone();
        out = Raster::from_fn(n, n, c, |x, y, ch| src.get(n - 1 - x, y, ch))?;
    }
    Ok(out)
}

/// Embedding graph shared by both branches: encoder, alignment head,
/// global average pool, row normalization. Output rows are unit vectors.
fn embedding_graph<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    enc: &BoundParams,
    head: &BoundParams,
) -> CdResult<Var> {
    let (desc, _) = encoder_graph(tape, x, enc)?;
    let v = align_head_graph(tape, desc, head)?;
    let pooled = tape.global_avg_pool(v)?;
    tape.l2_normalize_rows(pooled)
}

/// The z vector fed to the pretext loss: alignment-head map, globally
/// average-pooled, then L2-normalized. Length equals `descriptor_dim`.
pub fn pooled_embedding<S: Scalar>(
    patch: &Raster<S>,
    enc_params: &ParamSet<S>,
    head_params: &ParamSet<S>,
) -> CdResult<Vec<S>> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_raster(patch));
    let enc = bind_params(&tape, enc_params, false);
    let head = bind_params(&tape, head_params, false);
    let z = embedding_graph(&tape, x, &enc, &head)?;
    let z = tape.value(z);
    let norm: f64 = z.data().iter().map(|v| v.to64() * v.to64()).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return Err(CdError::Degenerate(
            "pooled embedding is the zero vector (every head activation died)".into(),
        ));
    }
    Ok(z.data().to_vec())
}

/// Per-dimension variance across batch rows, averaged over dimensions.
fn batch_variance<S: Scalar>(z: &Tensor<S>) -> f64 {
    let shape = z.shape();
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return f64::INFINITY;
    }
    let mut acc = 0.0f64;
    for dim in 0..d {
        let mean = (0..n).map(|r| z.data()[r * d + dim].to64()).sum::<f64>() / n as f64;
        acc += (0..n)
            .map(|r| {
                let v = z.data()[r * d + dim].to64() - mean;
                v * v
            })
            .sum::<f64>()
            / n as f64;
    }
    acc / d as f64
}

/// One optimizer step over a batch. `views[m]` holds the m-th augmented
/// view of every batch sample, in batch order. Returns the loss value.
fn pretext_step<S: Scalar>(
    batch: &[Raster<S>],
    views: &[Vec<Raster<S>>],
    enc_params: &mut ParamSet<S>,
    head_params: &mut ParamSet<S>,
    enc_state: &mut OptimState<S>,
    head_state: &mut OptimState<S>,
    cfg: &PretextConfig,
) -> CdResult<f64> {
    let m = views.len();
    let tape = Tape::new();
    let enc = bind_params(&tape, enc_params, true);
    let head = bind_params(&tape, head_params, true);

    let x_top = tape.constant(Tensor::from_rasters(batch)?);
    let z_top = embedding_graph(&tape, x_top, &enc, &head)?;

    // view-major stacking keeps z_top aligned with each repeated block
    let flat: Vec<Raster<S>> = views.iter().flat_map(|v| v.iter().cloned()).collect();
    let x_views = tape.constant(Tensor::from_rasters(&flat)?);
    let z_views = embedding_graph(&tape, x_views, &enc, &head)?;

    let z_top_rep = tape.repeat_rows(z_top, m)?;
    let loss = tape.pretext_similarity_loss(z_top_rep, z_views)?;
    let loss_value = tape.value(loss).item().to64();
    if !(-1.0 - 1e-4..=1.0 + 1e-4).contains(&loss_value) {
        return Err(CdError::Degenerate(format!(
            "pretext loss {loss_value} escaped [-1, 1]"
        )));
    }

    let var = batch_variance(&tape.value(z_top));
    if var < 1e-4 {
        log::warn!("pretext embeddings are collapsing: batch variance {var:.3e}");
    }

    let grads = tape.backward(loss)?;
    absorb_grads(enc_params, &enc, &grads)?;
    absorb_grads(head_params, &head, &grads)?;
    sgd_momentum_step(enc_params, enc_state, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    sgd_momentum_step(head_params, head_state, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    Ok(loss_value)
}

/// Epoch ordering, a pure function of (seed, epoch).
pub(crate) fn shuffled_indices(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, 0xD5), epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn view_spec_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    let s = derive_seed(derive_seed(seed, 0xA06), epoch as u64);
    derive_seed(derive_seed(s, step as u64), slot as u64)
}

fn check_corpus<S: Scalar>(
    patches: &[Raster<S>],
    enc_cfg: &EncoderConfig,
    cfg: &PretextConfig,
) -> CdResult<()> {
    if patches.len() < cfg.batch_size {
        return Err(CdError::InvalidDataset(format!(
            "{} patches cannot fill one batch of {}",
            patches.len(),
            cfg.batch_size
        )));
    }
    let side = patches[0].height();
    for (i, p) in patches.iter().enumerate() {
        if p.height() != p.width() {
            return Err(CdError::InvalidDataset(format!(
                "patch {i} is {}x{}, expected square",
                p.height(),
                p.width()
            )));
        }
        if p.height() % 8 != 0 {
            return Err(CdError::InvalidDataset(format!(
                "patch {i} side {} is not divisible by 8",
                p.height()
            )));
        }
        if p.height() != side {
            return Err(CdError::InvalidDataset(format!(
                "patch {i} side {} differs from first patch side {side}",
                p.height()
            )));
        }
        if p.channels() != enc_cfg.in_channels {
            return Err(CdError::InvalidDataset(format!(
                "patch {i} has {} channels, encoder expects {}",
                p.channels(),
                enc_cfg.in_channels
            )));
        }
    }
    Ok(())
}

/// In-memory pre-training loop. Returns the encoder checkpoint, the
/// alignment-head checkpoint, and the per-epoch mean loss.
pub fn pretrain_patches(
    patches: &[Raster<f32>],
    enc_cfg: &EncoderConfig,
    cfg: &PretextConfig,
) -> CdResult<(Checkpoint, Checkpoint, Vec<f64>)> {
    enc_cfg.validate()?;
    cfg.validate()?;
    check_corpus(patches, enc_cfg, cfg)?;

    let mut enc_params: ParamSet<f32> = init_encoder(enc_cfg, derive_seed(cfg.seed, 0xE0C))?;
    let mut head_params: ParamSet<f32> = init_align_head(enc_cfg, derive_seed(cfg.seed, 0xEAD))?;
    let mut enc_state = OptimState::new();
    let mut head_state = OptimState::new();

    let m = cfg.views_per_sample;
    let b = cfg.batch_size;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(cfg.seed, epoch, patches.len());
        let mut step_losses = Vec::new();

        for (step, chunk) in order.chunks_exact(b).enumerate() {
            let batch: Vec<Raster<f32>> = chunk.iter().map(|&i| patches[i].clone()).collect();

            // spec seeds are fixed up front so parallel augmentation stays
            // deterministic regardless of scheduling
            let specs: Vec<AugmentationSpec> = (0..m * b)
                .map(|slot| AugmentationSpec::sample(view_spec_seed(cfg.seed, epoch, step, slot)))
                .collect();
            let flat: Vec<Raster<f32>> = specs
                .par_iter()
                .enumerate()
                .map(|(slot, spec)| augment(&batch[slot % b], spec))
                .collect::<CdResult<_>>()?;
            let views: Vec<Vec<Raster<f32>>> =
                flat.chunks(b).map(|view| view.to_vec()).collect();

            step_losses.push(pretext_step(
                &batch,
                &views,
                &mut enc_params,
                &mut head_params,
                &mut enc_state,
                &mut head_state,
                cfg,
            )?);
        }

        if step_losses.is_empty() {
            return Err(CdError::InvalidDataset(format!(
                "{} patches yield no full batch of {b}",
                patches.len()
            )));
        }
        epoch_losses.push(step_losses.iter().sum::<f64>() / step_losses.len() as f64);
    }

    Ok((
        Checkpoint::new(Role::Encoder, enc_cfg.clone(), enc_params),
        Checkpoint::new(Role::AlignHead, enc_cfg.clone(), head_params),
        epoch_losses,
    ))
}

/// Loads every `.png` in `patch_dir` (sorted by file name) and pre-trains
/// on them.
pub fn pretrain(
    patch_dir: &Path,
    enc_cfg: &EncoderConfig,
    cfg: &PretextConfig,
) -> CdResult<(Checkpoint, Checkpoint, Vec<f64>)> {
    let mut paths: Vec<_> = std::fs::read_dir(patch_dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CdError::InvalidDataset(format!(
            "no PNG patches under {}",
            patch_dir.display()
        )));
    }
    let patches: Vec<Raster<f32>> = paths
        .iter()
        .map(|p| load_png::<f32>(p))
        .collect::<CdResult<_>>()?;
    pretrain_patches(&patches, enc_cfg, cfg)
}

/// Writes the loss log as `epoch,mean_loss` CSV rows.
pub fn write_loss_log(path: &Path, losses: &[f64]) -> CdResult<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss:.6}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
