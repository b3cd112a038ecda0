//! Keypoint descriptors: interpolated unit vectors from the frozen
//! alignment head, or normalized raw patches as a training-free fallback.

use super::harris::Keypoint;
use crate::error::{CdError, CdResult};
use crate::model::{align_head_forward, encoder_forward, Checkpoint};
use crate::raster::Raster;

/// A keypoint paired with its unit feature vector.
#[derive(Debug, Clone)]
pub struct Descriptor {
    pub keypoint: Keypoint,
    pub v: Vec<f32>,
}

/// Where descriptor vectors come from.
#[derive(Clone, Copy)]
pub enum DescriptorSource<'a> {
    /// Frozen encoder plus alignment head.
    Learned {
        encoder: &'a Checkpoint,
        head: &'a Checkpoint,
    },
    /// Mean-centered, L2-normalized 17x17 grayscale window. Needs no
    /// training, which makes it a useful geometric baseline.
    RawPatch,
}

fn check_bounds(patch: &Raster<f32>, keypoints: &[Keypoint]) -> CdResult<()> {
    let (h, w) = (patch.height() as f64, patch.width() as f64);
    for k in keypoints {
        if !(0.0..w).contains(&k.x) || !(0.0..h).contains(&k.y) {
            return Err(CdError::Geometry(format!(
                "keypoint ({}, {}) outside {}x{} patch",
                k.x, k.y, patch.width(), patch.height()
            )));
        }
    }
    Ok(())
}

fn renormalize(v: &mut [f32]) -> bool {
    let norm = (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt();
    if norm < 1e-6 {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

/// Descriptors from the frozen networks: the head's unit-vector map is
/// bilinearly sampled at `(x/4, y/4)` per keypoint and re-normalized after
/// interpolation. Keypoints landing on dead (all-zero) cells are dropped.
pub fn describe(
    patch: &Raster<f32>,
    keypoints: &[Keypoint],
    encoder: &Checkpoint,
    head: &Checkpoint,
) -> CdResult<Vec<Descriptor>> {
    check_bounds(patch, keypoints)?;
    let (desc_map, _) = encoder_forward(patch, &encoder.params)?;
    let vmap = align_head_forward(&desc_map, &head.params)?;
    let (dim, mh, mw) = (vmap.shape()[1], vmap.shape()[2], vmap.shape()[3]);
    let plane = mh * mw;
    let data = vmap.data();

    // clamped bilinear lookup of one channel of the map
    let cell = |c: usize, ix: usize, iy: usize| data[c * plane + iy * mw + ix] as f64;
    let mut out = Vec::with_capacity(keypoints.len());
    for &k in keypoints {
        let mx = (k.x / 4.0).clamp(0.0, (mw - 1) as f64);
        let my = (k.y / 4.0).clamp(0.0, (mh - 1) as f64);
        let (x0, y0) = (mx.floor() as usize, my.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(mw - 1), (y0 + 1).min(mh - 1));
        let (fx, fy) = (mx - x0 as f64, my - y0 as f64);
        let mut v = vec![0.0f32; dim];
        for (c, slot) in v.iter_mut().enumerate() {
            let top = cell(c, x0, y0) * (1.0 - fx) + cell(c, x1, y0) * fx;
            let bot = cell(c, x0, y1) * (1.0 - fx) + cell(c, x1, y1) * fx;
            *slot = (top * (1.0 - fy) + bot * fy) as f32;
        }
        if renormalize(&mut v) {
            out.push(Descriptor { keypoint: k, v });
        }
    }
    Ok(out)
}

const RAW_HALF: i64 = 8;

/// Raw-patch descriptors: a 17x17 grayscale window around each keypoint,
/// mean-centered and scaled to unit norm. Windows read outside the image
/// as zero; keypoints on constant regions are dropped.
pub fn describe_raw(patch: &Raster<f32>, keypoints: &[Keypoint]) -> CdResult<Vec<Descriptor>> {
    check_bounds(patch, keypoints)?;
    let gray = if patch.channels() == 1 {
        patch.clone()
    } else {
        patch.to_gray()
    };
    let mut out = Vec::with_capacity(keypoints.len());
    for &k in keypoints {
        let mut v = Vec::with_capacity((2 * RAW_HALF as usize + 1).pow(2));
        for dy in -RAW_HALF..=RAW_HALF {
            for dx in -RAW_HALF..=RAW_HALF {
                v.push(gray.sample_bilinear(k.x + dx as f64, k.y + dy as f64, 0) as f32);
            }
        }
        let mean = (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32;
        for x in v.iter_mut() {
            *x -= mean;
        }
        if renormalize(&mut v) {
            out.push(Descriptor { keypoint: k, v });
        }
    }
    Ok(out)
}

/// Runs whichever descriptor path `source` selects.
pub fn describe_with(
    patch: &Raster<f32>,
    keypoints: &[Keypoint],
    source: DescriptorSource,
) -> CdResult<Vec<Descriptor>> {
    match source {
        DescriptorSource::Learned { encoder, head } => describe(patch, keypoints, encoder, head),
        DescriptorSource::RawPatch => describe_raw(patch, keypoints),
    }
}
