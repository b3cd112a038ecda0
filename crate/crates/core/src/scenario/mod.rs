//! Synthetic bitemporal scenes: textured ground images, random perspective
//! distortions with exact ground-truth homographies, and toy change-detection
//! datasets with pixel-perfect masks.

use crate::align::dlt_homography;
use crate::error::{CdError, CdResult};
use crate::raster::{load_png, save_png, warp_perspective, Homography, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How strongly to bend one temporal frame away from the other.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionSpec {
    /// Maximum corner displacement as a fraction of min(H, W).
    pub max_corner_disp: f64,
    pub seed: u64,
}

impl Default for DistortionSpec {
    fn default() -> Self {
        Self {
            max_corner_disp: 0.05,
            seed: 0,
        }
    }
}

impl DistortionSpec {
    pub fn validate(&self) -> CdResult<()> {
        if !(0.0..0.25).contains(&self.max_corner_disp) {
            return Err(CdError::InvalidConfig(format!(
                "max_corner_disp must be in [0, 0.25), got {}",
                self.max_corner_disp
            )));
        }
        Ok(())
    }
}

/// One synthetic scene pair with its ground truth.
///
/// `h_gt` maps T1-frame coordinates into the T2 frame; `gt_mask` is binary
/// and lives in the T1 frame.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub t1: Raster<f32>,
    pub t2: Raster<f32>,
    pub gt_mask: Raster<f32>,
    pub h_gt: Homography<f64>,
}

/// The four pixel-center image corners, the reference points for both
/// distortion synthesis and alignment scoring.
pub fn scene_corners(h: usize, w: usize) -> [(f64, f64); 4] {
    let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
    [(0.0, 0.0), (wm, 0.0), (wm, hm), (0.0, hm)]
}

pub(crate) fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix-style decorrelation so each scene gets its own stream
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Bilinearly interpolated random lattice, one noise octave.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y / cell;
        let fy = (y % cell) as f64 / cell as f64;
        for x in 0..w {
            let gx = x / cell;
            let fx = (x % cell) as f64 / cell as f64;
            let a = grid[gy * gw + gx];
            let b = grid[gy * gw + gx + 1];
            let c = grid[(gy + 1) * gw + gx];
            let d = grid[(gy + 1) * gw + gx + 1];
            let top = a + (b - a) * fx;
            let bot = c + (d - c) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Deterministic ground texture: multi-octave value noise with hard-edged
/// bright and dark rectangles scattered over it.
pub fn gen_texture(h: usize, w: usize, seed: u64) -> CdResult<Raster<f32>> {
    if h < 64 || w < 64 {
        return Err(CdError::InvalidConfig(format!(
            "texture needs h, w >= 64, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; h * w];
    for (cell, amp) in [(32usize, 8.0), (16, 4.0), (8, 2.0), (4, 1.0)] {
        let layer = value_noise(h, w, cell, &mut rng);
        for (a, v) in acc.iter_mut().zip(layer) {
            *a += amp * v;
        }
    }
    // stretch to the full intensity range
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &acc {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    let mut data: Vec<f32> = acc.iter().map(|&v| ((v - lo) / span) as f32).collect();

    let n_rects = (h * w / 4096).max(4);
    for i in 0..n_rects {
        let side_y = rng.random_range(6..=24usize);
        let side_x = rng.random_range(6..=24usize);
        let y0 = rng.random_range(0..=h - side_y);
        let x0 = rng.random_range(0..=w - side_x);
        let v = if i % 2 == 0 { 0.95f32 } else { 0.05 };
        for y in y0..y0 + side_y {
            for x in x0..x0 + side_x {
                data[y * w + x] = v;
            }
        }
    }
    Raster::new(h, w, 1, data)
}

/// Quad convexity in corner order TL, TR, BR, BL: consecutive edge cross
/// products must share a sign.
fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Applies a random perspective to `src`: the four image corners move by
/// uniform offsets of at most `max_corner_disp * min(H, W)` pixels, the exact
/// homography is solved from those four pairs, and the image is warped by it.
///
/// Returns the distorted raster together with the forward homography mapping
/// source coordinates into the distorted frame.
pub fn synth_perspective(
    src: &Raster<f32>,
    spec: &DistortionSpec,
) -> CdResult<(Raster<f32>, Homography<f64>)> {
    spec.validate()?;
    let (h, w) = (src.height(), src.width());
    if spec.max_corner_disp == 0.0 {
        return Ok((src.clone(), Homography::identity()));
    }
    let d = spec.max_corner_disp * h.min(w) as f64;
    let corners = scene_corners(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // a self-intersecting or concave draw is resampled, never surfaced
    let h_fwd = loop {
        let moved: Vec<(f64, f64)> = corners
            .iter()
            .map(|&(x, y)| {
                (
                    x + rng.random_range(-d..=d),
                    y + rng.random_range(-d..=d),
                )
            })
            .collect();
        let quad = [moved[0], moved[1], moved[2], moved[3]];
        if !is_convex(&quad) {
            continue;
        }
        let pairs: Vec<_> = corners.iter().copied().zip(moved).collect();
        match dlt_homography(&pairs) {
            Ok(hh) => break hh,
            Err(_) => continue,
        }
    };
    let distorted = warp_perspective(src, &h_fwd, h, w)?;
    Ok((distorted, h_fwd))
}

fn paint_rect(
    data: &mut [f32],
    mask: &mut [f32],
    w: usize,
    y0: usize,
    x0: usize,
    sy: usize,
    sx: usize,
    value: f32,
) -> usize {
    let mut fresh = 0;
    for y in y0..y0 + sy {
        for x in x0..x0 + sx {
            let i = y * w + x;
            data[i] = value;
            if mask[i] == 0.0 {
                mask[i] = 1.0;
                fresh += 1;
            }
        }
    }
    fresh
}

/// Generates `n_pairs` toy scenes. T1 is a texture; T2 starts as T1 with
/// solid rectangles painted over roughly `change_rate` of its pixels, then
/// gets perspective-distorted. The mask marks the painted rectangles in the
/// T1 frame.
pub fn gen_toy_cd_dataset(
    n_pairs: usize,
    size: usize,
    change_rate: f64,
    spec: &DistortionSpec,
    seed: u64,
) -> CdResult<Vec<ToyScene>> {
    if n_pairs == 0 {
        return Err(CdError::InvalidConfig("n_pairs must be >= 1".into()));
    }
    if !(0.0..=0.5).contains(&change_rate) {
        return Err(CdError::InvalidConfig(format!(
            "change_rate must be in [0, 0.5], got {change_rate}"
        )));
    }
    spec.validate()?;

    (0..n_pairs)
        .map(|i| {
            let scene_seed = derive_seed(seed, i as u64);
            let t1 = gen_texture(size, size, scene_seed)?;

            let mut changed = t1.data().to_vec();
            let mut mask = vec![0.0f32; size * size];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, 1));
            let target = (change_rate * (size * size) as f64) as usize;
            let mut covered = 0usize;
            while covered < target {
                let sy = rng.random_range(8..=32usize).min(size);
                let sx = rng.random_range(8..=32usize).min(size);
                let y0 = rng.random_range(0..=size - sy);
                let x0 = rng.random_range(0..=size - sx);
                let value = if rng.random::<bool>() {
                    rng.random_range(0.85..0.98)
                } else {
                    rng.random_range(0.02..0.15)
                };
                covered += paint_rect(&mut changed, &mut mask, size, y0, x0, sy, sx, value);
            }

            let t2_base = Raster::new(size, size, 1, changed)?;
            let scene_spec = DistortionSpec {
                max_corner_disp: spec.max_corner_disp,
                seed: derive_seed(scene_seed, 2),
            };
            let (t2, h_gt) = synth_perspective(&t2_base, &scene_spec)?;
            Ok(ToyScene {
                t1,
                t2,
                gt_mask: Raster::new(size, size, 1, mask)?,
                h_gt,
            })
        })
        .collect()
}

/// Pre-training corpus: `n` square texture patches, alternating well-exposed
/// and underexposed (the texture scaled close to black). The dark cohort
/// gives the photometric augmentation real work: a strong negative bias
/// clamps such a view to zero and the embedding has to learn to survive it.
pub fn gen_pretext_corpus(n: usize, side: usize, seed: u64) -> CdResult<Vec<Raster<f32>>> {
    (0..n)
        .map(|i| {
            let ps = derive_seed(seed, i as u64);
            let tex = gen_texture(side, side, ps)?;
            if i % 2 == 0 {
                return Ok(tex);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ps, 1));
            let scale: f32 = rng.random_range(0.01..0.03);
            Raster::from_fn(side, side, 1, |x, y, _| tex.get(x, y, 0) * scale)
        })
        .collect()
}

/// Mean distance in pixels between the images of the four scene corners
/// under the two homographies.
pub fn alignment_error(
    h_est: &Homography<f64>,
    h_gt: &Homography<f64>,
    h: usize,
    w: usize,
) -> CdResult<f64> {
    let mut total = 0.0;
    for (x, y) in scene_corners(h, w) {
        let (ex, ey) = h_est.apply(x, y)?;
        let (gx, gy) = h_gt.apply(x, y)?;
        total += ((ex - gx).powi(2) + (ey - gy).powi(2)).sqrt();
    }
    Ok(total / 4.0)
}

/// Writes a scene bundle: `t1.png`, `t2.png`, `gt.png`, `h_gt.json`.
pub fn save_scene(dir: &Path, scene: &ToyScene) -> CdResult<()> {
    std::fs::create_dir_all(dir)?;
    save_png(&scene.t1, dir.join("t1.png"))?;
    save_png(&scene.t2, dir.join("t2.png"))?;
    save_png(&scene.gt_mask, dir.join("gt.png"))?;
    let json = serde_json::to_string(&scene.h_gt)
        .map_err(|e| CdError::Geometry(format!("homography serialization: {e}")))?;
    std::fs::write(dir.join("h_gt.json"), json)?;
    Ok(())
}

/// Reads a scene bundle written by [`save_scene`]. Intensities come back
/// 8-bit quantized; the mask is re-binarized at 0.5.
pub fn load_scene(dir: &Path) -> CdResult<ToyScene> {
    let t1 = load_png(&dir.join("t1.png"))?;
    let t2 = load_png(&dir.join("t2.png"))?;
    let gt_raw: Raster<f32> = load_png(&dir.join("gt.png"))?;
    let gt_mask = Raster::new(
        gt_raw.height(),
        gt_raw.width(),
        1,
        gt_raw
            .to_gray()
            .data()
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let json = std::fs::read_to_string(dir.join("h_gt.json"))?;
    let h_gt: Homography<f64> = serde_json::from_str(&json)
        .map_err(|e| CdError::Geometry(format!("h_gt.json: {e}")))?;
    Ok(ToyScene {
        t1,
        t2,
        gt_mask,
        h_gt,
    })
}
