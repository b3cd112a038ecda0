//! Whole-scene calibration: tile the two temporal frames, gather keypoints
//! and descriptors, match, and solve one global homography.

use super::descriptor::{describe_with, Descriptor, DescriptorSource};
use super::harris::{detect_keypoints, Keypoint};
use super::matching::match_descriptors;
use super::ransac::{estimate_homography_ransac, RansacConfig};
use crate::error::{CdError, CdResult};
use crate::raster::{tile_grid, warp_perspective, Homography, Raster};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Outcome summary of one scene calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignReport {
    pub matches: usize,
    pub inliers: usize,
    pub mean_error_px: f64,
    pub homography: Homography<f64>,
}

const TILE: usize = 256;
const TILE_STRIDE: usize = 192;
const MAX_K_PER_TILE: usize = 300;
const NMS_RADIUS: f64 = 6.0;

/// Detects and describes keypoints over overlapping tiles, reporting them
/// in whole-scene coordinates. Duplicates from tile overlap are removed by
/// a second strongest-first suppression pass.
fn scene_descriptors(scene: &Raster<f32>, source: DescriptorSource) -> CdResult<Vec<Descriptor>> {
    let windows = tile_grid(scene.height(), scene.width(), TILE, TILE_STRIDE)?;
    let per_tile: Vec<CdResult<Vec<Descriptor>>> = windows
        .par_iter()
        .map(|win| {
            let crop = scene.crop(*win)?;
            let gray = if crop.channels() == 1 {
                crop.clone()
            } else {
                crop.to_gray()
            };
            let kps = detect_keypoints(&gray, MAX_K_PER_TILE, NMS_RADIUS)?;
            let descs = describe_with(&crop, &kps, source)?;
            Ok(descs
                .into_iter()
                .map(|d| Descriptor {
                    keypoint: Keypoint {
                        x: d.keypoint.x + win.x0 as f64,
                        y: d.keypoint.y + win.y0 as f64,
                        score: d.keypoint.score,
                    },
                    v: d.v,
                })
                .collect())
        })
        .collect();

    let mut all: Vec<Descriptor> = Vec::new();
    for r in per_tile {
        all.extend(r?);
    }
    all.sort_by(|a, b| {
        b.keypoint
            .score
            .partial_cmp(&a.keypoint.score)
            .unwrap()
            .then(
                (a.keypoint.y, a.keypoint.x)
                    .partial_cmp(&(b.keypoint.y, b.keypoint.x))
                    .unwrap(),
            )
    });
    let r2 = NMS_RADIUS * NMS_RADIUS;
    let mut kept: Vec<Descriptor> = Vec::new();
    for d in all {
        if kept.iter().any(|k| {
            (k.keypoint.x - d.keypoint.x).powi(2) + (k.keypoint.y - d.keypoint.y).powi(2) < r2
        }) {
            continue;
        }
        kept.push(d);
    }
    Ok(kept)
}

/// Calibrates T2 onto T1: estimates the homography mapping T2 coordinates
/// into the T1 frame and warps T2 onto T1's extent.
///
/// Returns the calibrated raster, the homography, and a report with match
/// and inlier counts plus the mean inlier reprojection error.
pub fn align_scene(
    t1: &Raster<f32>,
    t2: &Raster<f32>,
    source: DescriptorSource,
    cfg: &RansacConfig,
) -> CdResult<(Raster<f32>, Homography<f64>, AlignReport)> {
    cfg.validate()?;
    for (name, s) in [("t1", t1), ("t2", t2)] {
        if s.height() < TILE || s.width() < TILE {
            return Err(CdError::InvalidRaster(format!(
                "{name} is {}x{}, scene alignment needs at least {TILE}x{TILE}",
                s.height(),
                s.width()
            )));
        }
    }

    let d2 = scene_descriptors(t2, source)?;
    let d1 = scene_descriptors(t1, source)?;
    if d1.len() < 4 || d2.len() < 4 {
        return Err(CdError::AlignmentFailed(format!(
            "too few keypoints to align ({} in t1, {} in t2)",
            d1.len(),
            d2.len()
        )));
    }

    // match T2 against T1 so the homography maps T2 into the T1 frame
    let matches = match_descriptors(&d2, &d1, cfg)?;
    if matches.len() < 4 {
        return Err(CdError::AlignmentFailed(format!(
            "only {} descriptor matches above tau",
            matches.len()
        )));
    }
    let (h, inliers) = estimate_homography_ransac(&matches, &d2, &d1, cfg)?;

    let mean_error_px = inliers
        .iter()
        .map(|&k| {
            let m = &matches[k];
            let a = &d2[m.i].keypoint;
            let b = &d1[m.j].keypoint;
            let (px, py) = h.apply(a.x, a.y).expect("inliers project finitely");
            ((px - b.x).powi(2) + (py - b.y).powi(2)).sqrt()
        })
        .sum::<f64>()
        / inliers.len() as f64;

    let calibrated = warp_perspective(t2, &h, t1.height(), t1.width())?;
    let report = AlignReport {
        matches: matches.len(),
        inliers: inliers.len(),
        mean_error_px,
        homography: h.clone(),
    };
    Ok((calibrated, h, report))
}
