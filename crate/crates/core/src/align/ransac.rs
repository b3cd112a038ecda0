//! Robust homography estimation from thresholded matches.

use super::descriptor::Descriptor;
use super::dlt::{dlt_homography, PointPair};
use super::matching::Match;
use crate::error::{CdError, CdResult};
use crate::raster::Homography;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Matching and estimation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    /// Similarity threshold for retaining matches.
    pub tau: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inlier_threshold_px: 3.0,
            min_inliers: 12,
            tau: 0.85,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> CdResult<()> {
        if self.iterations == 0 {
            return Err(CdError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.inlier_threshold_px <= 0.0 {
            return Err(CdError::InvalidConfig(
                "inlier_threshold_px must be > 0".into(),
            ));
        }
        if self.min_inliers < 4 {
            return Err(CdError::InvalidConfig("min_inliers must be >= 4".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(CdError::InvalidConfig(format!(
                "tau must be in [-1, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

fn reprojection_error(h: &Homography<f64>, pair: &PointPair) -> f64 {
    let ((sx, sy), (dx, dy)) = *pair;
    match h.apply(sx, sy) {
        Ok((px, py)) => ((px - dx).powi(2) + (py - dy).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

/// True when any three of the points are nearly collinear (or coincident),
/// which makes a 4-point homography sample worthless.
fn sample_is_degenerate(pts: &[(f64, f64); 4]) -> bool {
    for i in 0..2 {
        for j in i + 1..3 {
            for k in j + 1..4 {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if cross.abs() < 1.0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Estimates the homography mapping `d1` keypoints onto `d2` keypoints.
///
/// Seeded minimal 4-point sampling; a point pair is an inlier when its
/// reprojection error is below `cfg.inlier_threshold_px`. The best consensus
/// set is refit with the full DLT, and the inlier list is recomputed under
/// that refit, so every returned index reprojects within the threshold.
/// Returns the homography and the retained indices into `matches`.
pub fn estimate_homography_ransac(
    matches: &[Match],
    d1: &[Descriptor],
    d2: &[Descriptor],
    cfg: &RansacConfig,
) -> CdResult<(Homography<f64>, Vec<usize>)> {
    cfg.validate()?;
    if matches.len() < 4 {
        return Err(CdError::Degenerate(format!(
            "RANSAC needs at least 4 matches, got {}",
            matches.len()
        )));
    }
    let pairs: Vec<PointPair> = matches
        .iter()
        .map(|m| {
            let a = &d1[m.i].keypoint;
            let b = &d2[m.j].keypoint;
            ((a.x, a.y), (b.x, b.y))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Homography<f64>)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, pairs.len(), 4);
        let quad = [
            pairs[idx.index(0)],
            pairs[idx.index(1)],
            pairs[idx.index(2)],
            pairs[idx.index(3)],
        ];
        let srcs = [quad[0].0, quad[1].0, quad[2].0, quad[3].0];
        if sample_is_degenerate(&srcs) {
            continue;
        }
        let Ok(h) = dlt_homography(&quad) else {
            continue;
        };
        let inliers = pairs
            .iter()
            .filter(|p| reprojection_error(&h, p) < cfg.inlier_threshold_px)
            .count();
        if best.as_ref().is_none_or(|(n, _)| inliers > *n) {
            best = Some((inliers, h));
        }
    }

    let Some((consensus, h0)) = best else {
        return Err(CdError::AlignmentFailed(
            "no valid minimal sample found".into(),
        ));
    };
    if consensus < 4 {
        return Err(CdError::AlignmentFailed(format!(
            "best consensus has only {consensus} inliers"
        )));
    }

    // refit on the full consensus, then recompute membership under the refit
    let consensus_pairs: Vec<PointPair> = pairs
        .iter()
        .filter(|p| reprojection_error(&h0, p) < cfg.inlier_threshold_px)
        .copied()
        .collect();
    let refit = dlt_homography(&consensus_pairs).unwrap_or(h0);
    let inlier_idx: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| reprojection_error(&refit, p) < cfg.inlier_threshold_px)
        .map(|(i, _)| i)
        .collect();
    if inlier_idx.len() < cfg.min_inliers {
        return Err(CdError::AlignmentFailed(format!(
            "{} inliers after refit, need {}",
            inlier_idx.len(),
            cfg.min_inliers
        )));
    }
    Ok((refit, inlier_idx))
}
