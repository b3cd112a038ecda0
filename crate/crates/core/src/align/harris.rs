//! Harris corner detection with greedy radius suppression and sub-pixel
//! refinement.

use crate::error::{CdError, CdResult};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// A detected corner at sub-pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

const HARRIS_K: f64 = 0.04;
/// Responses at or below this are indistinguishable from rounding dust.
const RESPONSE_FLOOR: f64 = 1e-12;

/// Harris response map of a single-channel image, f64 throughout.
/// Border pixels (no full 3x3 support) stay zero.
fn harris_response<S: Scalar>(gray: &Raster<S>) -> Vec<f64> {
    let (h, w) = (gray.height(), gray.width());
    let img: Vec<f64> = gray.data().iter().map(|v| v.to64()).collect();
    let at = |x: usize, y: usize| img[y * w + x];

    let mut gx = vec![0.0f64; h * w];
    let mut gy = vec![0.0f64; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            gx[y * w + x] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[y * w + x] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }

    let mut ixx = vec![0.0f64; h * w];
    let mut iyy = vec![0.0f64; h * w];
    let mut ixy = vec![0.0f64; h * w];
    for i in 0..h * w {
        ixx[i] = gx[i] * gx[i];
        iyy[i] = gy[i] * gy[i];
        ixy[i] = gx[i] * gy[i];
    }

    // 3x3 binomial window approximating the Gaussian
    let smooth = |src: &[f64]| {
        let mut out = vec![0.0f64; h * w];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 0.0;
                for (dy, wy) in [(0usize, 1.0f64), (1, 2.0), (2, 1.0)] {
                    for (dx, wx) in [(0usize, 1.0f64), (1, 2.0), (2, 1.0)] {
                        acc += wy * wx * src[(y + dy - 1) * w + (x + dx - 1)];
                    }
                }
                out[y * w + x] = acc / 16.0;
            }
        }
        out
    };
    let sxx = smooth(&ixx);
    let syy = smooth(&iyy);
    let sxy = smooth(&ixy);

    let mut resp = vec![0.0f64; h * w];
    for i in 0..h * w {
        let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
        let tr = sxx[i] + syy[i];
        resp[i] = det - HARRIS_K * tr * tr;
    }
    resp
}

/// Quadratic-fit peak offset from a 1D triple, clamped to half a pixel.
fn subpixel_offset(lo: f64, mid: f64, hi: f64) -> f64 {
    let denom = lo - 2.0 * mid + hi;
    if denom.abs() < 1e-18 {
        return 0.0;
    }
    (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
}

/// Detects corners: Harris response, strongest-first greedy suppression by
/// `nms_radius`, at most `max_k` results ordered by descending score.
/// A constant image yields an empty list.
pub fn detect_keypoints<S: Scalar>(
    gray: &Raster<S>,
    max_k: usize,
    nms_radius: f64,
) -> CdResult<Vec<Keypoint>> {
    if gray.channels() != 1 {
        return Err(CdError::InvalidRaster(format!(
            "corner detection expects 1 channel, got {}",
            gray.channels()
        )));
    }
    let (h, w) = (gray.height(), gray.width());
    if h < 16 || w < 16 {
        return Err(CdError::InvalidRaster(format!(
            "corner detection needs at least 16x16, got {h}x{w}"
        )));
    }
    if max_k == 0 || nms_radius <= 0.0 {
        return Err(CdError::InvalidConfig(
            "max_k must be >= 1 and nms_radius > 0".into(),
        ));
    }

    let resp = harris_response(gray);
    let mut order: Vec<usize> = (0..h * w)
        .filter(|&i| resp[i] > RESPONSE_FLOOR)
        .collect();
    order.sort_by(|&a, &b| resp[b].partial_cmp(&resp[a]).unwrap().then(a.cmp(&b)));

    let r2 = nms_radius * nms_radius;
    let mut kept: Vec<Keypoint> = Vec::new();
    for i in order {
        if kept.len() >= max_k {
            break;
        }
        // refine first so the suppression distance holds on the final
        // coordinates
        let (xi, yi) = (i % w, i / w);
        let (mut x, mut y) = (xi as f64, yi as f64);
        if xi > 0 && xi < w - 1 && yi > 0 && yi < h - 1 {
            x += subpixel_offset(resp[i - 1], resp[i], resp[i + 1]);
            y += subpixel_offset(resp[i - w], resp[i], resp[i + w]);
        }
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        if kept
            .iter()
            .any(|k| (k.x - x).powi(2) + (k.y - y).powi(2) < r2)
        {
            continue;
        }
        kept.push(Keypoint {
            x,
            y,
            score: resp[i],
        });
    }
    Ok(kept)
}
