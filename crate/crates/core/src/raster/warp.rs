use super::{Homography, Raster};
use crate::error::CdResult;
use crate::scalar::Scalar;
use rayon::prelude::*;

/// Warps `src` by `H` into an `out_h` x `out_w` canvas.
///
/// Inverse mapping: output pixel `(x, y)` bilinearly samples `src` at
/// `H^-1 (x, y)`, so `H` maps source coordinates into output coordinates.
/// Source lookups outside the image (or behind the horizon line of a strong
/// perspective) fill with zero.
pub fn warp_perspective<S: Scalar>(
    src: &Raster<S>,
    h: &Homography<f64>,
    out_h: usize,
    out_w: usize,
) -> CdResult<Raster<S>> {
    // Coordinate math always runs in f64 regardless of the sample type.
    let hinv = h.inverse()?;
    let channels = src.channels();
    let rows: Vec<Vec<S>> = (0..out_h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(out_w * channels);
            for x in 0..out_w {
                match hinv.apply(x as f64, y as f64) {
                    Ok((sx, sy)) => {
                        for c in 0..channels {
                            row.push(src.sample_bilinear(sx, sy, c));
                        }
                    }
                    Err(_) => row.extend(std::iter::repeat(S::zero()).take(channels)),
                }
            }
            row
        })
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w * channels);
    for row in rows {
        data.extend_from_slice(&row);
    }
    Raster::new(out_h, out_w, channels, data)
}
