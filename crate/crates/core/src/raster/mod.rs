//! Image data model, PNG I/O, patch geometry and perspective warping.

mod homography;
mod io;
mod warp;

pub use homography::{apply_homography_point, Homography};
pub use io::{load_png, save_png};
pub use warp::warp_perspective;

use crate::error::{CdError, CdResult};
use crate::scalar::Scalar;

/// Row-major floating-point image with samples in `[0, 1]`.
///
/// Carries all bitemporal imagery, patches and masks. Immutable once built;
/// the constructors enforce the value range so downstream code never has to
/// re-check it.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<S: Scalar> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> Raster<S> {
    /// Builds a raster, validating shape and sample range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> CdResult<Self> {
        if height == 0 || width == 0 {
            return Err(CdError::InvalidRaster(format!(
                "empty raster {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(CdError::InvalidRaster(format!(
                "unsupported channel count {channels} (expected 1 or 3)"
            )));
        }
        if data.len() != height * width * channels {
            return Err(CdError::InvalidRaster(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        let zero = S::zero();
        let one = S::one();
        for &v in &data {
            if !v.is_finite() || v < zero || v > one {
                return Err(CdError::InvalidRaster(format!(
                    "sample {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// All-zero raster.
    pub fn zeros(height: usize, width: usize, channels: usize) -> CdResult<Self> {
        Self::new(height, width, channels, vec![S::zero(); height * width * channels])
    }

    /// Builds a raster from a per-pixel function `(x, y, c) -> value`.
    /// Values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> CdResult<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).max(S::zero()).min(S::one()));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> S {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear sample at floating-point coordinates; zero outside bounds.
    ///
    /// Pixel `(x, y)` is located at coordinate `(x, y)` exactly, so sampling
    /// at integer coordinates returns the stored value.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> S {
        let w = self.width as isize;
        let h = self.height as isize;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;

        let fetch = |xi: isize, yi: isize| -> f64 {
            if xi < 0 || yi < 0 || xi >= w || yi >= h {
                0.0
            } else {
                self.get(xi as usize, yi as usize, c).to64()
            }
        };

        let v00 = fetch(x0, y0);
        let v01 = fetch(x0 + 1, y0);
        let v10 = fetch(x0, y0 + 1);
        let v11 = fetch(x0 + 1, y0 + 1);
        let top = v00 * (1.0 - fx) + v01 * fx;
        let bot = v10 * (1.0 - fx) + v11 * fx;
        S::from64(top * (1.0 - fy) + bot * fy)
    }

    /// Channel-mean grayscale copy. Identity for single-channel rasters.
    pub fn to_gray(&self) -> Raster<S> {
        if self.channels == 1 {
            return self.clone();
        }
        let inv = S::from64(1.0 / self.channels as f64);
        let mut data = Vec::with_capacity(self.height * self.width);
        for px in self.data.chunks_exact(self.channels) {
            let sum: S = px.iter().copied().sum();
            data.push((sum * inv).min(S::one()));
        }
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Extracts the square sub-image under `window` (must lie inside).
    pub fn crop(&self, window: Window) -> CdResult<Raster<S>> {
        if window.x0 + window.size > self.width || window.y0 + window.size > self.height {
            return Err(CdError::Geometry(format!(
                "window {window:?} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(window.size * window.size * self.channels);
        for y in window.y0..window.y0 + window.size {
            let row = &self.data
                [(y * self.width + window.x0) * self.channels..(y * self.width + window.x0 + window.size) * self.channels];
            data.extend_from_slice(row);
        }
        Ok(Raster {
            height: window.size,
            width: window.size,
            channels: self.channels,
            data,
        })
    }

    /// Casts samples to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Raster<T> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| T::from64(v.to64()).max(T::zero()).min(T::one()))
                .collect(),
        }
    }
}

/// Square pixel window used for tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

/// Row-major tiling of an `h x w` extent with `tile`-sized windows.
///
/// The final window of each row/column is clamped so it ends exactly at the
/// image border; overlap is allowed and every pixel is covered. A stride
/// larger than the tile would leave gaps, so the effective step is capped at
/// `tile`.
pub fn tile_grid(h: usize, w: usize, tile: usize, stride: usize) -> CdResult<Vec<Window>> {
    if tile == 0 || tile > h || tile > w {
        return Err(CdError::Geometry(format!(
            "tile {tile} does not fit inside {h}x{w}"
        )));
    }
    if stride == 0 {
        return Err(CdError::Geometry("stride must be >= 1".into()));
    }
    let step = stride.min(tile);
    let starts = |dim: usize| -> Vec<usize> {
        let mut v = Vec::new();
        let mut pos = 0;
        loop {
            if pos + tile >= dim {
                v.push(dim - tile);
                break;
            }
            v.push(pos);
            pos += step;
        }
        v
    };
    let xs = starts(w);
    let ys = starts(h);
    let mut windows = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            windows.push(Window { x0, y0, size: tile });
        }
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn raster_rejects_bad_lengths_and_samples() {
        assert!(Raster::<f32>::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Raster::<f32>::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(Raster::<f32>::new(2, 2, 1, vec![0.0, 0.5, 1.0, f32::NAN]).is_err());
        assert!(Raster::<f32>::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Raster::<f32>::new(2, 2, 1, vec![0.0, 0.25, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn tile_grid_exact_partition() {
        let ws = tile_grid(512, 512, 256, 256).unwrap();
        let positions: Vec<(usize, usize)> = ws.iter().map(|w| (w.x0, w.y0)).collect();
        assert_eq!(positions, vec![(0, 0), (256, 0), (0, 256), (256, 256)]);
    }

    #[test]
    fn tile_grid_clamps_last_window() {
        let ws = tile_grid(300, 300, 256, 256).unwrap();
        let positions: Vec<(usize, usize)> = ws.iter().map(|w| (w.x0, w.y0)).collect();
        assert_eq!(positions, vec![(0, 0), (44, 0), (0, 44), (44, 44)]);
    }

    #[test]
    fn tile_grid_single_window_when_tile_covers() {
        let ws = tile_grid(256, 256, 256, 128).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0], Window { x0: 0, y0: 0, size: 256 });
    }

    #[test]
    fn tile_grid_rejects_oversized_tile() {
        assert!(tile_grid(100, 300, 256, 256).is_err());
    }

    #[test]
    fn bilinear_sample_matches_integer_coordinates() {
        let r = Raster::<f64>::new(2, 2, 1, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(r.sample_bilinear(1.0, 1.0, 0), 1.0);
        // midpoint of the four pixels
        let mid = r.sample_bilinear(0.5, 0.5, 0);
        assert!((mid - 0.4375).abs() < 1e-12);
        // outside: zero fill
        assert_eq!(r.sample_bilinear(-5.0, 0.0, 0), 0.0);
    }

    proptest! {
        #[test]
        fn tile_grid_covers_every_pixel(
            h in 32usize..200,
            w in 32usize..200,
            tile in 8usize..32,
            stride in 1usize..40,
        ) {
            let ws = tile_grid(h, w, tile, stride).unwrap();
            let mut covered = vec![false; h * w];
            for win in &ws {
                prop_assert!(win.x0 + win.size <= w);
                prop_assert!(win.y0 + win.size <= h);
                for y in win.y0..win.y0 + win.size {
                    for x in win.x0..win.x0 + win.size {
                        covered[y * w + x] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
