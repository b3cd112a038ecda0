use super::Raster;
use crate::error::{CdError, CdResult};
use crate::scalar::Scalar;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

fn decode_err(path: &Path, reason: impl ToString) -> CdError {
    CdError::Decode {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn encode_err(path: &Path, reason: impl ToString) -> CdError {
    CdError::Encode {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Loads an 8- or 16-bit grayscale or RGB PNG, scaling samples to `[0, 1]`.
///
/// Alpha channels are dropped; palette and sub-byte bit depths are rejected.
pub fn load_png<S: Scalar>(path: impl AsRef<Path>) -> CdResult<Raster<S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| decode_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let buf_len = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image dimensions overflow"))?;
    let mut buf = vec![0u8; buf_len];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(path, e))?;
    let bytes = &buf[..info.buffer_size()];

    let (in_ch, out_ch) = match info.color_type {
        png::ColorType::Grayscale => (1usize, 1usize),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(decode_err(path, "palette PNGs are not supported"));
        }
    };
    let width = info.width as usize;
    let height = info.height as usize;
    let mut data = Vec::with_capacity(height * width * out_ch);
    match info.bit_depth {
        png::BitDepth::Eight => {
            for px in bytes.chunks_exact(in_ch) {
                for &b in &px[..out_ch] {
                    data.push(S::from64(b as f64 / 255.0));
                }
            }
        }
        png::BitDepth::Sixteen => {
            // network byte order, two bytes per sample
            for px in bytes.chunks_exact(2 * in_ch) {
                for s in px.chunks_exact(2).take(out_ch) {
                    let v = u16::from_be_bytes([s[0], s[1]]);
                    data.push(S::from64(v as f64 / 65535.0));
                }
            }
        }
        other => {
            return Err(decode_err(
                path,
                format!("unsupported bit depth {other:?} (need 8 or 16)"),
            ));
        }
    }
    Raster::new(height, width, out_ch, data)
}

/// Writes a raster as an 8-bit grayscale or RGB PNG.
pub fn save_png<S: Scalar>(raster: &Raster<S>, path: impl AsRef<Path>) -> CdResult<()> {
    let path = path.as_ref();
    let color = match raster.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(encode_err(path, format!("cannot encode {n} channels"))),
    };
    let file = File::create(path).map_err(|e| encode_err(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        raster.width() as u32,
        raster.height() as u32,
    );
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| encode_err(path, e))?;
    let bytes: Vec<u8> = raster
        .data()
        .iter()
        .map(|v| (v.to64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| encode_err(path, e))?;
    Ok(())
}
