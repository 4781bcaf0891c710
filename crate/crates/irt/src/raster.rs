//! 8/16-bit PNG read and write.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{IrtError, Result};

/// A decoded raster: `channels` interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> IrtError {
    IrtError::Image { path: path.into(), detail: e.to_string() }
}

fn write(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| IrtError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| IrtError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header().map_err(|e| image_err(path, e))?;
    w.write_image_data(data).map_err(|e| image_err(path, e))?;
    w.finish().map_err(|e| image_err(path, e))
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, data)
}

pub fn write_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, data)
}

pub fn write_gray16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

fn open(path: &Path) -> Result<png::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| IrtError::io(path, e))?;
    png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| image_err(path, e))
}

/// Width and height from the header only.
pub fn dimensions(path: &Path) -> Result<(usize, usize)> {
    let r = open(path)?;
    let info = r.info();
    Ok((info.width as usize, info.height as usize))
}

/// Reads an 8-bit grayscale or RGB PNG.
pub fn read8(path: &Path) -> Result<Raster> {
    let mut r = open(path)?;
    let (color, depth) = r.output_color_type();
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    if depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("expected 8-bit samples, found {depth:?}")));
    }
    let size = r.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = r.next_frame(&mut data).map_err(|e| image_err(path, e))?;
    data.truncate(info.buffer_size());
    Ok(Raster { width: info.width as usize, height: info.height as usize, channels, data })
}

/// `[0, 1]` intensities to 8-bit, rounding to nearest.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(values: &[u8]) -> Vec<f64> {
    values.iter().map(|&v| v as f64 / 255.0).collect()
}
