//! Mask PNG files: 8-bit single channel, pixel value = class id.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use super::SegMask;
use crate::error::{Error, Result};

fn png_err(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

/// PASCAL VOC colour map entry for `index`.
pub fn voc_color(index: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = index;
    for shift in (0..8).rev() {
        for (ch, bit) in rgb.iter_mut().zip(0..3) {
            *ch |= ((c >> bit) & 1) << shift;
        }
        c >>= 3;
    }
    rgb
}

fn encode(
    path: &Path,
    width: u32,
    height: u32,
    color: ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    if let Some(palette) = palette {
        encoder.set_palette(palette);
    }
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Writes an 8-bit grayscale PNG whose pixel values are the labels.
pub fn write_mask(mask: &SegMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    encode(path, mask.width(), mask.height(), ColorType::Grayscale, None, mask.data())
}

/// Writes an indexed PNG with the VOC palette. Indices are still the labels,
/// so [`read_mask`] round-trips it too.
pub fn write_color_mask(mask: &SegMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let palette = (0..=255u8).flat_map(voc_color).collect();
    encode(
        path,
        mask.width(),
        mask.height(),
        ColorType::Indexed,
        Some(palette),
        mask.data(),
    )
}

/// Reads an 8-bit grayscale or indexed PNG as raw labels. The legend is
/// every class value present.
pub fn read_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let (color, depth) = reader.output_color_type();
    if !matches!(color, ColorType::Grayscale | ColorType::Indexed) || depth != BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: expected an 8-bit single-channel mask, found {color:?} at {depth:?}",
            path.display()
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w]);
    }
    SegMask::from_labels(info.width, info.height, data)
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

/// Reads any 8-bit PNG as RGB (alpha dropped, gray replicated).
pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * channels].chunks(channels) {
            match channels {
                1 | 2 => data.extend_from_slice(&[px[0]; 3]),
                _ => data.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(RgbImage {
        width: info.width,
        height: info.height,
        data,
    })
}

/// Blends the palette-coloured mask over `image` at alpha 0.5. Background
/// pixels are left as they are.
pub fn write_overlay(image: &RgbImage, mask: &SegMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if (image.width, image.height) != (mask.width(), mask.height()) {
        return Err(Error::Shape(format!(
            "image is {}x{}, mask {}x{}",
            image.width,
            image.height,
            mask.width(),
            mask.height()
        )));
    }
    let mut out = image.data.clone();
    for (px, &label) in out.chunks_mut(3).zip(mask.data()) {
        if label == crate::BACKGROUND {
            continue;
        }
        let color = voc_color(label);
        for (c, m) in px.iter_mut().zip(color) {
            *c = (u16::from(*c) + u16::from(m)).div_ceil(2) as u8;
        }
    }
    encode(path, image.width, image.height, ColorType::Rgb, None, &out)
}
