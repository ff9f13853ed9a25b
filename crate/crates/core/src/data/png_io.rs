//! Minimal PNG reading and writing for RGB frames and indexed label masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::mask::LabelMask;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// 8-bit RGB pixels, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

/// Reads any 8/16-bit PNG and converts it to RGB, dropping alpha.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.line_size;
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    let mut pixels = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        let row = &buf[r * stride..r * stride + w * channels];
        for px in row.chunks_exact(channels) {
            if channels < 3 {
                pixels.extend_from_slice(&[px[0]; 3]);
            } else {
                pixels.extend_from_slice(&px[..3]);
            }
        }
    }
    RgbImage::new(h, w, pixels)
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer
        .write_image_data(&image.pixels)
        .map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Reads raw 8-bit indices from an indexed or grayscale PNG.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if !matches!(info.color_type, ColorType::Indexed | ColorType::Grayscale)
        || info.bit_depth != BitDepth::Eight
    {
        return Err(image_err(
            path,
            format!(
                "mask must be 8-bit indexed or grayscale, found {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        data.extend_from_slice(&buf[r * info.line_size..r * info.line_size + w]);
    }
    LabelMask::new(h, w, data)
}

/// Writes `mask` as an 8-bit indexed PNG with a full 256-entry palette.
pub fn write_mask(path: &Path, mask: &LabelMask, palette: &[[u8; 3]]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    enc.set_color(ColorType::Indexed);
    enc.set_depth(BitDepth::Eight);
    let flat: Vec<u8> = (0..256)
        .flat_map(|i| palette.get(i).copied().unwrap_or([0, 0, 0]))
        .collect();
    enc.set_palette(flat);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer
        .write_image_data(mask.data())
        .map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Palette stored in an indexed PNG, as RGB triples.
pub fn read_palette(path: &Path) -> Result<Vec<[u8; 3]>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| image_err(path, e))?;
    let pal = reader
        .info()
        .palette
        .as_ref()
        .ok_or_else(|| image_err(path, "no palette"))?;
    Ok(pal.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}
