//! Lossless 8-bit PNG persistence for images, masks and saliency maps.

use std::path::Path;

use image::{ColorType, ImageReader};

use crate::decoygen::{BinaryMask, LabeledImage};
use crate::error::{Error, Result};

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, buf: &[u8], w: usize, h: usize, color: ColorType) -> Result<()> {
    image::save_buffer(path, buf, w as u32, h as u32, color).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_image(path: &Path, img: &LabeledImage) -> Result<()> {
    let buf: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let color = if img.channels() == 1 { ColorType::L8 } else { ColorType::Rgb8 };
    save(path, &buf, img.width(), img.height(), color)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let buf: Vec<u8> = mask.values().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    save(path, &buf, mask.width(), mask.height(), ColorType::L8)
}

/// Grayscale export of a `[0,1]` map.
pub fn write_gray(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    let buf: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    save(path, &buf, width, height, ColorType::L8)
}

pub fn write_rgb(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    save(path, rgb, width, height, ColorType::Rgb8)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Reads a grayscale or RGB image (alpha is dropped) as `[0,1]` floats.
pub fn read_image(path: &Path, label: usize) -> Result<LabeledImage> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img.color().channel_count() {
        1 | 2 => (1, img.into_luma8().into_raw()),
        _ => (3, img.into_rgb8().into_raw()),
    };
    let pixels = raw.into_iter().map(|v| f32::from(v) / 255.0).collect();
    LabeledImage::new(h, w, channels, pixels, label)
}

/// Reads a grayscale map as `[0,1]` floats (used for provided segmentations).
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()))
}

/// Masks are stored as 0/255; anything at or above 128 reads as set.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (h, w, vals) = read_gray(path)?;
    BinaryMask::from_values(h, w, vals.into_iter().map(|v| u8::from(v >= 0.5)).collect())
}
