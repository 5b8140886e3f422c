//! 8-bit PNG encoding of colour images and masks.

use std::path::Path;

use super::read_artifact;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image with values in `[0, 1]` (clamped).
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).expect("sized").save(path)?,
        3 => image::RgbImage::from_raw(w, h, bytes).expect("sized").save(path)?,
        c => return Err(Error::InvalidInput(format!("PNG output needs 1 or 3 channels, got {c}"))),
    }
    Ok(())
}

/// Reads any PNG as RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = read_artifact(path)?;
    let rgb = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image { width: w, height: h, channels: 3, data: rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect() })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes).expect("sized").save(path)?;
    Ok(())
}

/// Pixels with luma of at least one half are set.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = read_artifact(path)?;
    let luma = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Ok(Mask { width: w, height: h, data: luma.into_raw().into_iter().map(|b| b >= 128).collect() })
}
