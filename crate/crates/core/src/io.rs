//! 8-bit PNG conversion: `v / 127.5 - 1` on read, `round((v + 1) * 127.5)`
//! on write.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{ensure, Error, Result};
use crate::nets::ImageTensor;

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Quantizes an image the way writing and re-reading it would.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    ImageTensor::new(img.pixels().mapv(|v| from_u8(to_u8(v)))).expect("quantized image is valid")
}

pub fn image_to_rgb(img: &ImageTensor) -> RgbImage {
    let r = img.resolution() as u32;
    let p = img.pixels();
    RgbImage::from_fn(r, r, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(p[[0, y, x]]), to_u8(p[[1, y, x]]), to_u8(p[[2, y, x]])])
    })
}

pub fn rgb_to_image(rgb: &RgbImage) -> Result<ImageTensor> {
    let (w, h) = rgb.dimensions();
    ensure!(w == h, Structural, "image must be square, got {w}x{h}");
    let px = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| from_u8(rgb.get_pixel(x as u32, y as u32)[c]));
    ImageTensor::new(px)
}

pub fn mask_to_gray(m: &Array2<f64>) -> GrayImage {
    let (h, w) = m.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([(255.0 * m[[y as usize, x as usize]].clamp(0.0, 1.0)).round() as u8]))
}

pub fn gray_to_mask(g: &GrayImage) -> Array2<f64> {
    let (w, h) = g.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
}

fn encode<I: image::ImageEncoder>(enc: I, raw: &[u8], w: u32, h: u32, color: image::ExtendedColorType) -> Result<()> {
    enc.write_image(raw, w, h, color).map_err(|e| Error::Image(e.to_string()))
}

pub fn image_png_bytes(img: &ImageTensor) -> Result<Vec<u8>> {
    let rgb = image_to_rgb(img);
    let mut out = Vec::new();
    encode(image::codecs::png::PngEncoder::new(&mut out), rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)?;
    Ok(out)
}

pub fn mask_png_bytes(m: &Array2<f64>) -> Result<Vec<u8>> {
    let g = mask_to_gray(m);
    let mut out = Vec::new();
    encode(image::codecs::png::PngEncoder::new(&mut out), g.as_raw(), g.width(), g.height(), image::ExtendedColorType::L8)?;
    Ok(out)
}

/// Decodes PNG (or any format the decoder recognizes) bytes into an image.
pub fn image_from_bytes(bytes: &[u8]) -> Result<ImageTensor> {
    let reader = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(|e| Error::Image(e.to_string()))?;
    let img = reader.decode().map_err(|e| Error::Image(e.to_string()))?;
    rgb_to_image(&img.to_rgb8())
}

/// Decodes an image and resizes it to `resolution`. Non-square inputs are
/// rejected rather than cropped.
pub fn image_from_bytes_at(bytes: &[u8], resolution: usize) -> Result<ImageTensor> {
    let reader = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(|e| Error::Image(e.to_string()))?;
    let rgb = reader.decode().map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    ensure!(w == h, Structural, "image must be square, got {w}x{h}");
    let r = resolution as u32;
    if w == r {
        return rgb_to_image(&rgb);
    }
    rgb_to_image(&image::imageops::resize(&rgb, r, r, image::imageops::FilterType::Triangle))
}

pub fn read_image_at(path: &Path, resolution: usize) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    image_from_bytes_at(&bytes, resolution)
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    image_from_bytes(&bytes)
}

pub fn write_image(img: &ImageTensor, path: &Path) -> Result<()> {
    std::fs::write(path, image_png_bytes(img)?)?;
    Ok(())
}

pub fn write_mask(m: &Array2<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, mask_png_bytes(m)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(gray_to_mask(&img.to_luma8()))
}
