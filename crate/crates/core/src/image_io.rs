//! PNG conversion. Images live in `[-1, 1]` as `[3, H, W]` tensors and are
//! stored as 8-bit RGB.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

pub fn to_rgb_image(img: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = img.chw();
    if c != 3 {
        return Err(Error::Shape {
            what: "image",
            expected: vec![3, h, w],
            got: img.shape().to_vec(),
        });
    }
    let hw = h * w;
    let d = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[hw + i]), to_u8(d[2 * hw + i])])
    }))
}

pub fn from_rgb_image(rgb: &RgbImage) -> Tensor<f32> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * hw + i] = from_u8(p[c]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb_image(img)?.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Decode any format the `image` crate understands into `[-1, 1]` RGB.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes)?;
    Ok(from_rgb_image(&img.to_rgb8()))
}

pub fn save_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Bilinear (triangle filter) resize to `res x res`; a no-op at that size.
pub fn resize_square(img: &Tensor<f32>, res: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = img.chw();
    if h == res && w == res {
        return Ok(img.clone());
    }
    let rgb = to_rgb_image(img)?;
    let out = image::imageops::resize(&rgb, res as u32, res as u32, FilterType::Triangle);
    Ok(from_rgb_image(&out))
}

/// Round-trip through 8-bit storage.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| from_u8(to_u8(v)))
}
