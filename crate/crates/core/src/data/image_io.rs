use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{invalid, Result};
use crate::tensor::{LatentTensor, Space};

/// Loads a PNG (or any format the `image` crate reads) as a (C, H, W) tensor
/// with values in [-1, 1]. Grayscale images give C = 1, everything else C = 3.
pub fn load_image(path: &Path) -> Result<LatentTensor> {
    let img = image::open(path)?;
    Ok(from_dynamic(&img))
}

pub fn from_dynamic(img: &DynamicImage) -> LatentTensor {
    let to_unit = |v: u8| v as f64 / 127.5 - 1.0;
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data: Vec<f64> = g.pixels().map(|p| to_unit(p.0[0])).collect();
            LatentTensor::from_vec((1, h as usize, w as usize), data, Space::Pixel).expect("dimensions")
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let mut data = vec![0.0; 3 * w * h];
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[c * w * h + y as usize * w + x as usize] = to_unit(p.0[c]);
                }
            }
            LatentTensor::from_vec((3, h, w), data, Space::Pixel).expect("dimensions")
        }
    }
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Converts a 1- or 3-channel tensor in [-1, 1] to an 8-bit image.
pub fn to_dynamic(t: &LatentTensor) -> Result<DynamicImage> {
    let (c, h, w) = t.shape();
    let d = t.data();
    match c {
        1 => {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([to_byte(d[[0, y as usize, x as usize]])])
            });
            Ok(DynamicImage::ImageLuma8(img))
        }
        3 => {
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([to_byte(d[[0, y, x]]), to_byte(d[[1, y, x]]), to_byte(d[[2, y, x]])])
            });
            Ok(DynamicImage::ImageRgb8(img))
        }
        n => Err(invalid(format!("cannot save a {n}-channel tensor as an image"))),
    }
}

/// Saves a tensor in [-1, 1] as a lossless PNG.
pub fn save_image(t: &LatentTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    to_dynamic(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let vals: Vec<f64> = (0..c * 4 * 5).map(|i| ((i * 37) % 256) as f64 / 127.5 - 1.0).collect();
            let t = LatentTensor::from_vec((c, 4, 5), vals, Space::Pixel).unwrap();
            let p = dir.path().join(format!("x{c}.png"));
            save_image(&t, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert!(back.max_abs_diff(&t) < 1e-12);
        }
    }
}
