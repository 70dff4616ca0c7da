//! PNG input/output for image tensors, label maps and sample grids.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::nn_util::{to_vec_f64, to_vec_i64};

/// `[-1, 1]` floats to `[0, 255]` bytes, rounding to nearest.
pub fn to_u8(images: &Tensor) -> Tensor {
    ((images.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to_kind(Kind::Uint8)
}

/// `[0, 255]` bytes to `[-1, 1]` floats.
pub fn from_u8(images: &Tensor, kind: Kind) -> Tensor {
    images.to_kind(kind) / 127.5 - 1.0
}

fn bytes(t: &Tensor) -> Result<Vec<u8>> {
    Ok(Vec::<u8>::try_from(&t.to_kind(Kind::Uint8).contiguous().view(-1))?)
}

/// Writes a `[3, H, W]` byte tensor.
pub fn save_rgb(path: &Path, chw: &Tensor) -> Result<()> {
    let s = chw.size();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("RGB image must be [3, H, W], got {s:?}")));
    }
    let hwc = bytes(&chw.permute([1, 2, 0]))?;
    let img = RgbImage::from_raw(s[2] as u32, s[1] as u32, hwc).expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Writes an `[H, W]` label map as single-channel indices.
pub fn save_labels(path: &Path, hw: &Tensor) -> Result<()> {
    let s = hw.size();
    if s.len() != 2 {
        return Err(Error::Shape(format!("label map must be [H, W], got {s:?}")));
    }
    let img = GrayImage::from_raw(s[1] as u32, s[0] as u32, bytes(hw)?).expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Reads an RGB PNG as a `[3, H, W]` byte tensor.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_slice(img.as_raw()).view([h as i64, w as i64, 3]).permute([2, 0, 1]).contiguous())
}

pub fn load_labels(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_slice(img.as_raw()).view([h as i64, w as i64]))
}

/// Fixed palette for label visualization; index 0 (background) is black.
pub fn palette(index: usize) -> [u8; 3] {
    const COLORS: [[u8; 3]; 11] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
    ];
    COLORS[index % COLORS.len()]
}

/// Grid of samples: images on the first row, argmax masks with part centers on the second.
///
/// `images` is `[B, 3, H, W]` in `[-1, 1]`, `masks` `[B, K + 1, H, W]`, `centers` `[B, K, 2]` normalized.
pub fn sample_grid(images: &Tensor, masks: Option<&Tensor>, centers: Option<&Tensor>) -> Result<RgbImage> {
    let s = images.size();
    let (b, h, w) = (s[0] as u32, s[2] as u32, s[3] as u32);
    let rows = if masks.is_some() { 2 } else { 1 };
    let mut grid = RgbImage::new(b * w, rows * h);
    let px = bytes(&to_u8(images).permute([0, 2, 3, 1]))?;
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                let o = (((i * h + y) * w + x) * 3) as usize;
                grid.put_pixel(i * w + x, y, Rgb([px[o], px[o + 1], px[o + 2]]));
            }
        }
    }
    if let Some(m) = masks {
        let labels = to_vec_i64(&m.argmax(1, false));
        for i in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let l = labels[((i * h + y) * w + x) as usize] as usize;
                    grid.put_pixel(i * w + x, h + y, Rgb(palette(l)));
                }
            }
        }
        if let Some(c) = centers {
            let k = c.size()[1] as u32;
            let cv = to_vec_f64(c);
            for i in 0..b {
                for j in 0..k {
                    let o = ((i * k + j) * 2) as usize;
                    let cx = ((cv[o] + 1.0) * w as f64 / 2.0 - 0.5).round() as i64;
                    let cy = ((cv[o + 1] + 1.0) * h as f64 / 2.0 - 0.5).round() as i64;
                    for d in -1i64..=1 {
                        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                            if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                                grid.put_pixel(i * w + x as u32, h + y as u32, Rgb([255, 255, 255]));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grid)
}
