use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Decodes an 8- or 16-bit RGB(A) PNG into a `(1, 3, h, w)` tensor in [0, 1].
/// Alpha is dropped.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    let mut fill = |channels: usize, samples: &mut dyn Iterator<Item = f64>| {
        for (i, v) in samples.enumerate() {
            let (p, c) = (i / channels, i % channels);
            if c < 3 {
                data[c * plane + p] = v;
            }
        }
    };
    match &img {
        DynamicImage::ImageRgb8(b) => fill(3, &mut b.as_raw().iter().map(|&v| v as f64 / 255.0)),
        DynamicImage::ImageRgba8(b) => fill(4, &mut b.as_raw().iter().map(|&v| v as f64 / 255.0)),
        DynamicImage::ImageRgb16(b) => fill(3, &mut b.as_raw().iter().map(|&v| v as f64 / 65535.0)),
        DynamicImage::ImageRgba16(b) => {
            fill(4, &mut b.as_raw().iter().map(|&v| v as f64 / 65535.0))
        }
        other => {
            return Err(Error::io(
                path,
                format!("unsupported color type {:?} (expected RGB or RGBA)", other.color()),
            ))
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Writes the first image of a 3-channel tensor as an 8-bit RGB PNG,
/// clamping to [0, 1]. Single-channel tensors are replicated to grey.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.c != 3 && s.c != 1 {
        return Err(Error::Shape(format!("cannot render {s} as an image")));
    }
    let plane = s.plane();
    let img = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let p = y as usize * s.w + x as usize;
        let px = |c: usize| {
            let c = if s.c == 1 { 0 } else { c };
            (t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save(path).map_err(|e| Error::io(path, e))
}
