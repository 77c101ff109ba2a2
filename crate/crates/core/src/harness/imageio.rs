//! 8-bit image files as `[C,H,W]` tensors: PNG and the PNM family, gray or RGB.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::numerics::IntTensor;

fn image_err(e: image::ImageError) -> Error {
    Error::Image(e.to_string())
}

pub fn read_image(path: &Path) -> Result<IntTensor> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(image_err)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => IntTensor::new(vec![1, h, w], g.into_raw().into_iter().map(i64::from).collect()),
        DynamicImage::ImageRgb8(rgb) => {
            let raw = rgb.into_raw();
            Ok(IntTensor::from_fn(&[3, h, w], |k| {
                i64::from(raw[(k % (h * w)) * 3 + k / (h * w)])
            }))
        }
        other => Err(Error::Image(format!(
            "{}: only 8-bit gray or RGB images are supported, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Writes a gray (`C = 1`) or RGB (`C = 3`) tensor; the format follows the
/// extension (`.png`, `.pgm`, `.ppm`, `.pnm`).
pub fn write_image(path: &Path, img: &IntTensor) -> Result<()> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(shape_err(format!("expected [C,H,W], got {s:?}"))),
    };
    if let Some(v) = img.data().iter().find(|&&v| !(0..=255).contains(&v)) {
        return Err(Error::BadParams(format!("pixel {v} outside [0, 255]")));
    }
    let format = ImageFormat::from_path(path).map_err(image_err)?;
    let bytes = |k: usize| img.data()[k] as u8;
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, (0..h * w).map(bytes).collect())
                .ok_or_else(|| shape_err("gray buffer size"))?,
        ),
        3 => DynamicImage::ImageRgb8(
            RgbImage::from_raw(
                w as u32,
                h as u32,
                (0..h * w * 3).map(|k| bytes((k % 3) * h * w + k / 3)).collect(),
            )
            .ok_or_else(|| shape_err("rgb buffer size"))?,
        ),
        _ => return Err(Error::Image(format!("cannot store {c} channels"))),
    };
    dynamic.save_with_format(path, format).map_err(image_err)
}

/// Image files in `dir` with a supported extension, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
        })
        .collect();
    out.sort();
    Ok(out)
}
