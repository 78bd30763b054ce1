//! PNG and binary PPM input, PNG output.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::params::write_atomic;
use crate::tensor::Tensor;

fn format_of(path: &Path) -> Option<ImageFormat> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "png" => Some(ImageFormat::Png),
        "ppm" | "pnm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

/// Decodes PNG or binary PPM bytes into `[1, 3, H, W]` with values in `[0, 1]`.
pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Tensor> {
    let img = image::load(Cursor::new(bytes), format).map_err(|e| Error::Image(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image("empty image".into()));
    }
    let raw = rgb.as_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f64 / 255.0
    }))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let fmt = format_of(path)
        .ok_or_else(|| Error::Image(format!("{}: only .png and .ppm are supported", path.display())))?;
    let bytes = crate::error::read_file(path)?;
    decode_image(&bytes, fmt).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Rounds to 8-bit RGB.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Dimension(format!("expected [1, 3, H, W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let mut buf = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            buf[p * 3 + c] = (t.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("sized buffer"))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(t)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Writes a PNG (or PPM for a `.ppm` path) via a temporary file.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = match format_of(path) {
        Some(ImageFormat::Pnm) => {
            let img = to_rgb8(t)?;
            let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
            out.extend_from_slice(img.as_raw());
            out
        }
        _ => encode_png(t)?,
    };
    write_atomic(path, &bytes)
}

/// Supported images in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && format_of(p).is_some())
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[1, 3, 5, 7], |i| ((i * 37) % 256) as f64 / 255.0);
        for name in ["a.png", "b.ppm"] {
            let p = dir.path().join(name);
            save_image(&t, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), t);
        }
        assert_eq!(list_images(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn corrupt_files_are_image_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image(_))));
        assert!(matches!(load_image(&dir.path().join("x.jpg")), Err(Error::Image(_))));
    }
}
