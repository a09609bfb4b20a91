//! Per-pixel scalar maps and small image helpers shared across the pipeline.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppealError, Result};

/// A per-pixel map with every value in `[0, 1]`, row-major.
///
/// Used both for domain-relevancy maps and for appeal heatmaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        let value = clamp_unit(value);
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    /// Builds a field from raw values, rejecting anything outside `[0, 1]`.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(AppealError::validation(
                "values",
                format!("expected {} values for {width}x{height}, got {}", width * height, values.len()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AppealError::validation("values", format!("{bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Builds a field from arbitrary backend output, clamping into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let values = values.into_iter().map(clamp_unit).collect();
        Self::from_values(width, height, values)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(clamp_unit(f(x, y)));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn inverted(&self) -> Self {
        self.map(|v| 1.0 - v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| clamp_unit(f(v))).collect(),
        }
    }

    /// 1 where the value is strictly above `threshold`, else 0.
    pub fn binarize(&self, threshold: f64) -> Self {
        self.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }

    /// Pixelwise maximum.
    pub fn max_with(&self, other: &Self) -> Result<Self> {
        self.ensure_dims(other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.max(*b))
                .collect(),
        })
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(AppealError::DimensionMismatch {
                expected: dims,
                actual: self.dims(),
            });
        }
        Ok(())
    }

    /// 8-bit grayscale rendering, `round(255 * v)`.
    pub fn to_luma(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([(self.get(x as usize, y as usize) * 255.0).round() as u8])
        })
    }

    pub fn from_luma(img: &GrayImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        self.to_luma().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_luma(&img))
    }

    /// Bilinear resample to a new size.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
            let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
            top * (1.0 - ty) + bottom * ty
        })
    }

    /// Places this field at `(left, top)` inside a zero field of the given size.
    pub fn padded(&self, width: usize, height: usize, left: usize, top: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            if x >= left && y >= top && x - left < self.width && y - top < self.height {
                self.get(x - left, y - top)
            } else {
                0.0
            }
        })
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Hex SHA-256 over the decoded pixels and dimensions, independent of file format.
pub fn content_hash(img: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(img.width().to_le_bytes());
    hasher.update(img.height().to_le_bytes());
    hasher.update(img.as_raw());
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable 64-bit digest of arbitrary labelled parts.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Derives a child seed from a run seed and a list of tags.
pub fn derive_seed(run_seed: u64, tags: &[&str]) -> u64 {
    let seed = run_seed.to_le_bytes();
    let mut parts: Vec<&[u8]> = vec![&seed];
    parts.extend(tags.iter().map(|t| t.as_bytes()));
    stable_hash(&parts)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => AppealError::io(path, io),
            other => AppealError::Image(other),
        })?
        .to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| AppealError::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn image_dims(img: &RgbImage) -> (usize, usize) {
    (img.width() as usize, img.height() as usize)
}

/// RGB in `[0, 1]` to HSV with hue in `[0, 1)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn to_pixel(rgb: [f64; 3]) -> Rgb<u8> {
    Rgb(rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
}

pub fn from_pixel(px: &Rgb<u8>) -> [f64; 3] {
    px.0.map(|c| c as f64 / 255.0)
}

/// Mean HSV saturation over pixels where `mask > 0.5`; `None` for an empty mask.
pub fn mean_saturation(img: &RgbImage, mask: &ScalarField) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y, px) in img.enumerate_pixels() {
        if mask.get(x as usize, y as usize) > 0.5 {
            total += rgb_to_hsv(from_pixel(px))[1];
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Copies `generated` into `base` wherever `mask > 0`; every other pixel keeps
/// its original value bit for bit.
pub fn composite(base: &RgbImage, generated: &RgbImage, mask: &ScalarField) -> Result<RgbImage> {
    mask.ensure_dims(image_dims(base))?;
    if image_dims(generated) != image_dims(base) {
        return Err(AppealError::DimensionMismatch {
            expected: image_dims(base),
            actual: image_dims(generated),
        });
    }
    let mut out = base.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x as usize, y as usize) > 0.0 {
            *px = *generated.get_pixel(x, y);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_values_rejects_out_of_range() {
        assert!(ScalarField::from_values(2, 1, vec![0.0, 1.5]).is_err());
        assert!(ScalarField::from_values(2, 1, vec![0.0]).is_err());
        assert!(ScalarField::from_values(2, 1, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn clamping_handles_nan() {
        let f = ScalarField::from_clamped(3, 1, vec![-1.0, f64::NAN, 7.0]).unwrap();
        assert_eq!(f.values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn png_quantisation() {
        let f = ScalarField::from_values(2, 1, vec![0.5, 1.0]).unwrap();
        let img = f.to_luma();
        assert_eq!(img.get_pixel(0, 0)[0], 128);
        assert_eq!(img.get_pixel(1, 0)[0], 255);
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.4, 0.9], [1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.1, 0.8, 0.3]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn content_hash_ignores_format() {
        let img = RgbImage::from_pixel(3, 2, Rgb([1, 2, 3]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(content_hash(&load_rgb(&path).unwrap()), content_hash(&img));
        let other = RgbImage::from_pixel(2, 3, Rgb([1, 2, 3]));
        assert_ne!(content_hash(&other), content_hash(&img));
    }
}
