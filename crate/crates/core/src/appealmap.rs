//! Sliding-window appeal heatmaps and heatmap-gated enhancement.

use image::imageops::crop_imm;
use image::{Rgb, RgbImage};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Conditioning, DepthEstimator, InpaintRequest, Inpainter, PLACEHOLDER_TOKEN};
use crate::error::{AppealError, Result};
use crate::field::{composite, image_dims, ScalarField};
use crate::models::EstimatorModel;
use crate::synthesis::PolarityEmbedding;

pub const NEGATIVE_PROMPT: &str = "out of frame, lowres, text, error, cropped, worst quality, low quality, jpeg artifacts, ugly, duplicate, morbid, mutilated, out of frame, extra fingers, mutated hands, poorly drawn hands, poorly drawn face, mutation, deformed, blurry, dehydrated, bad anatomy, bad proportions, extra limbs, cloned face, disfigured, gross proportions, malformed limbs, missing arms, missing legs, extra arms, extra legs, fused fingers, too many fingers, long neck, username, watermark, signature,";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Minmax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    pub window: usize,
    pub stride: usize,
    pub normalization: Normalization,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            window: 224,
            stride: 32,
            normalization: Normalization::Minmax,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.stride == 0 || self.stride > self.window {
            return Err(AppealError::validation(
                "heatmap.stride",
                format!("need 0 < stride ({}) <= window ({})", self.stride, self.window),
            ));
        }
        if self.window > width.min(height) {
            return Err(AppealError::validation(
                "heatmap.window",
                format!(
                    "window {} exceeds the {width}x{height} image; use a window of at most {}",
                    self.window,
                    width.min(height)
                ),
            ));
        }
        Ok(())
    }
}

/// Window offsets along one axis: every `stride` from 0, plus one flush with
/// the far edge when the stride misses it.
pub fn window_positions(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|p| p + window <= len).collect();
    if let Some(&last) = out.last() {
        if last + window < len {
            out.push(len - window);
        }
    }
    out
}

/// Scores of every window, row-major over `(ys, xs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
    pub scores: Vec<f64>,
}

impl PatchGrid {
    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.xs.len() + col]
    }

    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            scores: self.scores.iter().map(|&s| f(s)).collect(),
            ..self.clone()
        }
    }
}

pub trait PatchScorer: Sync {
    fn score(&self, patch: &RgbImage) -> f64;
}

impl PatchScorer for EstimatorModel {
    fn score(&self, patch: &RgbImage) -> f64 {
        self.predict(patch)
    }
}

pub fn patch_scores(image: &RgbImage, cfg: &HeatmapConfig, scorer: &dyn PatchScorer) -> Result<PatchGrid> {
    let (width, height) = image_dims(image);
    cfg.validate(width, height)?;
    let xs = window_positions(width, cfg.window, cfg.stride);
    let ys = window_positions(height, cfg.window, cfg.stride);
    let positions: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let w = cfg.window as u32;
    let scores = positions
        .par_iter()
        .map(|&(x, y)| scorer.score(&crop_imm(image, x as u32, y as u32, w, w).to_image()))
        .collect();
    Ok(PatchGrid {
        width,
        height,
        window: cfg.window,
        xs,
        ys,
        scores,
    })
}

/// Indices of windows along one axis that cover `p`.
fn covering(positions: &[usize], window: usize, p: usize) -> std::ops::Range<usize> {
    let start = positions.partition_point(|&s| s + window <= p);
    let end = positions.partition_point(|&s| s <= p);
    start..end
}

/// Per-pixel mean of covering window scores, min-max normalised and
/// inverted so that 1 marks the least appealing region. Constant means give
/// an all-zero map.
pub fn build_heatmap(grid: &PatchGrid) -> Result<ScalarField> {
    let expected = grid.xs.len() * grid.ys.len();
    if grid.scores.len() != expected || expected == 0 {
        return Err(AppealError::validation(
            "grid",
            format!("{} scores for {} windows", grid.scores.len(), expected),
        ));
    }
    let (w, h) = (grid.width, grid.height);
    let col_ranges: Vec<_> = (0..w).map(|x| covering(&grid.xs, grid.window, x)).collect();
    let mut mean = Vec::with_capacity(w * h);
    for y in 0..h {
        let rows = covering(&grid.ys, grid.window, y);
        for cols in &col_ranges {
            let mut sum = 0.0;
            for r in rows.clone() {
                for c in cols.clone() {
                    sum += grid.score(r, c);
                }
            }
            mean.push(sum / (rows.len() * cols.len()) as f64);
        }
    }
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(ScalarField::zeros(w, h));
    }
    let values = mean.iter().map(|a| 1.0 - (a - lo) / (hi - lo)).collect();
    ScalarField::from_clamped(w, h, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub denoising_strength: f64,
    pub guidance_scale: f64,
    pub sampler: String,
    pub negative_prompt: String,
    pub depth_conditioning: bool,
    pub depth_preprocessor: String,
    pub seed: u64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            denoising_strength: 0.6,
            guidance_scale: 7.0,
            sampler: "DPM++ 2M Karras".into(),
            negative_prompt: NEGATIVE_PROMPT.into(),
            depth_conditioning: true,
            depth_preprocessor: "depth_midas".into(),
            seed: 0,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.denoising_strength > 0.0 && self.denoising_strength <= 1.0) {
            return Err(AppealError::validation("enhance.denoising_strength", "must be in (0, 1]"));
        }
        if !(self.guidance_scale > 0.0) {
            return Err(AppealError::validation("enhance.guidance_scale", "must be positive"));
        }
        Ok(())
    }
}

pub fn enhance_prompt(object_type: &str) -> String {
    format!("{PLACEHOLDER_TOKEN} {}", object_type.trim())
}

/// Inpaints the soft heatmap region with the positive embedding bound to the
/// placeholder token. Pixels where the heatmap is 0 are never touched.
pub fn enhance(
    image: &RgbImage,
    object_type: &str,
    z_pos: Option<&PolarityEmbedding>,
    heatmap: &ScalarField,
    depth: Option<&ScalarField>,
    cfg: &EnhanceConfig,
    inpainter: &dyn Inpainter,
) -> Result<RgbImage> {
    cfg.validate()?;
    heatmap.ensure_dims(image_dims(image))?;
    let z_pos = z_pos.ok_or_else(|| AppealError::validation("z_pos", "positive embedding is required"))?;
    if object_type.trim().is_empty() {
        return Err(AppealError::validation("object_type", "must not be empty"));
    }
    if heatmap.is_all_zero() {
        return Ok(image.clone());
    }
    let depth = depth.filter(|_| cfg.depth_conditioning);
    if let Some(d) = depth {
        d.ensure_dims(image_dims(image))?;
    }
    let cond = Conditioning::new(z_pos.vector.clone());
    let generated = inpainter.inpaint(&InpaintRequest {
        image,
        prompt: enhance_prompt(object_type),
        conditioning: Some(&cond),
        negative_prompt: &cfg.negative_prompt,
        mask: heatmap,
        seed: cfg.seed,
        strength: cfg.denoising_strength,
        guidance_scale: cfg.guidance_scale,
        sampler: &cfg.sampler,
        depth,
    })?;
    composite(image, &generated, heatmap)
}

/// Min-max normalised depth; `None` (with a warning) if the backend fails.
pub fn estimate_depth(image: &RgbImage, backend: &dyn DepthEstimator) -> Option<ScalarField> {
    let (w, h) = image_dims(image);
    let raw = match backend.depth(image) {
        Ok(v) if v.len() == w * h && v.iter().all(|x| x.is_finite()) => v,
        Ok(v) => {
            warn!("depth backend returned {} values for a {w}x{h} image; continuing without depth", v.len());
            return None;
        }
        Err(e) => {
            warn!("depth estimation failed ({e}); continuing without depth");
            return None;
        }
    };
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; w * h]
    };
    ScalarField::from_clamped(w, h, values).ok()
}

/// Red tint proportional to the heatmap, for inspection.
pub fn overlay(image: &RgbImage, heatmap: &ScalarField) -> Result<RgbImage> {
    heatmap.ensure_dims(image_dims(image))?;
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let a = 0.6 * heatmap.get(x as usize, y as usize);
        let mix = |c: u8, t: f64| ((1.0 - a) * c as f64 + a * t).round() as u8;
        *px = Rgb([mix(px[0], 255.0), mix(px[1], 0.0), mix(px[2], 0.0)]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceReport {
    pub score_before: f64,
    pub score_after: f64,
    pub delta: f64,
}

pub fn enhance_report(before: &RgbImage, after: &RgbImage, scorer: &dyn PatchScorer) -> EnhanceReport {
    let score_before = scorer.score(before);
    let score_after = scorer.score(after);
    EnhanceReport {
        score_before,
        score_after,
        delta: score_after - score_before,
    }
}
