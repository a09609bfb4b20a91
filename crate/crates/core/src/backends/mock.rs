//! Deterministic stand-ins for every backend role.
//!
//! The mocks are small enough to run the whole pipeline at desk scale and
//! are all deterministic under their seed and safe to call concurrently.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::imageops::FilterType;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::*;
use crate::domain::SearchQuery;
use crate::error::AppealError;
use crate::field::{from_pixel, hsv_to_rgb, image_dims, rgb_to_hsv, stable_hash, to_pixel};
use crate::nn::Linear;

pub const MOCK_ID: &str = "mock";

/// Masked-region saturation the toy inpainter renders for `alpha = 0`.
pub const TOY_SATURATION_AT_ZERO: f64 = 0.2;
/// Masked-region saturation the toy inpainter renders for `alpha = 1`.
pub const TOY_SATURATION_AT_ONE: f64 = 0.9;
const TOY_SATURATION_JITTER: f64 = 0.02;
/// Floor on HSV value so saturation stays measurable after quantisation.
const TOY_MIN_VALUE: f64 = 0.25;

/// Saturation the toy inpainter targets for a given alpha.
pub fn toy_saturation(alpha: f64) -> f64 {
    let a = alpha.clamp(0.0, 1.0);
    TOY_SATURATION_AT_ZERO + (TOY_SATURATION_AT_ONE - TOY_SATURATION_AT_ZERO) * a
}

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(parts))
}

/// Serves `<corpus>/<query-slug>/<rank>.png`, with optional `<rank>.txt`
/// caption and `<rank>.mask.png` region sidecars.
#[derive(Clone, Debug)]
pub struct DirectoryImageSource {
    root: PathBuf,
    delay: Duration,
}

impl DirectoryImageSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

impl Backend for DirectoryImageSource {
    fn id(&self) -> &str {
        MOCK_ID
    }
}

impl ImageSource for DirectoryImageSource {
    fn search(&self, query: &SearchQuery, limit: usize) -> Result<Vec<SourceItem>> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let dir = self.root.join(query.slug());
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| AppealError::io(&dir, e))?;
        let mut ranked: Vec<(usize, PathBuf)> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?;
                let stem = name.strip_suffix(".png")?;
                let rank: usize = stem.parse().ok()?;
                Some((rank, p))
            })
            .collect();
        ranked.sort();
        ranked
            .into_iter()
            .take(limit)
            .map(|(rank, path)| {
                let bytes = std::fs::read(&path).map_err(|e| AppealError::io(&path, e))?;
                let caption_hint = std::fs::read_to_string(dir.join(format!("{rank}.txt")))
                    .ok()
                    .map(|s| s.trim().to_owned());
                let mask_hint = std::fs::read(dir.join(format!("{rank}.mask.png"))).ok();
                Ok(SourceItem {
                    rank,
                    bytes,
                    caption_hint,
                    mask_hint,
                })
            })
            .collect()
    }
}

/// Looks captions up by image id: an in-memory map first, then
/// `<sidecar_dir>/<id>.txt`, then an optional fallback string.
#[derive(Clone, Debug, Default)]
pub struct MockCaptioner {
    captions: HashMap<String, String>,
    sidecar_dir: Option<PathBuf>,
    fallback: Option<String>,
}

impl MockCaptioner {
    pub fn from_map(captions: HashMap<String, String>) -> Self {
        Self {
            captions,
            ..Self::default()
        }
    }

    pub fn with_sidecar_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.sidecar_dir = Some(dir.into());
        self
    }

    pub fn with_fallback(mut self, caption: impl Into<String>) -> Self {
        self.fallback = Some(caption.into());
        self
    }

    pub fn insert(&mut self, id: impl Into<String>, caption: impl Into<String>) {
        self.captions.insert(id.into(), caption.into());
    }
}

impl Backend for MockCaptioner {
    fn id(&self) -> &str {
        MOCK_ID
    }
}

impl Captioner for MockCaptioner {
    fn caption(&self, image_id: &str, _image: &RgbImage) -> Result<String> {
        if let Some(c) = self.captions.get(image_id) {
            return Ok(c.clone());
        }
        if let Some(dir) = &self.sidecar_dir {
            if let Ok(c) = std::fs::read_to_string(dir.join(format!("{image_id}.txt"))) {
                return Ok(c.trim().to_owned());
            }
        }
        self.fallback.clone().ok_or_else(|| AppealError::Backend {
            role: Role::Captioner.name().into(),
            message: format!("no caption registered for {image_id}"),
            retryable: false,
        })
    }
}

/// Returns the same region for every phrase: a registered mask, a
/// `<sidecar_dir>/<id>.mask.png` file, or the pixels matching a key colour.
#[derive(Clone, Debug, Default)]
pub struct MockSegmenter {
    masks: HashMap<String, ScalarField>,
    sidecar_dir: Option<PathBuf>,
    key_color: Option<[u8; 3]>,
}

impl MockSegmenter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sidecar_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.sidecar_dir = Some(dir.into());
        self
    }

    pub fn with_key_color(mut self, rgb: [u8; 3]) -> Self {
        self.key_color = Some(rgb);
        self
    }

    pub fn insert(&mut self, id: impl Into<String>, mask: ScalarField) {
        self.masks.insert(id.into(), mask);
    }
}

impl Backend for MockSegmenter {
    fn id(&self) -> &str {
        MOCK_ID
    }
}

impl Segmenter for MockSegmenter {
    fn segment(&self, image_id: &str, image: &RgbImage, _phrase: &str) -> Result<Vec<f64>> {
        let dims = image_dims(image);
        let mask = if let Some(mask) = self.masks.get(image_id) {
            Some(mask.clone())
        } else {
            match &self.sidecar_dir {
                Some(dir) => {
                    let path = dir.join(format!("{image_id}.mask.png"));
                    path.is_file()
                        .then(|| ScalarField::load_png(&path))
                        .transpose()?
                }
                None => None,
            }
        };
        if let Some(mask) = mask {
            return Ok(mask.resized(dims.0, dims.1).values().to_vec());
        }
        Ok(match self.key_color {
            Some(key) => image.pixels().map(|p| if p.0 == key { 1.0 } else { 0.0 }).collect(),
            None => vec![0.0; dims.0 * dims.1],
        })
    }
}

/// Fills the binarized mask with seeded content.
///
/// * Without conditioning (empty prompt): a low-saturation backdrop keyed by
///   the seed.
/// * With conditioning, default mode: a solid colour keyed by
///   `(seed, conditioning hash)`.
/// * With conditioning, toy mode: keeps each pixel's hue and mean intensity
///   and sets saturation to [`toy_saturation`] of the alpha stored in
///   component 0 of the conditioning vector.
#[derive(Clone, Debug)]
pub struct MockInpainter {
    toy: bool,
    threshold: f64,
}

impl Default for MockInpainter {
    fn default() -> Self {
        Self::new()
    }
}

impl MockInpainter {
    pub fn new() -> Self {
        Self {
            toy: false,
            threshold: 0.5,
        }
    }

    pub fn toy() -> Self {
        Self {
            toy: true,
            threshold: 0.5,
        }
    }

    pub fn is_toy(&self) -> bool {
        self.toy
    }
}

impl Backend for MockInpainter {
    fn id(&self) -> &str {
        MOCK_ID
    }
}

impl Inpainter for MockInpainter {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<RgbImage> {
        req.mask.ensure_dims(image_dims(req.image))?;
        let cond_hash = req.conditioning.map_or(0, |c| c.hash);
        let mut rng = rng_for(&[
            b"inpaint",
            &req.seed.to_le_bytes(),
            &cond_hash.to_le_bytes(),
            req.prompt.as_bytes(),
        ]);
        let mut out = req.image.clone();
        match req.conditioning {
            None => {
                let hue: f64 = rng.gen();
                let sat = rng.gen_range(0.0..0.12);
                let val = rng.gen_range(0.35..0.85);
                for (x, y, px) in out.enumerate_pixels_mut() {
                    let jitter: f64 = rng.gen_range(-0.04..0.04);
                    if req.mask.get(x as usize, y as usize) > self.threshold {
                        *px = to_pixel(hsv_to_rgb([hue, sat, (val + jitter).clamp(0.0, 1.0)]));
                    }
                }
            }
            Some(cond) if self.toy => {
                let alpha = cond.vector.first().copied().unwrap_or(0.0);
                let target = toy_saturation(alpha);
                for (x, y, px) in out.enumerate_pixels_mut() {
                    let jitter: f64 = rng.gen_range(-TOY_SATURATION_JITTER..TOY_SATURATION_JITTER);
                    if req.mask.get(x as usize, y as usize) > self.threshold {
                        let rgb = from_pixel(px);
                        let [h, _, _] = rgb_to_hsv(rgb);
                        let sat = (target + jitter).clamp(0.0, 1.0);
                        // Pick the value that keeps the pixel's mean intensity.
                        let unit = hsv_to_rgb([h, sat, 1.0]);
                        let v = (rgb.iter().sum::<f64>() / unit.iter().sum::<f64>()).clamp(TOY_MIN_VALUE, 1.0);
                        *px = to_pixel(hsv_to_rgb([h, sat, v]));
                    }
                }
            }
            Some(_) => {
                let hue: f64 = rng.gen();
                let sat = rng.gen_range(0.3..1.0);
                let val = rng.gen_range(0.4..1.0);
                for (x, y, px) in out.enumerate_pixels_mut() {
                    let jitter: f64 = rng.gen_range(-0.03..0.03);
                    if req.mask.get(x as usize, y as usize) > self.threshold {
                        *px = to_pixel(hsv_to_rgb([hue, sat, (val + jitter).clamp(0.0, 1.0)]));
                    }
                }
            }
        }
        Ok(out)
    }

    fn binarize_threshold(&self) -> Option<f64> {
        Some(self.threshold)
    }
}

/// Produces embeddings without any optimisation: component 0 is the
/// polarity coordinate (1 for positive, 0 for negative), the rest is a
/// seeded vector keyed by polarity, group and exemplar ids.
#[derive(Clone, Debug)]
pub struct MockInversionTrainer {
    dim: usize,
}

impl MockInversionTrainer {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1);
        Self { dim }
    }
}

impl Default for MockInversionTrainer {
    fn default() -> Self {
        Self::new(16)
    }
}

impl Backend for MockInversionTrainer {
    fn id(&self) -> &str {
        MOCK_ID
    }
}

impl InversionTrainer for MockInversionTrainer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn train(&self, req: &InversionRequest<'_>) -> Result<Vec<f64>> {
        if req.exemplars.is_empty() {
            return Err(AppealError::validation("exemplars", "must not be empty"));
        }
        let polarity = match req.polarity {
            Polarity::Positive => 1.0,
            Polarity::Negative => 0.0,
        };
        let mut ids: Vec<&str> = req.exemplars.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort_unstable();
        let joined = ids.join(",");
        let mut rng = rng_for(&[
            b"inversion",
            &[polarity as u8],
            req.group.unwrap_or("").as_bytes(),
            joined.as_bytes(),
        ]);
        let mut vector = Vec::with_capacity(self.dim);
        vector.push(polarity);
        vector.extend((1..self.dim).map(|_| rng.gen_range(-0.5..0.5)));
        Ok(vector)
    }
}

/// Bicubic upscaling by a fixed integer factor.
#[derive(Clone, Debug)]
pub struct BicubicUpscaler {
    factor: u32,
}

impl BicubicUpscaler {
    pub fn new(factor: u32) -> Self {
        assert!(factor >= 2, "upscaling factor must be at least 2");
        Self { factor }
    }
}

impl Default for BicubicUpscaler {
    fn default() -> Self {
        Self::new(2)
    }
}

impl Backend for BicubicUpscaler {
    fn id(&self) -> &str {
        MOCK_ID
    }
}

impl Upscaler for BicubicUpscaler {
    fn factor(&self) -> u32 {
        self.factor
    }

    fn upscale(&self, image: &RgbImage) -> Result<RgbImage> {
        Ok(image::imageops::resize(
            image,
            image.width() * self.factor,
            image.height() * self.factor,
            FilterType::CatmullRom,
        ))
    }
}

/// Vertical gradient `y / (h - 1)` for any image with luminance variation;
/// all zeros for a constant image.
#[derive(Clone, Debug, Default)]
pub struct GradientDepth;

impl Backend for GradientDepth {
    fn id(&self) -> &str {
        MOCK_ID
    }
}

impl DepthEstimator for GradientDepth {
    fn depth(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = image_dims(image);
        let first = image.pixels().next().map(|p| p.0);
        let constant = image.pixels().all(|p| Some(p.0) == first);
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            let v = if constant || h < 2 {
                0.0
            } else {
                y as f64 / (h - 1) as f64
            };
            out.extend(std::iter::repeat_n(v, w));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ProjectionConfig {
    pub grid: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            dim: 64,
            seed: 0,
        }
    }
}

/// Box-downsamples to a `grid x grid` RGB thumbnail and applies a fixed-seed
/// random linear projection to `dim` features. The projection is trainable.
#[derive(Clone, Debug)]
pub struct ProjectionEncoder {
    config: ProjectionConfig,
    proj: Linear,
}

impl ProjectionEncoder {
    pub fn new(config: ProjectionConfig) -> Self {
        let input = 3 * config.grid * config.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[b"projection", &config.seed.to_le_bytes()]));
        // Unit-variance random projection.
        let bound = (3.0 / input as f64).sqrt();
        let weight = (0..input * config.dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let proj = Linear::from_weights(input, config.dim, weight, vec![0.0; config.dim]);
        Self { config, proj }
    }

    pub fn from_state(state: &EncoderState) -> Result<Self> {
        let config: ProjectionConfig = serde_json::from_value(state.config.clone())?;
        let mut enc = Self::new(config);
        if state.params.len() != 2
            || state.params[0].len() != enc.proj.weight.len()
            || state.params[1].len() != enc.proj.bias.len()
        {
            return Err(AppealError::validation("encoder.params", "shape does not match config"));
        }
        enc.proj.weight = Param::new(state.params[0].clone());
        enc.proj.bias = Param::new(state.params[1].clone());
        Ok(enc)
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    /// Input layer, exposed for tests.
    pub fn projection(&self) -> &Linear {
        &self.proj
    }
}

impl Default for ProjectionEncoder {
    fn default() -> Self {
        Self::new(ProjectionConfig::default())
    }
}

impl ImageEncoder for ProjectionEncoder {
    fn id(&self) -> &str {
        MOCK_ID
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn preprocess(&self, image: &RgbImage) -> Vec<f64> {
        let g = self.config.grid;
        let (w, h) = image_dims(image);
        let mut out = Vec::with_capacity(3 * g * g);
        for cy in 0..g {
            let y0 = cy * h / g;
            let y1 = ((cy + 1) * h / g).max(y0 + 1).min(h);
            for cx in 0..g {
                let x0 = cx * w / g;
                let x1 = ((cx + 1) * w / g).max(x0 + 1).min(w);
                let mut acc = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get_pixel(x as u32, y as u32);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64 * 255.0;
                out.extend(acc.iter().map(|a| a / n - 0.5));
            }
        }
        out
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.proj.forward(input)
    }

    fn backward(&mut self, input: &[f64], grad_out: &[f64]) {
        self.proj.backward(input, grad_out, false);
    }

    fn params(&self) -> Vec<&Param> {
        self.proj.params().to_vec()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.proj.params_mut().into_iter().collect()
    }

    fn state(&self) -> EncoderState {
        EncoderState {
            id: MOCK_ID.into(),
            config: serde_json::to_value(&self.config).expect("config serialises"),
            params: vec![self.proj.weight.value.clone(), self.proj.bias.value.clone()],
        }
    }

    fn box_clone(&self) -> Box<dyn ImageEncoder> {
        Box::new(self.clone())
    }
}

/// One row of the documented mock behaviour table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MockContract {
    pub role: Role,
    pub implementation: &'static str,
    pub behavior: &'static str,
    pub deterministic: bool,
    pub reentrant: bool,
    pub binarizes_mask_at: Option<f64>,
}

pub fn mock_contracts() -> Vec<MockContract> {
    let row = |role, behavior, binarizes_mask_at| MockContract {
        role,
        implementation: MOCK_ID,
        behavior,
        deterministic: true,
        reentrant: true,
        binarizes_mask_at,
    };
    vec![
        row(
            Role::Captioner,
            "fixed caption map keyed by image id, then <id>.txt sidecar, then optional fallback",
            None,
        ),
        row(
            Role::Segmenter,
            "same region for every phrase: registered mask, <id>.mask.png sidecar, or key-colour pixels",
            None,
        ),
        row(
            Role::Inpainter,
            "fills the mask (binarized at 0.5) with a function of (seed, conditioning hash); toy mode sets masked saturation to 0.2 + 0.7 * alpha (alpha = conditioning[0]) and keeps hue and mean intensity",
            Some(0.5),
        ),
        row(
            Role::InversionTrainer,
            "no optimisation; component 0 = 1 (positive) or 0 (negative), rest seeded by group and exemplar ids",
            None,
        ),
        row(Role::Upscaler, "bicubic (Catmull-Rom) resize by a factor of 2", None),
        row(Role::Depth, "vertical gradient y/(h-1); zeros for constant images", None),
        row(
            Role::Encoder,
            "fixed-seed random linear projection of an 8x8 box-downsampled RGB thumbnail to 64 features",
            None,
        ),
        row(
            Role::ImageSource,
            "serves <corpus>/<query-slug>/<rank>.png with optional .txt and .mask.png sidecars",
            None,
        ),
    ]
}

/// Directory layout helpers for the mock sidecars written during `fetch`.
pub fn caption_sidecar(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

pub fn mask_sidecar(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mask.png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::mean_saturation;
    use image::Rgb;

    fn noisy_image(seed: u64, w: u32, h: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    fn request<'a>(
        image: &'a RgbImage,
        mask: &'a ScalarField,
        cond: Option<&'a Conditioning>,
        seed: u64,
    ) -> InpaintRequest<'a> {
        InpaintRequest {
            image,
            prompt: if cond.is_some() { format!("food {PLACEHOLDER_TOKEN}") } else { String::new() },
            conditioning: cond,
            negative_prompt: "",
            mask,
            seed,
            strength: 1.0,
            guidance_scale: 7.0,
            sampler: "mock",
            depth: None,
        }
    }

    #[test]
    fn inpainter_is_deterministic() {
        let img = noisy_image(1, 24, 16);
        let mask = ScalarField::from_fn(24, 16, |x, _| if x < 12 { 1.0 } else { 0.0 });
        let cond = Conditioning::new(vec![0.3, 0.1, -0.2]);
        for inpainter in [MockInpainter::new(), MockInpainter::toy()] {
            let a = inpainter.inpaint(&request(&img, &mask, Some(&cond), 9)).unwrap();
            let b = inpainter.inpaint(&request(&img, &mask, Some(&cond), 9)).unwrap();
            assert_eq!(a, b);
            let c = inpainter.inpaint(&request(&img, &mask, Some(&cond), 10)).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn toy_saturation_constants() {
        let img = noisy_image(2, 32, 32);
        let mask = ScalarField::filled(32, 32, 1.0);
        let inpainter = MockInpainter::toy();
        let low = Conditioning::new(vec![0.0, 0.4]);
        let high = Conditioning::new(vec![1.0, 0.4]);
        let s0 = mean_saturation(&inpainter.inpaint(&request(&img, &mask, Some(&low), 1)).unwrap(), &mask).unwrap();
        let s1 = mean_saturation(&inpainter.inpaint(&request(&img, &mask, Some(&high), 1)).unwrap(), &mask).unwrap();
        assert!((s0 - 0.2).abs() < 0.02, "{s0}");
        assert!((s1 - 0.9).abs() < 0.02, "{s1}");
    }

    #[test]
    fn encoder_dimension_is_fixed() {
        let enc = ProjectionEncoder::new(ProjectionConfig {
            grid: 4,
            dim: 10,
            seed: 5,
        });
        for (w, h) in [(1, 1), (3, 7), (64, 32), (200, 150)] {
            assert_eq!(enc.encode(&noisy_image(w as u64, w, h)).len(), 10);
        }
        let restored = ProjectionEncoder::from_state(&enc.state()).unwrap();
        let img = noisy_image(4, 9, 9);
        assert_eq!(restored.encode(&img), enc.encode(&img));
    }

    #[test]
    fn depth_mock() {
        let grad = GradientDepth.depth(&noisy_image(3, 4, 5)).unwrap();
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[4 * 4], 1.0);
        let flat = GradientDepth.depth(&RgbImage::from_pixel(4, 5, Rgb([9, 9, 9]))).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inversion_polarity_coordinate() {
        let trainer = MockInversionTrainer::new(8);
        let ex = vec![("a".to_string(), noisy_image(1, 2, 2))];
        let params = InversionParams::default();
        let pos = trainer
            .train(&InversionRequest {
                exemplars: &ex,
                polarity: Polarity::Positive,
                group: None,
                params: &params,
            })
            .unwrap();
        let neg = trainer
            .train(&InversionRequest {
                exemplars: &ex,
                polarity: Polarity::Negative,
                group: Some("burnt"),
                params: &params,
            })
            .unwrap();
        assert_eq!((pos[0], neg[0]), (1.0, 0.0));
        assert_eq!(pos.len(), 8);
    }
}
