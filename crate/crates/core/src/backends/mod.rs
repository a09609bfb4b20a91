//! Pluggable model backends.
//!
//! Every model the pipeline depends on sits behind one of the traits here.
//! Modules above this one only see the traits; which implementation serves
//! a role is decided by the [`registry::BackendRegistry`].

pub mod corpus;
pub mod mock;
pub mod registry;

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::domain::{Polarity, SearchQuery};
use crate::error::Result;
use crate::field::{stable_hash, ScalarField};
use crate::nn::Param;

pub use registry::{BackendHandle, BackendRegistry, BackendsConfig};

/// Placeholder token whose conditioning vector is supplied out of band.
pub const PLACEHOLDER_TOKEN: &str = "<appeal>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Captioner,
    Segmenter,
    Inpainter,
    InversionTrainer,
    Upscaler,
    Depth,
    Encoder,
    ImageSource,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::Captioner,
        Role::Segmenter,
        Role::Inpainter,
        Role::InversionTrainer,
        Role::Upscaler,
        Role::Depth,
        Role::Encoder,
        Role::ImageSource,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Captioner => "captioner",
            Role::Segmenter => "segmenter",
            Role::Inpainter => "inpainter",
            Role::InversionTrainer => "inversion_trainer",
            Role::Upscaler => "upscaler",
            Role::Depth => "depth",
            Role::Encoder => "encoder",
            Role::ImageSource => "image_source",
        }
    }

    pub fn from_name(name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Properties every backend declares about itself.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    /// Same inputs and seed produce identical outputs.
    fn deterministic(&self) -> bool {
        true
    }
    /// Safe to call concurrently from several threads.
    fn reentrant(&self) -> bool {
        true
    }
}

/// One search hit as served by an image source, still encoded.
#[derive(Clone, Debug)]
pub struct SourceItem {
    pub rank: usize,
    pub bytes: Vec<u8>,
    /// Caption sidecar, if the source has one.
    pub caption_hint: Option<String>,
    /// Encoded region-mask sidecar, if the source has one.
    pub mask_hint: Option<Vec<u8>>,
}

pub trait ImageSource: Backend {
    /// Results for `query` in source order, at most `limit` of them.
    fn search(&self, query: &SearchQuery, limit: usize) -> Result<Vec<SourceItem>>;
}

pub trait Captioner: Backend {
    fn caption(&self, image_id: &str, image: &RgbImage) -> Result<String>;
}

pub trait Segmenter: Backend {
    /// Raw per-pixel response for `phrase`, row-major, `w * h` values.
    /// Values are not required to lie in `[0, 1]`.
    fn segment(&self, image_id: &str, image: &RgbImage, phrase: &str) -> Result<Vec<f64>>;
}

/// A text-conditioning vector plus a stable digest of its contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub vector: Vec<f64>,
    pub hash: u64,
}

impl Conditioning {
    pub fn new(vector: Vec<f64>) -> Self {
        let bytes: Vec<u8> = vector.iter().flat_map(|v| v.to_le_bytes()).collect();
        let hash = stable_hash(&[&bytes]);
        Self { vector, hash }
    }
}

#[derive(Clone, Debug)]
pub struct InpaintRequest<'a> {
    pub image: &'a RgbImage,
    pub prompt: String,
    /// Vector bound to [`PLACEHOLDER_TOKEN`] when it appears in `prompt`.
    pub conditioning: Option<&'a Conditioning>,
    pub negative_prompt: &'a str,
    /// Soft mask; backends declare whether they binarize it.
    pub mask: &'a ScalarField,
    pub seed: u64,
    pub strength: f64,
    pub guidance_scale: f64,
    pub sampler: &'a str,
    pub depth: Option<&'a ScalarField>,
}

pub trait Inpainter: Backend {
    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage>;
    /// Threshold the backend binarizes soft masks at, if it does.
    fn binarize_threshold(&self) -> Option<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionParams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for InversionParams {
    fn default() -> Self {
        Self {
            batch_size: 1,
            learning_rate: 5e-3,
            steps: 3000,
        }
    }
}

pub struct InversionRequest<'a> {
    pub exemplars: &'a [(String, RgbImage)],
    pub polarity: Polarity,
    pub group: Option<&'a str>,
    pub params: &'a InversionParams,
}

pub trait InversionTrainer: Backend {
    /// Dimension of the text-conditioning space.
    fn dim(&self) -> usize;
    fn train(&self, request: &InversionRequest<'_>) -> Result<Vec<f64>>;
}

pub trait Upscaler: Backend {
    /// Native integer upscaling factor.
    fn factor(&self) -> u32;
    fn upscale(&self, image: &RgbImage) -> Result<RgbImage>;
}

pub trait DepthEstimator: Backend {
    /// Raw inverse-depth response, row-major, `w * h` values.
    fn depth(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Serialisable snapshot of an encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub id: String,
    pub config: serde_json::Value,
    pub params: Vec<Vec<f64>>,
}

/// A trainable image encoder.
pub trait ImageEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Parameter-free preprocessing; its output is what `forward` consumes.
    fn preprocess(&self, image: &RgbImage) -> Vec<f64>;
    fn forward(&self, input: &[f64]) -> Vec<f64>;
    /// Accumulates parameter gradients for one input.
    fn backward(&mut self, input: &[f64], grad_out: &[f64]);
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn state(&self) -> EncoderState;
    fn box_clone(&self) -> Box<dyn ImageEncoder>;

    fn encode(&self, image: &RgbImage) -> Vec<f64> {
        self.forward(&self.preprocess(image))
    }
}

impl Clone for Box<dyn ImageEncoder> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

impl fmt::Debug for dyn ImageEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageEncoder({}, dim {})", self.id(), self.dim())
    }
}
