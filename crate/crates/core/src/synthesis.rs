//! Synthetic appeal-graded variants of base images.
//!
//! Each base image gets `backgrounds_per_base` background variants, and each
//! variant gets `alphas_per_background` appeal levels rendered inside the
//! domain region with the blended polarity embedding.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use image::RgbImage;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Conditioning, InpaintRequest, Inpainter, InversionParams, InversionRequest, InversionTrainer, PLACEHOLDER_TOKEN};
use crate::domain::{Polarity, SynthesisPlan};
use crate::error::{AppealError, Result};
use crate::field::{composite, derive_seed, image_dims, ScalarField};
use crate::manifest::{read_json, write_json};

pub const DELTA_RANGE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarityEmbedding {
    pub vector: Vec<f64>,
    pub polarity: Polarity,
    pub group: Option<String>,
    pub trained_on: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingMeta {
    polarity: Polarity,
    group: Option<String>,
    trained_on: Vec<String>,
    dimension: usize,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingCheckpoint {
    vector: Vec<f64>,
}

impl PolarityEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Writes `<stem>.json` (vector) and `<stem>.meta.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_json(
            &dir.join(format!("{stem}.json")),
            &EmbeddingCheckpoint {
                vector: self.vector.clone(),
            },
        )?;
        write_json(
            &dir.join(format!("{stem}.meta.json")),
            &EmbeddingMeta {
                polarity: self.polarity,
                group: self.group.clone(),
                trained_on: self.trained_on.clone(),
                dimension: self.dim(),
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let ckpt: EmbeddingCheckpoint = read_json(&dir.join(format!("{stem}.json")))?;
        let meta: EmbeddingMeta = read_json(&dir.join(format!("{stem}.meta.json")))?;
        if meta.dimension != ckpt.vector.len() {
            return Err(AppealError::validation(
                "dimension",
                format!("sidecar says {} but checkpoint has {}", meta.dimension, ckpt.vector.len()),
            ));
        }
        Ok(Self {
            vector: ckpt.vector,
            polarity: meta.polarity,
            group: meta.group,
            trained_on: meta.trained_on,
        })
    }
}

pub fn train_polarity_embedding(
    exemplars: &[(String, RgbImage)],
    polarity: Polarity,
    group: Option<&str>,
    trainer: &dyn InversionTrainer,
    params: &InversionParams,
) -> Result<PolarityEmbedding> {
    if exemplars.is_empty() {
        return Err(AppealError::validation("exemplars", "must not be empty"));
    }
    let vector = trainer.train(&InversionRequest {
        exemplars,
        polarity,
        group,
        params,
    })?;
    if vector.len() != trainer.dim() {
        return Err(AppealError::backend(
            "inversion_trainer",
            format!("returned {} values, expected {}", vector.len(), trainer.dim()),
        ));
    }
    Ok(PolarityEmbedding {
        vector,
        polarity,
        group: group.map(str::to_owned),
        trained_on: exemplars.iter().map(|(id, _)| id.clone()).collect(),
    })
}

/// `alpha * z_pos + (1 - alpha) * z_neg`, elementwise.
pub fn blend(z_pos: &[f64], z_neg: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z_pos.len() != z_neg.len() {
        return Err(AppealError::DimensionMismatch {
            expected: (z_pos.len(), 1),
            actual: (z_neg.len(), 1),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AppealError::validation("alpha", format!("{alpha} not in [0, 1]")));
    }
    Ok(z_pos
        .iter()
        .zip(z_neg)
        .map(|(p, n)| alpha * p + (1.0 - alpha) * n)
        .collect())
}

/// `clamp(k/2 + delta, 0, 1)` for `k` in `{0, 1, 2}` and `|delta| <= 0.2`.
pub fn sample_alpha(k: u8, delta: f64) -> Result<f64> {
    if k > 2 {
        return Err(AppealError::validation("k", format!("{k} not in {{0, 1, 2}}")));
    }
    if !(delta.abs() <= DELTA_RANGE) {
        return Err(AppealError::validation("delta", format!("{delta} outside ±{DELTA_RANGE}")));
    }
    Ok((k as f64 / 2.0 + delta).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisParams {
    /// Relevancy maps are binarized at this value before inpainting.
    pub mask_threshold: f64,
    /// Denoising strength for synthesis inpainting.
    pub strength: f64,
    pub guidance_scale: f64,
    pub sampler: String,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            mask_threshold: 0.5,
            strength: 1.0,
            guidance_scale: 7.0,
            sampler: "DPM++ 2M Karras".into(),
        }
    }
}

fn run_inpaint(
    image: &RgbImage,
    mask: &ScalarField,
    prompt: String,
    conditioning: Option<&Conditioning>,
    seed: u64,
    inpainter: &dyn Inpainter,
    params: &SynthesisParams,
) -> Result<RgbImage> {
    if mask.is_all_zero() {
        return Ok(image.clone());
    }
    let generated = inpainter.inpaint(&InpaintRequest {
        image,
        prompt,
        conditioning,
        negative_prompt: "",
        mask,
        seed,
        strength: params.strength,
        guidance_scale: params.guidance_scale,
        sampler: &params.sampler,
        depth: None,
    })?;
    composite(image, &generated, mask)
}

/// Regenerates the non-domain area with an empty prompt. Pixels outside
/// `binarize(1 - relevancy)` are returned unchanged.
pub fn diversify_background(
    image: &RgbImage,
    relevancy: &ScalarField,
    seed: u64,
    inpainter: &dyn Inpainter,
    params: &SynthesisParams,
) -> Result<RgbImage> {
    relevancy.ensure_dims(image_dims(image))?;
    let mask = relevancy.inverted().binarize(params.mask_threshold);
    run_inpaint(image, &mask, String::new(), None, seed, inpainter, params)
}

/// Re-renders the domain region with `caption` plus a placeholder token
/// bound to `cond`. Pixels outside `binarize(relevancy)` are unchanged.
pub fn adjust_appeal(
    image: &RgbImage,
    caption: &str,
    cond: &Conditioning,
    relevancy: &ScalarField,
    seed: u64,
    inpainter: &dyn Inpainter,
    params: &SynthesisParams,
) -> Result<RgbImage> {
    if caption.trim().is_empty() {
        return Err(AppealError::validation("caption", "must not be empty"));
    }
    relevancy.ensure_dims(image_dims(image))?;
    let mask = relevancy.binarize(params.mask_threshold);
    let prompt = format!("{} {PLACEHOLDER_TOKEN}", caption.trim());
    run_inpaint(image, &mask, prompt, Some(cond), seed, inpainter, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: String,
    pub base_id: String,
    pub background_seed: u64,
    pub alpha: f64,
    pub negative_group: String,
    /// Path relative to the work directory.
    pub path: String,
}

/// One base image with everything synthesis needs.
#[derive(Clone, Debug)]
pub struct SynthesisBase {
    pub id: String,
    pub image: RgbImage,
    pub caption: String,
    pub relevancy: ScalarField,
}

#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub positive: PolarityEmbedding,
    /// Group name -> negative embedding.
    pub negatives: BTreeMap<String, PolarityEmbedding>,
}

impl EmbeddingSet {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(AppealError::validation("embeddings", "no negative embedding"));
        }
        for (name, neg) in &self.negatives {
            if neg.dim() != self.positive.dim() {
                return Err(AppealError::validation(
                    format!("embeddings.{name}"),
                    format!("dimension {} differs from positive {}", neg.dim(), self.positive.dim()),
                ));
            }
        }
        Ok(())
    }
}

/// Planned slot of one synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedSample {
    pub id: String,
    pub background: usize,
    pub slot: usize,
    pub background_seed: u64,
    pub adjust_seed: u64,
    pub alpha: f64,
    pub negative_group: String,
}

pub fn sample_id(base_id: &str, background: usize, slot: usize) -> String {
    format!("{base_id}-b{background}-s{slot}")
}

/// Deterministic plan for one base: group, seeds and alphas are all derived
/// from `(run_seed, base_id, background, slot)`.
pub fn plan_base(base_id: &str, plan: &SynthesisPlan, groups: &[&str], run_seed: u64) -> Result<Vec<PlannedSample>> {
    if groups.is_empty() {
        return Err(AppealError::validation("negative_groups", "must not be empty"));
    }
    let mut group_rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &["group", base_id]));
    let group = groups[group_rng.gen_range(0..groups.len())].to_owned();

    let mut out = Vec::with_capacity(plan.samples_per_base());
    for b in 0..plan.backgrounds_per_base {
        let bs = b.to_string();
        let background_seed = derive_seed(run_seed, &["background", base_id, &bs]);
        let mut used: HashSet<u64> = HashSet::new();
        for slot in 0..plan.alphas_per_background {
            let ss = slot.to_string();
            let k = (slot % 3) as u8;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &["delta", base_id, &bs, &ss]));
            // Redraw while the clamped alpha repeats within this background.
            let mut tries = 0;
            let alpha = loop {
                let delta = rng.gen_range(-DELTA_RANGE..=DELTA_RANGE);
                let alpha = sample_alpha(k, delta)?;
                if used.insert(alpha.to_bits()) {
                    break alpha;
                }
                tries += 1;
                if tries > 1000 {
                    return Err(AppealError::validation(
                        "synthesis_plan.alphas_per_background",
                        "too many slots to keep alphas distinct",
                    ));
                }
            };
            out.push(PlannedSample {
                id: sample_id(base_id, b, slot),
                background: b,
                slot,
                background_seed,
                adjust_seed: derive_seed(run_seed, &["adjust", base_id, &bs, &ss]),
                alpha,
                negative_group: group.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct SynthesisOutcome {
    /// Newly generated samples in plan order.
    pub samples: Vec<SyntheticSample>,
    /// `(sample id, error)` for skipped samples.
    pub failures: Vec<(String, String)>,
}

/// Receives each generated image; returns the path to record.
pub type SampleSink<'a> = dyn Fn(&str, &RgbImage) -> Result<String> + Sync + 'a;

/// Generates the full plan for every base. Backgrounds are diversified
/// before appeal is adjusted. Samples whose id is in `done` are skipped, so
/// an interrupted run resumes from its manifest.
pub fn generate_synthetic_set(
    bases: &[SynthesisBase],
    plan: &SynthesisPlan,
    embeddings: &EmbeddingSet,
    inpainter: &dyn Inpainter,
    params: &SynthesisParams,
    run_seed: u64,
    done: &HashSet<String>,
    sink: &SampleSink<'_>,
) -> Result<SynthesisOutcome> {
    embeddings.validate()?;
    let groups: Vec<&str> = embeddings.negatives.keys().map(String::as_str).collect();
    let run_base = |base: &SynthesisBase| -> Result<Vec<std::result::Result<SyntheticSample, (String, String)>>> {
        let planned = plan_base(&base.id, plan, &groups, run_seed)?;
        let mut results = Vec::with_capacity(planned.len());
        let mut background: Option<(usize, Result<RgbImage>)> = None;
        for p in planned {
            if done.contains(&p.id) {
                continue;
            }
            if background.as_ref().is_none_or(|(b, _)| *b != p.background) {
                let img = diversify_background(&base.image, &base.relevancy, p.background_seed, inpainter, params);
                background = Some((p.background, img));
            }
            let bg = match &background {
                Some((_, Ok(img))) => img,
                Some((_, Err(e))) => {
                    results.push(Err((p.id.clone(), e.to_string())));
                    continue;
                }
                None => unreachable!(),
            };
            let result = (|| {
                let z_neg = &embeddings.negatives[&p.negative_group];
                let cond = Conditioning::new(blend(&embeddings.positive.vector, &z_neg.vector, p.alpha)?);
                let img = adjust_appeal(bg, &base.caption, &cond, &base.relevancy, p.adjust_seed, inpainter, params)?;
                let path = sink(&p.id, &img)?;
                Ok::<_, AppealError>(SyntheticSample {
                    id: p.id.clone(),
                    base_id: base.id.clone(),
                    background_seed: p.background_seed,
                    alpha: p.alpha,
                    negative_group: p.negative_group.clone(),
                    path,
                })
            })();
            results.push(result.map_err(|e| (p.id.clone(), e.to_string())));
        }
        Ok(results)
    };

    let per_base: Vec<_> = if inpainter.reentrant() {
        bases.par_iter().map(run_base).collect()
    } else {
        bases.iter().map(run_base).collect()
    };
    let mut outcome = SynthesisOutcome::default();
    for results in per_base {
        for r in results? {
            match r {
                Ok(s) => outcome.samples.push(s),
                Err((id, msg)) => {
                    warn!("synthetic sample {id} skipped: {msg}");
                    outcome.failures.push((id, msg));
                }
            }
        }
    }
    Ok(outcome)
}
