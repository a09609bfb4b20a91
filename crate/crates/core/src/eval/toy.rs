//! Desk-scale end-to-end check on synthetic "toy" images.
//!
//! Each toy image is a low-saturation backdrop with one coloured ellipse.
//! The ellipse is the domain region and its saturation is the appeal signal:
//! real toy images get a known `alpha_truth` rendered by the toy inpainter,
//! and the pipeline has to recover it through synthesis, pairwise training,
//! exemplar voting and scaling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{correlations, MetricReport};
use crate::acquisition::{ImageRecord, RecordStatus};
use crate::backends::mock::{MockInpainter, MockInversionTrainer, ProjectionConfig, ProjectionEncoder};
use crate::backends::{Conditioning, InversionParams};
use crate::domain::{Polarity, SearchQuery, SynthesisPlan};
use crate::error::{AppealError, Result};
use crate::field::{derive_seed, hsv_to_rgb, mean_saturation, save_png, to_pixel, ScalarField};
use crate::labeling::{annotate_dataset, resolve_exemplars, select_exemplars, Comparator, LabelTarget};
use crate::manifest::{write_json, write_jsonl};
use crate::models::{make_pairs, no_hook, train_comparator, CheckpointMeta, ComparatorModel, HeadInit, TrainConfig, TrainReport, DEFAULT_HIDDEN};
use crate::synthesis::{adjust_appeal, blend, generate_synthetic_set, train_polarity_embedding, EmbeddingSet, SynthesisBase, SynthesisParams};

const CAPTION: &str = "a toy object";
const NEGATIVE_GROUP: &str = "dull";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyOptions {
    /// Real images that get labelled.
    pub n_images: usize,
    /// Separate images used as synthesis bases.
    pub n_bases: usize,
    pub image_size: u32,
    pub plan: SynthesisPlan,
    pub per_base_pairs: usize,
    pub n_exemplars: usize,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub encoder: ProjectionConfig,
    /// Manifests, images and the report go here when set.
    pub out_dir: Option<PathBuf>,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            n_images: 500,
            n_bases: 80,
            image_size: 32,
            plan: SynthesisPlan {
                backgrounds_per_base: 3,
                alphas_per_background: 6,
            },
            per_base_pairs: 40,
            n_exemplars: 100,
            train: TrainConfig::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            encoder: ProjectionConfig {
                grid: 4,
                dim: 64,
                seed: 0,
            },
            out_dir: None,
        }
    }
}

impl ToyOptions {
    /// Same run with no training at all.
    pub fn negative_control(mut self) -> Self {
        self.train = self.train.with_epochs(0);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    pub id: String,
    pub alpha_truth: f64,
    pub polarity: Polarity,
    /// Mean saturation inside the domain region.
    pub saturation: f64,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    pub n_images: usize,
    pub n_bases: usize,
    pub n_synthetic: usize,
    pub n_pairs: usize,
    pub n_exemplars: usize,
    pub epochs_per_stage: Vec<usize>,
    pub train: TrainReport,
    /// Scaled labels against `alpha_truth`.
    pub labels_vs_alpha: MetricReport,
    /// Largest `|compare(I, I)|` over the labelled images.
    pub self_comparison_max_abs: f64,
    /// Mean `|compare(a, b) + compare(b, a)|` over training pairs.
    pub mean_asymmetry: f64,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    info!("toy harness: {name}");
    f().map_err(|e| AppealError::Stage {
        stage: name.into(),
        message: e.to_string(),
    })
}

/// A backdrop with one ellipse and the matching domain mask.
fn toy_base(rng: &mut ChaCha8Rng, size: u32) -> (RgbImage, ScalarField) {
    let s = size as f64;
    let (bg_hue, bg_sat, bg_val): (f64, f64, f64) = (rng.gen(), rng.gen_range(0.0..0.1), rng.gen_range(0.3..0.8));
    let (hue, sat, val): (f64, f64, f64) = (rng.gen(), rng.gen_range(0.2..0.9), rng.gen_range(0.35..0.45));
    let cx = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
    let cy = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
    let rx = s * rng.gen_range(0.28..0.4);
    let ry = s * rng.gen_range(0.28..0.4);
    let mut mask = Vec::with_capacity((size * size) as usize);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            let inside = dx * dx + dy * dy <= 1.0;
            let hsv = if inside {
                [(hue + rng.gen_range(-0.02..0.02)).rem_euclid(1.0), sat, (val + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)]
            } else {
                [bg_hue, bg_sat, (bg_val + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)]
            };
            img.put_pixel(x, y, to_pixel(hsv_to_rgb(hsv)));
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    (img, ScalarField::from_values(size as usize, size as usize, mask).expect("mask in [0, 1]"))
}

fn toy_record(id: &str, polarity: Polarity, path: &str, size: u32) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        source: "toy".into(),
        query: SearchQuery {
            text: format!("toy {}", if polarity == Polarity::Positive { "appealing" } else { NEGATIVE_GROUP }),
            polarity,
            negative_group: (polarity == Polarity::Negative).then(|| NEGATIVE_GROUP.into()),
            adjective: "toy".into(),
            noun: "object".into(),
        },
        rank: 0,
        path: path.into(),
        width: size,
        height: size,
        caption: Some(CAPTION.into()),
        relevancy_fraction: None,
        status: RecordStatus::Kept,
    }
}

fn write_png(out: Option<&Path>, rel: &str, img: &RgbImage) -> Result<()> {
    match out {
        Some(dir) => save_png(img, &dir.join(rel)),
        None => Ok(()),
    }
}

/// Runs the whole pipeline on mock backends and reports how well the voted
/// labels track `alpha_truth`.
pub fn toy_harness(seed: u64, options: &ToyOptions) -> Result<ToyReport> {
    let out = options.out_dir.as_deref();
    let size = options.image_size;
    let inpainter = MockInpainter::toy();
    let params = SynthesisParams::default();
    let mut store: HashMap<String, RgbImage> = HashMap::new();

    let bases_raw = stage("toy-data", || {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["toy", "bases"]));
        Ok((0..options.n_bases).map(|_| toy_base(&mut rng, size)).collect::<Vec<_>>())
    })?;

    let embeddings = stage("embeddings", || {
        let trainer = MockInversionTrainer::default();
        let inv = InversionParams::default();
        let half = options.n_bases / 2;
        let named = |range: std::ops::Range<usize>| -> Vec<(String, RgbImage)> {
            range.map(|i| (format!("base{i:03}"), bases_raw[i].0.clone())).collect()
        };
        let positive = train_polarity_embedding(&named(0..half.max(1)), Polarity::Positive, None, &trainer, &inv)?;
        let negative = train_polarity_embedding(&named(half..options.n_bases), Polarity::Negative, Some(NEGATIVE_GROUP), &trainer, &inv)?;
        Ok(EmbeddingSet {
            positive,
            negatives: BTreeMap::from([(NEGATIVE_GROUP.to_owned(), negative)]),
        })
    })?;

    let images = stage("toy-images", || {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["toy", "images"]));
        let mut images = Vec::with_capacity(options.n_images);
        for i in 0..options.n_images {
            let (base, mask) = toy_base(&mut rng, size);
            let alpha: f64 = rng.gen();
            let cond = Conditioning::new(blend(&embeddings.positive.vector, &embeddings.negatives[NEGATIVE_GROUP].vector, alpha)?);
            let img = adjust_appeal(&base, CAPTION, &cond, &mask, rng.gen(), &inpainter, &params)?;
            let id = format!("toy{i:04}");
            let path = format!("images/{id}.png");
            write_png(out, &path, &img)?;
            images.push(ToyImage {
                id,
                alpha_truth: alpha,
                polarity: if alpha >= 0.5 { Polarity::Positive } else { Polarity::Negative },
                saturation: mean_saturation(&img, &mask).unwrap_or(0.0),
                path: path.clone(),
            });
            store.insert(path, img);
        }
        Ok(images)
    })?;

    let samples = stage("synthesis", || {
        let bases: Vec<SynthesisBase> = bases_raw
            .iter()
            .enumerate()
            .map(|(i, (img, mask))| SynthesisBase {
                id: format!("base{i:03}"),
                image: img.clone(),
                caption: CAPTION.into(),
                relevancy: mask.clone(),
            })
            .collect();
        let generated = Mutex::new(HashMap::new());
        let sink = |id: &str, img: &RgbImage| -> Result<String> {
            let path = format!("synthetic/{id}.png");
            write_png(out, &path, img)?;
            generated.lock().expect("sink lock").insert(path.clone(), img.clone());
            Ok(path)
        };
        let outcome = generate_synthetic_set(
            &bases,
            &options.plan,
            &embeddings,
            &inpainter,
            &params,
            derive_seed(seed, &["synthesis"]),
            &HashSet::new(),
            &sink,
        )?;
        if let Some((id, msg)) = outcome.failures.first() {
            return Err(AppealError::Stage {
                stage: "synthesis".into(),
                message: format!("{id}: {msg}"),
            });
        }
        store.extend(generated.into_inner().expect("sink lock"));
        Ok(outcome.samples)
    })?;

    let pairs = stage("pairs", || Ok(make_pairs(&samples, options.per_base_pairs, derive_seed(seed, &["pairs"]))))?;

    let loader = |path: &str| -> Result<RgbImage> {
        store
            .get(path)
            .cloned()
            .ok_or_else(|| AppealError::validation("path", format!("{path} not in the toy store")))
    };

    let mut cfg = options.train.clone();
    cfg.seed = derive_seed(seed, &["train"]);
    let encoder = Box::new(ProjectionEncoder::new(options.encoder.clone()));
    let mut model = ComparatorModel::new(encoder, &options.hidden, HeadInit::Random, derive_seed(seed, &["comparator"]));
    let train = stage("train-comparator", || train_comparator(&mut model, &pairs, &cfg, &loader, &mut no_hook()))?;

    let (exemplar_set, labels) = stage("label", || {
        let records: Vec<ImageRecord> = images.iter().map(|t| toy_record(&t.id, t.polarity, &t.path, size)).collect();
        let set = select_exemplars(&records, options.n_exemplars, derive_seed(seed, &["exemplars"]))?;
        let paths: HashMap<String, String> = images.iter().map(|t| (t.id.clone(), t.path.clone())).collect();
        let resolved = resolve_exemplars(&set, &paths, &model, &loader)?;
        let targets: Vec<LabelTarget> = images
            .iter()
            .map(|t| LabelTarget {
                id: t.id.clone(),
                path: t.path.clone(),
            })
            .collect();
        let labels = annotate_dataset(&targets, &resolved, &model, &loader, None)?;
        Ok((set, labels))
    })?;

    let report = stage("evaluate", || {
        if labels.len() != images.len() {
            return Err(AppealError::Stage {
                stage: "label".into(),
                message: format!("{} of {} images labelled", labels.len(), images.len()),
            });
        }
        let scaled: Vec<f64> = labels.iter().map(|l| l.scaled).collect();
        let truth: Vec<f64> = images.iter().map(|t| t.alpha_truth).collect();
        let labels_vs_alpha = correlations(&scaled, &truth)?;

        let mut self_max: f64 = 0.0;
        for t in &images {
            let f = Comparator::features(&model, &store[&t.path]);
            self_max = self_max.max(model.compare(&f, &f).abs());
        }
        let mut asym = 0.0;
        let checked = pairs.len().min(1000);
        for p in &pairs[..checked] {
            let fa = Comparator::features(&model, &store[&p.image_a_path]);
            let fb = Comparator::features(&model, &store[&p.image_b_path]);
            asym += (model.compare(&fa, &fb) + model.compare(&fb, &fa)).abs();
        }
        Ok(ToyReport {
            seed,
            n_images: images.len(),
            n_bases: options.n_bases,
            n_synthetic: samples.len(),
            n_pairs: pairs.len(),
            n_exemplars: exemplar_set.ids.len(),
            epochs_per_stage: cfg.stages.iter().map(|s| s.epochs).collect(),
            train: train.clone(),
            labels_vs_alpha,
            self_comparison_max_abs: self_max,
            mean_asymmetry: if checked > 0 { asym / checked as f64 } else { 0.0 },
        })
    })?;

    if let Some(dir) = out {
        stage("write", || {
            write_jsonl(&dir.join("images.jsonl"), &images)?;
            write_jsonl(&dir.join("synthetic.jsonl"), &samples)?;
            write_jsonl(&dir.join("pairs.jsonl"), &pairs)?;
            write_json(&dir.join("exemplars.json"), &exemplar_set)?;
            write_jsonl(&dir.join("labels.jsonl"), &labels)?;
            model.save(
                &dir.join("comparator.json"),
                &CheckpointMeta::new(&model.head, model.encoder.as_ref(), &cfg, Some(&train)),
            )?;
            write_json(&dir.join("report.json"), &report)
        })?;
    }
    Ok(report)
}
