//! Siamese comparator and absolute estimator over a shared image encoder.
//!
//! Both models are `encoder -> FC head`. The comparator feeds
//! `concat(enc(a), enc(b))` through its head and regresses the appeal
//! difference; the estimator regresses the 1..10 label directly. Training
//! minimises mean absolute error with AdamW over a list of stages, each of
//! which may freeze the encoder.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::registry::encoder_from_state;
use crate::backends::{EncoderState, ImageEncoder};
use crate::error::{AppealError, Result};
use crate::field::derive_seed;
use crate::manifest::{read_json, write_json};
use crate::nn::{AdamW, Init, Mlp};
use crate::synthesis::SyntheticSample;

pub const LABEL_MIN: f64 = 1.0;
pub const LABEL_MAX: f64 = 10.0;
/// Estimator output is `ESTIMATOR_CENTRE + ESTIMATOR_HALF_RANGE * head(x)`.
pub const ESTIMATOR_CENTRE: f64 = 5.5;
pub const ESTIMATOR_HALF_RANGE: f64 = 4.5;
pub const DEFAULT_HIDDEN: [usize; 2] = [512, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub image_a_path: String,
    pub image_b_path: String,
    pub target: f64,
    pub base_id: String,
}

/// Samples up to `per_base_pairs` unordered pairs per base without
/// replacement and emits each in both orders.
pub fn make_pairs(samples: &[SyntheticSample], per_base_pairs: usize, seed: u64) -> Vec<PairExample> {
    let mut by_base: BTreeMap<&str, Vec<&SyntheticSample>> = BTreeMap::new();
    for s in samples {
        by_base.entry(&s.base_id).or_default().push(s);
    }
    let mut out = Vec::new();
    for (base, group) in by_base {
        if group.len() < 2 {
            warn!("base {base} has {} synthetic sample(s); no pairs drawn", group.len());
            continue;
        }
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                candidates.push((i, j));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["pairs", base]));
        candidates.shuffle(&mut rng);
        candidates.truncate(per_base_pairs);
        for (i, j) in candidates {
            let (a, b) = (group[i], group[j]);
            let pair = |x: &SyntheticSample, y: &SyntheticSample| PairExample {
                image_a_path: x.path.clone(),
                image_b_path: y.path.clone(),
                target: x.alpha - y.alpha,
                base_id: base.to_owned(),
            };
            out.push(pair(a, b));
            out.push(pair(b, a));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage {
    pub freeze_encoder: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stages: Vec<TrainStage>,
    pub optimizer: String,
    pub seed: u64,
    /// Fraction of bases (comparator) or images (estimator) held out.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                TrainStage {
                    freeze_encoder: true,
                    epochs: 10,
                    learning_rate: 1e-3,
                    batch_size: 16,
                },
                TrainStage {
                    freeze_encoder: false,
                    epochs: 10,
                    learning_rate: 1e-5,
                    batch_size: 16,
                },
            ],
            optimizer: "adamw".into(),
            seed: 0,
            val_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(AppealError::validation("training.stages", "must not be empty"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(AppealError::validation(
                    format!("training.stages[{i}].learning_rate"),
                    "must be positive",
                ));
            }
            if s.batch_size == 0 {
                return Err(AppealError::validation(
                    format!("training.stages[{i}].batch_size"),
                    "must be at least 1",
                ));
            }
        }
        if !self.optimizer.eq_ignore_ascii_case("adamw") {
            return Err(AppealError::validation(
                "training.optimizer",
                format!("`{}` is not supported (adamw)", self.optimizer),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(AppealError::validation("training.val_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Same schedule with every stage's epoch count replaced.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.stages.iter_mut().for_each(|s| s.epochs = epochs);
        self
    }
}

/// Initialisation of a head's final layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    Random,
    /// Final layer all zeros: the untrained model outputs exactly 0.
    ZeroFinal,
}

fn new_head(input: usize, hidden: &[usize], init: HeadInit, seed: u64, tag: &str) -> Mlp {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["head", tag]));
    let final_init = match init {
        HeadInit::Random => Init::Uniform,
        HeadInit::ZeroFinal => Init::Zero,
    };
    Mlp::new(&widths, final_init, &mut rng)
}

/// Siamese comparator. One encoder instance serves both branches.
#[derive(Clone, Debug)]
pub struct ComparatorModel {
    pub encoder: Box<dyn ImageEncoder>,
    pub head: Mlp,
}

impl ComparatorModel {
    pub fn new(encoder: Box<dyn ImageEncoder>, hidden: &[usize], init: HeadInit, seed: u64) -> Self {
        let head = new_head(2 * encoder.dim(), hidden, init, seed, "comparator");
        Self { encoder, head }
    }

    /// The encoders of the two branches; always the same instance.
    pub fn branch_encoders(&self) -> (&dyn ImageEncoder, &dyn ImageEncoder) {
        (self.encoder.as_ref(), self.encoder.as_ref())
    }

    pub fn head_widths(&self) -> Vec<usize> {
        self.head.widths()
    }

    pub fn features(&self, image: &RgbImage) -> Vec<f64> {
        self.encoder.encode(image)
    }

    pub fn predict_features(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut x = Vec::with_capacity(a.len() + b.len());
        x.extend_from_slice(a);
        x.extend_from_slice(b);
        self.head.forward(&x)[0]
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        save_checkpoint(path, ModelKind::Comparator, self.encoder.as_ref(), &self.head, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (encoder, head) = load_checkpoint(path, ModelKind::Comparator)?;
        Ok(Self { encoder, head })
    }
}

/// `head(concat(enc(a), enc(b)))`, unclamped.
pub fn comparator_predict(model: &ComparatorModel, image_a: &RgbImage, image_b: &RgbImage) -> f64 {
    model.predict_features(&model.features(image_a), &model.features(image_b))
}

#[derive(Clone, Debug)]
pub struct EstimatorModel {
    pub encoder: Box<dyn ImageEncoder>,
    pub head: Mlp,
}

impl EstimatorModel {
    pub fn new(encoder: Box<dyn ImageEncoder>, hidden: &[usize], init: HeadInit, seed: u64) -> Self {
        let head = new_head(encoder.dim(), hidden, init, seed, "estimator");
        Self { encoder, head }
    }

    pub fn head_widths(&self) -> Vec<usize> {
        self.head.widths()
    }

    pub fn predict(&self, image: &RgbImage) -> f64 {
        ESTIMATOR_CENTRE + ESTIMATOR_HALF_RANGE * self.head.forward(&self.encoder.encode(image))[0]
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        save_checkpoint(path, ModelKind::Estimator, self.encoder.as_ref(), &self.head, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (encoder, head) = load_checkpoint(path, ModelKind::Estimator)?;
        Ok(Self { encoder, head })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Comparator,
    Estimator,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    kind: ModelKind,
    encoder: EncoderState,
    head: Mlp,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub head_widths: Vec<usize>,
    pub encoder_id: String,
    pub stages: Vec<TrainStage>,
    pub final_metrics: BTreeMap<String, f64>,
}

impl CheckpointMeta {
    pub fn new(head: &Mlp, encoder: &dyn ImageEncoder, cfg: &TrainConfig, report: Option<&TrainReport>) -> Self {
        let mut final_metrics = BTreeMap::new();
        if let Some(r) = report {
            final_metrics.insert("train_loss".into(), r.final_train_loss);
            if let Some(v) = r.final_val_loss {
                final_metrics.insert("val_loss".into(), v);
            }
        }
        Self {
            head_widths: head.widths(),
            encoder_id: encoder.id().to_owned(),
            stages: cfg.stages.clone(),
            final_metrics,
        }
    }
}

/// `foo.json` -> `foo.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    path.with_file_name(format!("{stem}.meta.json"))
}

fn save_checkpoint(path: &Path, kind: ModelKind, encoder: &dyn ImageEncoder, head: &Mlp, meta: &CheckpointMeta) -> Result<()> {
    write_json(
        path,
        &Checkpoint {
            kind,
            encoder: encoder.state(),
            head: head.clone(),
        },
    )?;
    write_json(&meta_path(path), meta)
}

fn load_checkpoint(path: &Path, kind: ModelKind) -> Result<(Box<dyn ImageEncoder>, Mlp)> {
    let ckpt: Checkpoint = read_json(path)?;
    if ckpt.kind != kind {
        return Err(AppealError::Format {
            path: path.into(),
            message: format!("checkpoint holds a {:?}, expected {kind:?}", ckpt.kind),
        });
    }
    Ok((encoder_from_state(&ckpt.encoder)?, ckpt.head))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    read_json(&meta_path(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: usize,
    pub epoch: usize,
    /// Mean absolute error over the epoch's batches, before each update.
    pub train_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    /// Held-out loss after each stage, when a split exists.
    pub stage_val_loss: Vec<Option<f64>>,
    pub n_train: usize,
    pub n_val: usize,
    /// Mean absolute error on the training split after training.
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
}

/// Returns the image bytes for a manifest path.
pub type ImageLoader<'a> = dyn Fn(&str) -> Result<RgbImage> + Sync + 'a;

/// Called after each stage with the stage index.
pub type StageHook<'a> = dyn FnMut(usize) -> Result<()> + 'a;

struct Example {
    images: Vec<usize>,
    target: f64,
}

/// Preprocessed encoder inputs, one per distinct path.
fn preprocess_all(paths: &[&str], encoder: &dyn ImageEncoder, loader: &ImageLoader<'_>) -> Result<(HashMap<String, usize>, Vec<Vec<f64>>)> {
    let mut index = HashMap::new();
    let mut unique = Vec::new();
    for p in paths {
        if !index.contains_key(*p) {
            index.insert((*p).to_owned(), unique.len());
            unique.push(*p);
        }
    }
    let inputs = unique
        .par_iter()
        .map(|p| loader(p).map(|img| encoder.preprocess(&img)))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, inputs))
}

/// Hold out `floor(n_keys * fraction)` keys, chosen under `seed`.
fn split_keys<'a>(keys: impl Iterator<Item = &'a str>, fraction: f64, seed: u64) -> BTreeSet<String> {
    let mut keys: Vec<&str> = keys.collect::<BTreeSet<_>>().into_iter().collect();
    let n_val = (keys.len() as f64 * fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["split"]));
    keys.shuffle(&mut rng);
    keys.into_iter().take(n_val).map(str::to_owned).collect()
}

struct Network<'m> {
    encoder: &'m mut Box<dyn ImageEncoder>,
    head: &'m mut Mlp,
    scale: f64,
    shift: f64,
}

impl Network<'_> {
    fn predict(&self, feats: &[Vec<f64>], ex: &Example) -> f64 {
        let x: Vec<f64> = ex.images.iter().flat_map(|&i| feats[i].iter().copied()).collect();
        self.shift + self.scale * self.head.forward(&x)[0]
    }

    fn encode_all(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        inputs.par_iter().map(|x| self.encoder.forward(x)).collect()
    }

    fn mean_abs_error(&self, inputs: &[Vec<f64>], examples: &[Example]) -> f64 {
        let feats = self.encode_all(inputs);
        let errs: Vec<f64> = examples
            .par_iter()
            .map(|ex| (self.predict(&feats, ex) - ex.target).abs())
            .collect();
        errs.iter().sum::<f64>() / examples.len() as f64
    }

    fn train(
        &mut self,
        inputs: &[Vec<f64>],
        train: &[Example],
        val: &[Example],
        cfg: &TrainConfig,
        hook: &mut StageHook<'_>,
    ) -> Result<TrainReport> {
        let d = self.encoder.dim();
        let mut report = TrainReport {
            n_train: train.len(),
            n_val: val.len(),
            ..Default::default()
        };
        for (si, stage) in cfg.stages.iter().enumerate() {
            let mut opt = AdamW::new(stage.learning_rate);
            for p in self.head.params_mut().into_iter().chain(self.encoder.params_mut()) {
                p.zero_grad();
                p.reset_moments();
            }
            let frozen = stage.freeze_encoder.then(|| self.encode_all(inputs));
            for epoch in 0..stage.epochs {
                let mut order: Vec<usize> = (0..train.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["epoch", &si.to_string(), &epoch.to_string()]));
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for (bi, batch) in order.chunks(stage.batch_size).enumerate() {
                    for &ei in batch {
                        let ex = &train[ei];
                        let feats: Vec<Vec<f64>> = match &frozen {
                            Some(f) => ex.images.iter().map(|&i| f[i].clone()).collect(),
                            None => ex.images.iter().map(|&i| self.encoder.forward(&inputs[i])).collect(),
                        };
                        let x: Vec<f64> = feats.concat();
                        let (h, trace) = self.head.forward_trace(&x);
                        let pred = self.shift + self.scale * h[0];
                        let err = pred - ex.target;
                        if !err.is_finite() {
                            return Err(AppealError::Training(format!(
                                "non-finite loss at stage {si}, epoch {epoch}, batch {bi} (prediction {pred}, target {})",
                                ex.target
                            )));
                        }
                        total += err.abs();
                        let g = if err > 0.0 {
                            self.scale
                        } else if err < 0.0 {
                            -self.scale
                        } else {
                            0.0
                        };
                        let gin = self.head.backward(&trace, &[g]);
                        if frozen.is_none() {
                            for (k, &i) in ex.images.iter().enumerate() {
                                self.encoder.backward(&inputs[i], &gin[k * d..(k + 1) * d]);
                            }
                        }
                    }
                    let mut params = self.head.params_mut();
                    if frozen.is_none() {
                        params.extend(self.encoder.params_mut());
                    }
                    opt.step(params, batch.len() as f64);
                }
                let train_loss = total / train.len() as f64;
                info!("stage {si} epoch {epoch}: train loss {train_loss:.5}");
                report.epochs.push(EpochLoss {
                    stage: si,
                    epoch,
                    train_loss,
                });
            }
            let val_loss = (!val.is_empty()).then(|| self.mean_abs_error(inputs, val));
            if let Some(v) = val_loss {
                info!("stage {si}: held-out loss {v:.5}");
            }
            report.stage_val_loss.push(val_loss);
            hook(si)?;
        }
        report.final_train_loss = self.mean_abs_error(inputs, train);
        report.final_val_loss = (!val.is_empty()).then(|| self.mean_abs_error(inputs, val));
        Ok(report)
    }
}

/// Trains on `pairs` and returns the loss trace. `hook` runs after every
/// stage, e.g. to checkpoint.
pub fn train_comparator(
    model: &mut ComparatorModel,
    pairs: &[PairExample],
    cfg: &TrainConfig,
    loader: &ImageLoader<'_>,
    hook: &mut StageHook<'_>,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(AppealError::Training("no training pairs".into()));
    }
    cfg.validate()?;
    if let Some(p) = pairs.iter().find(|p| !p.target.is_finite()) {
        return Err(AppealError::validation("pairs.target", format!("non-finite target in base {}", p.base_id)));
    }
    let paths: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.image_a_path.as_str(), p.image_b_path.as_str()])
        .collect();
    let (index, inputs) = preprocess_all(&paths, model.encoder.as_ref(), loader)?;
    let held_out = split_keys(pairs.iter().map(|p| p.base_id.as_str()), cfg.val_fraction, cfg.seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for p in pairs {
        let ex = Example {
            images: vec![index[&p.image_a_path], index[&p.image_b_path]],
            target: p.target,
        };
        if held_out.contains(&p.base_id) {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    let mut net = Network {
        encoder: &mut model.encoder,
        head: &mut model.head,
        scale: 1.0,
        shift: 0.0,
    };
    net.train(&inputs, &train, &val, cfg, hook)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub path: String,
    pub score: f64,
}

pub fn train_estimator(
    model: &mut EstimatorModel,
    labeled: &[LabeledImage],
    cfg: &TrainConfig,
    loader: &ImageLoader<'_>,
    hook: &mut StageHook<'_>,
) -> Result<TrainReport> {
    if labeled.is_empty() {
        return Err(AppealError::Training("no labeled images".into()));
    }
    cfg.validate()?;
    if let Some(l) = labeled.iter().find(|l| !(LABEL_MIN..=LABEL_MAX).contains(&l.score)) {
        return Err(AppealError::validation(
            "labels.score",
            format!("{} has score {} outside [{LABEL_MIN}, {LABEL_MAX}]", l.path, l.score),
        ));
    }
    let paths: Vec<&str> = labeled.iter().map(|l| l.path.as_str()).collect();
    let (index, inputs) = preprocess_all(&paths, model.encoder.as_ref(), loader)?;
    let held_out = split_keys(paths.iter().copied(), cfg.val_fraction, cfg.seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for l in labeled {
        let ex = Example {
            images: vec![index[&l.path]],
            target: l.score,
        };
        if held_out.contains(&l.path) {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    let mut net = Network {
        encoder: &mut model.encoder,
        head: &mut model.head,
        scale: ESTIMATOR_HALF_RANGE,
        shift: ESTIMATOR_CENTRE,
    };
    net.train(&inputs, &train, &val, cfg, hook)
}

pub fn no_hook() -> impl FnMut(usize) -> Result<()> {
    |_| Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{ProjectionConfig, ProjectionEncoder};
    use image::Rgb;

    fn sample(base: &str, id: &str, alpha: f64) -> SyntheticSample {
        SyntheticSample {
            id: id.into(),
            base_id: base.into(),
            background_seed: 0,
            alpha,
            negative_group: "g".into(),
            path: format!("{id}.png"),
        }
    }

    fn encoder() -> Box<dyn ImageEncoder> {
        Box::new(ProjectionEncoder::new(ProjectionConfig {
            grid: 4,
            dim: 16,
            seed: 3,
        }))
    }

    fn solid(v: u8) -> RgbImage {
        RgbImage::from_pixel(8, 8, Rgb([v, 255 - v, v / 2]))
    }

    fn loader(path: &str) -> Result<RgbImage> {
        let n: u8 = path.trim_end_matches(".png").trim_start_matches('s').parse().unwrap();
        Ok(solid(n.wrapping_mul(23)))
    }

    #[test]
    fn pair_targets() {
        let pairs = make_pairs(&[sample("b", "x", 0.8), sample("b", "y", 0.3)], 5, 0);
        let targets: Vec<f64> = pairs.iter().map(|p| p.target).collect();
        assert_eq!(pairs.len(), 2);
        assert!(targets.contains(&(0.8 - 0.3)) && targets.contains(&(0.3 - 0.8)));
        assert!(pairs.iter().all(|p| p.image_a_path != p.image_b_path));
    }

    #[test]
    fn pair_enumeration() {
        let s = [sample("b", "x", 0.0), sample("b", "y", 0.5), sample("b", "z", 1.0), sample("c", "lonely", 0.2)];
        let pairs = make_pairs(&s, 3, 9);
        assert_eq!(pairs.len(), 6);
        let unordered: BTreeSet<(String, String)> = pairs
            .iter()
            .map(|p| {
                let mut v = [p.image_a_path.clone(), p.image_b_path.clone()];
                v.sort();
                (v[0].clone(), v[1].clone())
            })
            .collect();
        assert_eq!(unordered.len(), 3);
    }

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(
            cfg.stages[0],
            TrainStage {
                freeze_encoder: true,
                epochs: 10,
                learning_rate: 1e-3,
                batch_size: 16
            }
        );
        assert!(!cfg.stages[1].freeze_encoder);
        assert_eq!((cfg.stages[1].epochs, cfg.stages[1].learning_rate), (10, 1e-5));
        assert_eq!(cfg.optimizer, "adamw");
        assert!(TrainConfig { stages: vec![], ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let m = ComparatorModel::new(encoder(), &DEFAULT_HIDDEN, HeadInit::ZeroFinal, 1);
        assert_eq!(comparator_predict(&m, &solid(10), &solid(200)), 0.0);
        assert_eq!(m.head_widths(), vec![32, 512, 128, 1]);
        let (a, b) = m.branch_encoders();
        assert!(std::ptr::eq(a as *const _ as *const u8, b as *const _ as *const u8));
    }

    #[test]
    fn comparator_overfits_ten_pairs() {
        let pairs: Vec<PairExample> = (0..10)
            .map(|i| PairExample {
                image_a_path: format!("s{i}.png"),
                image_b_path: format!("s{}.png", (i + 3) % 10),
                target: ((i as f64) - 4.5) / 5.0,
                base_id: "b".into(),
            })
            .collect();
        let cfg = TrainConfig {
            stages: vec![TrainStage {
                freeze_encoder: false,
                epochs: 200,
                learning_rate: 1e-3,
                batch_size: 10,
            }],
            ..Default::default()
        };
        let mut m = ComparatorModel::new(encoder(), &[64, 32], HeadInit::Random, 0);
        let mut stages = 0;
        let report = train_comparator(&mut m, &pairs, &cfg, &loader, &mut |_| {
            stages += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(stages, 1);
        assert!(report.final_train_loss < 0.05, "{}", report.final_train_loss);
        assert!(train_comparator(&mut m, &[], &cfg, &loader, &mut no_hook()).is_err());
    }

    #[test]
    fn estimator_overfits_twenty_images() {
        let labeled: Vec<LabeledImage> = (0..20)
            .map(|i| LabeledImage {
                path: format!("s{i}.png"),
                score: 1.0 + 9.0 * i as f64 / 19.0,
            })
            .collect();
        let cfg = TrainConfig {
            stages: vec![TrainStage {
                freeze_encoder: false,
                epochs: 300,
                learning_rate: 1e-3,
                batch_size: 4,
            }],
            val_fraction: 0.0,
            ..Default::default()
        };
        let mut m = EstimatorModel::new(encoder(), &[64, 32], HeadInit::Random, 0);
        // Colours must not wrap, or near-identical images carry distant scores.
        let spread = |path: &str| -> Result<RgbImage> {
            let n: u8 = path.trim_end_matches(".png").trim_start_matches('s').parse().unwrap();
            Ok(solid(n * 13))
        };
        let report = train_estimator(&mut m, &labeled, &cfg, &spread, &mut no_hook()).unwrap();
        assert!(report.final_train_loss < 0.1, "{}", report.final_train_loss);
        let bad = [LabeledImage {
            path: "s1.png".into(),
            score: 11.0,
        }];
        assert!(matches!(
            train_estimator(&mut m, &bad, &cfg, &loader, &mut no_hook()),
            Err(AppealError::Validation { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ComparatorModel::new(encoder(), &[8], HeadInit::Random, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("comparator.json");
        let meta = CheckpointMeta::new(&m.head, m.encoder.as_ref(), &TrainConfig::default(), None);
        m.save(&path, &meta).unwrap();
        let back = ComparatorModel::load(&path).unwrap();
        assert_eq!(comparator_predict(&m, &solid(3), &solid(90)), comparator_predict(&back, &solid(3), &solid(90)));
        assert_eq!(read_meta(&path).unwrap(), meta);
        assert!(EstimatorModel::load(&path).is_err());
    }
}
