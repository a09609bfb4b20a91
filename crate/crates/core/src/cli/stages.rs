use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{load_run_config, RunConfig};
use crate::acquisition::{fetch_thumbnails, normalize_image, normalize_record, ImageRecord, RecordStatus};
use crate::appealmap::{build_heatmap, enhance, enhance_report, estimate_depth, overlay, patch_scores};
use crate::backends::mock::{caption_sidecar, mask_sidecar};
use crate::backends::BackendRegistry;
use crate::domain::{generate_queries, DomainConfig, Polarity, SearchQuery};
use crate::error::{AppealError, Result};
use crate::eval::correlations;
use crate::field::{derive_seed, load_rgb, save_png, ScalarField};
use crate::labeling::{annotate_dataset, resolve_exemplars, select_exemplars, AppealLabel, LabelTarget};
use crate::manifest::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use crate::models::{
    make_pairs, train_comparator, train_estimator, CheckpointMeta, ComparatorModel, EstimatorModel, HeadInit,
    LabeledImage, TrainReport,
};
use crate::relevancy::{
    area_filter, balance_polarity, build_relevancy_map, caption_image, extract_domain_phrases, object_type, Lexicon,
    RuleChunker,
};
use crate::synthesis::{
    generate_synthetic_set, plan_base, train_polarity_embedding, EmbeddingSet, PolarityEmbedding, SynthesisBase,
    SyntheticSample,
};

const QUERIES: &str = "queries.jsonl";
const FETCHED: &str = "fetched.jsonl";
const FETCH_ERRORS: &str = "fetch_errors.jsonl";
const FILTERED: &str = "filtered.jsonl";
const RESERVED: &str = "reserved.json";
const EMBEDDINGS: &str = "embeddings";
const SYNTHETIC: &str = "synthetic.jsonl";
const PAIRS: &str = "pairs.jsonl";
const COMPARATOR: &str = "models/comparator.json";
const COMPARATOR_REPORT: &str = "models/comparator.report.json";
const EXEMPLARS: &str = "exemplars.json";
const RAWS: &str = "raws.jsonl";
const RAWS_KEY: &str = "raws.key";
const LABELS: &str = "labels.jsonl";
const ESTIMATOR: &str = "models/estimator.json";
const ESTIMATOR_REPORT: &str = "models/estimator.report.json";
const LOCK: &str = ".appeal.lock";
const POSITIVE_STEM: &str = "positive";
const SYNTH_CHUNK: usize = 16;
const FILTER_ATTEMPTS: usize = 3;

/// Exclusive claim on a work directory for the life of one stage.
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| AppealError::io(dir, e))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AppealError::Stage {
                stage: "lock".into(),
                message: format!("{} is held by another run; delete it if that run is gone", path.display()),
            }),
            Err(e) => Err(AppealError::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Everything a stage needs: config, domain and the domain's directory.
pub struct Ctx {
    pub cfg: RunConfig,
    pub domain: DomainConfig,
    pub dir: PathBuf,
}

impl Ctx {
    pub fn load(config: &Path) -> Result<Self> {
        let (cfg, domain) = load_run_config(config)?;
        let dir = cfg.workdir.join(&domain.name);
        Ok(Self { cfg, domain, dir })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn registry(&self) -> Result<BackendRegistry> {
        BackendRegistry::from_config(&self.cfg.backends, Some(&self.path("sidecar")))
    }

    fn seed(&self, tag: &str) -> u64 {
        derive_seed(self.cfg.seed, &[tag])
    }

    /// Errors with the command to run when `rel` has not been produced yet.
    fn require(&self, stage: &str, rel: &str, prerequisite: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(AppealError::MissingPrerequisite {
                stage: stage.into(),
                missing: path,
                prerequisite: prerequisite.into(),
            })
        }
    }

    fn load_image(&self, rel: &str) -> Result<RgbImage> {
        load_rgb(&self.dir.join(rel))
    }
}

pub fn queries(ctx: &Ctx) -> Result<()> {
    let queries = generate_queries(&ctx.domain);
    write_jsonl(&ctx.path(QUERIES), &queries)?;
    println!("{} queries -> {}", queries.len(), ctx.path(QUERIES).display());
    Ok(())
}

pub fn fetch(ctx: &Ctx) -> Result<()> {
    let queries: Vec<SearchQuery> = read_jsonl(&ctx.require("fetch", QUERIES, "queries")?)?;
    let source = ctx.registry()?.image_source()?;
    let outcome = fetch_thumbnails(&queries, source.as_ref(), ctx.cfg.pipeline.top_k, &ctx.dir, "thumbs")?;
    let raw = ctx.path("sidecar/raw");
    for s in &outcome.sidecars {
        if let Some(c) = &s.caption {
            write_atomic(&caption_sidecar(&raw, &s.id), c.as_bytes())?;
        }
        if let Some(m) = &s.mask_png {
            write_atomic(&mask_sidecar(&raw, &s.id), m)?;
        }
    }
    write_jsonl(&ctx.path(FETCH_ERRORS), &outcome.errors)?;
    if outcome.records.is_empty() {
        return Err(AppealError::Stage {
            stage: "fetch".into(),
            message: format!("no images retrieved for {} queries", queries.len()),
        });
    }
    write_jsonl(&ctx.path(FETCHED), &outcome.records)?;
    println!(
        "{} images fetched, {} queries failed -> {}",
        outcome.records.len(),
        outcome.errors.len(),
        ctx.path(FETCHED).display()
    );
    Ok(())
}

/// Maps raw sidecars onto the normalised image grid so the mock
/// segmenter and captioner see data aligned with what they are given.
fn align_sidecars(ctx: &Ctx, id: &str, geometry: &crate::acquisition::PadGeometry) -> Result<()> {
    let (raw, aligned) = (ctx.path("sidecar/raw"), ctx.path("sidecar"));
    let mask = mask_sidecar(&raw, id);
    if mask.is_file() {
        geometry.apply_to_field(&ScalarField::load_png(&mask)?).save_png(&mask_sidecar(&aligned, id))?;
    }
    let caption = caption_sidecar(&raw, id);
    if caption.is_file() {
        let text = std::fs::read(&caption).map_err(|e| AppealError::io(&caption, e))?;
        write_atomic(&caption_sidecar(&aligned, id), &text)?;
    }
    Ok(())
}

fn filter_record(ctx: &Ctx, reg: &BackendRegistry, lexicon: &Lexicon, rec: &mut ImageRecord) -> Result<()> {
    let upscaler = reg.upscaler()?;
    let geometry = normalize_record(rec, upscaler.as_ref(), ctx.domain.output_size, &ctx.dir, "images")?;
    align_sidecars(ctx, &rec.id, &geometry)?;
    let img = ctx.load_image(&rec.path)?;
    let caption = caption_image(&rec.id, &img, reg.captioner()?.as_ref())?;
    rec.caption = Some(caption.clone());
    if caption.is_empty() {
        return rec.set_status(RecordStatus::FilteredCaption);
    }
    let phrases = extract_domain_phrases(&caption, &ctx.domain.lexnames, lexicon, &RuleChunker)?;
    if !phrases.is_relevant() {
        return rec.set_status(RecordStatus::FilteredCaption);
    }
    let map = build_relevancy_map(&rec.id, &img, &phrases, reg.segmenter()?.as_ref(), ctx.cfg.pipeline.aggregate)?;
    map.save_png(&ctx.path(&format!("relevancy/{}.png", rec.id)))?;
    area_filter(rec, &map, ctx.domain.gamma)?;
    Ok(())
}

pub fn filter(ctx: &Ctx) -> Result<()> {
    let fetched: Vec<ImageRecord> = read_jsonl(&ctx.require("filter", FETCHED, "fetch")?)?;
    let reg = ctx.registry()?;
    let lexicon = ctx.cfg.lexicon()?;
    let results: Vec<(ImageRecord, Option<String>)> = fetched
        .into_par_iter()
        .map(|original| {
            let mut last = String::new();
            for _ in 0..FILTER_ATTEMPTS {
                let mut rec = original.clone();
                match filter_record(ctx, &reg, &lexicon, &mut rec) {
                    Ok(()) => return (rec, None),
                    Err(e) if e.is_retryable() => last = e.to_string(),
                    Err(e) => return (original, Some(e.to_string())),
                }
            }
            (original, Some(last))
        })
        .collect();
    let total = results.len();
    let mut records = Vec::with_capacity(total);
    let mut failures = 0;
    for (rec, err) in results {
        if let Some(msg) = err {
            warn!("filtering {} failed: {msg}", rec.id);
            failures += 1;
        }
        records.push(rec);
    }
    if failures as f64 > ctx.cfg.pipeline.max_failure_rate * total as f64 {
        return Err(AppealError::Stage {
            stage: "filter".into(),
            message: format!("{failures} of {total} images failed"),
        });
    }
    balance_polarity(&mut records)?;
    write_jsonl(&ctx.path(FILTERED), &records)?;
    let kept = records.iter().filter(|r| r.status == RecordStatus::Kept).count();
    println!("{kept} of {total} images kept -> {}", ctx.path(FILTERED).display());
    Ok(())
}

/// Images set aside for inversion and as synthesis bases; never labelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reserved {
    pub positive: Vec<String>,
    pub negatives: BTreeMap<String, Vec<String>>,
    pub bases: Vec<String>,
}

impl Reserved {
    fn all_ids(&self) -> HashSet<&str> {
        self.positive
            .iter()
            .chain(self.negatives.values().flatten())
            .chain(&self.bases)
            .map(String::as_str)
            .collect()
    }
}

fn kept(records: &[ImageRecord]) -> Vec<&ImageRecord> {
    let mut kept: Vec<&ImageRecord> = records.iter().filter(|r| r.status == RecordStatus::Kept).collect();
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    kept
}

fn reserve(ctx: &Ctx, records: &[ImageRecord]) -> Result<Reserved> {
    let kept = kept(records);
    let n_inv = ctx.cfg.pipeline.inversion_exemplars;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed("reserve"));
    let mut draw = |pool: Vec<&ImageRecord>, what: &str| -> Result<Vec<String>> {
        if pool.is_empty() {
            return Err(AppealError::validation("filtered", format!("no kept images for {what}")));
        }
        let mut ids: Vec<String> = pool.iter().map(|r| r.id.clone()).collect();
        ids.shuffle(&mut rng);
        ids.truncate(n_inv);
        Ok(ids)
    };
    let positive = draw(kept.iter().copied().filter(|r| r.polarity() == Polarity::Positive).collect(), "the positive embedding")?;
    let mut negatives = BTreeMap::new();
    for group in ctx.domain.group_names() {
        let pool = kept
            .iter()
            .copied()
            .filter(|r| r.query.negative_group.as_deref() == Some(group))
            .collect();
        negatives.insert(group.to_owned(), draw(pool, &format!("negative group `{group}`"))?);
    }
    let taken: HashSet<&str> = positive.iter().chain(negatives.values().flatten()).map(String::as_str).collect();
    let mut side = |p: Polarity| {
        let mut ids: Vec<String> = kept
            .iter()
            .filter(|r| r.polarity() == p && !taken.contains(r.id.as_str()))
            .map(|r| r.id.clone())
            .collect();
        ids.shuffle(&mut rng);
        ids
    };
    let (pos, neg) = (side(Polarity::Positive), side(Polarity::Negative));
    let remaining = pos.len() + neg.len();
    let n_bases = ctx.cfg.pipeline.n_bases;
    if n_bases >= remaining {
        return Err(AppealError::validation(
            "pipeline.n_bases",
            format!("{n_bases} bases would leave none of the {remaining} remaining kept images to label"),
        ));
    }
    // Alternate polarities so bases are balanced; the longer side fills in.
    let mut bases = Vec::with_capacity(n_bases);
    let (mut pi, mut ni) = (pos.into_iter(), neg.into_iter());
    while bases.len() < n_bases {
        let first = if bases.len() % 2 == 0 { pi.next() } else { ni.next() };
        match first.or_else(|| pi.next()).or_else(|| ni.next()) {
            Some(id) => bases.push(id),
            None => break,
        }
    }
    Ok(Reserved {
        positive,
        negatives,
        bases,
    })
}

fn negative_stem(group: &str) -> String {
    format!("negative-{group}")
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let records: Vec<ImageRecord> = read_jsonl(&ctx.require("synth", FILTERED, "filter")?)?;
    let by_id: HashMap<&str, &ImageRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let reserved = reserve(ctx, &records)?;
    write_json(&ctx.path(RESERVED), &reserved)?;

    let reg = ctx.registry()?;
    let trainer = reg.inversion_trainer()?;
    let exemplars = |ids: &[String]| -> Result<Vec<(String, RgbImage)>> {
        ids.iter()
            .map(|id| Ok((id.clone(), ctx.load_image(&by_id[id.as_str()].path)?)))
            .collect()
    };
    let emb_dir = ctx.path(EMBEDDINGS);
    let positive = train_polarity_embedding(&exemplars(&reserved.positive)?, Polarity::Positive, None, trainer.as_ref(), &ctx.cfg.inversion)?;
    positive.save(&emb_dir, POSITIVE_STEM)?;
    let mut negatives = BTreeMap::new();
    for (group, ids) in &reserved.negatives {
        let z = train_polarity_embedding(&exemplars(ids)?, Polarity::Negative, Some(group), trainer.as_ref(), &ctx.cfg.inversion)?;
        z.save(&emb_dir, &negative_stem(group))?;
        negatives.insert(group.clone(), z);
    }
    let embeddings = EmbeddingSet { positive, negatives };

    let manifest = ctx.path(SYNTHETIC);
    let mut have: HashMap<String, SyntheticSample> = if manifest.exists() {
        read_jsonl::<SyntheticSample>(&manifest)?
            .into_iter()
            .filter(|s| ctx.path(&s.path).is_file())
            .map(|s| (s.id.clone(), s))
            .collect()
    } else {
        HashMap::new()
    };
    let plan = &ctx.domain.synthesis_plan;
    let groups: Vec<&str> = embeddings.negatives.keys().map(String::as_str).collect();
    let run_seed = ctx.seed("synth");
    let mut order = Vec::with_capacity(reserved.bases.len() * plan.samples_per_base());
    for base in &reserved.bases {
        order.extend(plan_base(base, plan, &groups, run_seed)?.into_iter().map(|p| p.id));
    }
    let inpainter = reg.inpainter()?;
    let sink = |id: &str, img: &RgbImage| -> Result<String> {
        let rel = format!("synthetic/{id}.png");
        save_png(img, &ctx.path(&rel))?;
        Ok(rel)
    };
    let write_manifest = |have: &HashMap<String, SyntheticSample>| -> Result<()> {
        let rows: Vec<&SyntheticSample> = order.iter().filter_map(|id| have.get(id)).collect();
        write_jsonl(&manifest, &rows)
    };
    let mut failures = 0;
    for chunk in reserved.bases.chunks(SYNTH_CHUNK) {
        let bases = chunk
            .iter()
            .map(|id| {
                let rec = by_id[id.as_str()];
                Ok(SynthesisBase {
                    id: id.clone(),
                    image: ctx.load_image(&rec.path)?,
                    caption: rec.caption.clone().unwrap_or_default(),
                    relevancy: ScalarField::load_png(&ctx.path(&format!("relevancy/{id}.png")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let done: HashSet<String> = have.keys().cloned().collect();
        let outcome = generate_synthetic_set(&bases, plan, &embeddings, inpainter.as_ref(), &ctx.cfg.synthesis, run_seed, &done, &sink)?;
        failures += outcome.failures.len();
        let fresh = !outcome.samples.is_empty();
        for s in outcome.samples {
            have.insert(s.id.clone(), s);
        }
        if fresh {
            write_manifest(&have)?;
        }
        info!("synthesised {} of {} samples", have.len(), order.len());
    }
    write_manifest(&have)?;
    if have.is_empty() {
        return Err(AppealError::Stage {
            stage: "synth".into(),
            message: format!("all {failures} samples failed"),
        });
    }
    println!(
        "{} synthetic samples from {} bases ({failures} failed) -> {}",
        have.len(),
        reserved.bases.len(),
        manifest.display()
    );
    Ok(())
}

fn stage_logger(what: &'static str) -> impl FnMut(usize) -> Result<()> {
    move |stage| {
        info!("{what}: training stage {} done", stage + 1);
        Ok(())
    }
}

fn with_seed(cfg: &crate::models::TrainConfig, seed: u64) -> crate::models::TrainConfig {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg
}

pub fn train_comparator_stage(ctx: &Ctx) -> Result<()> {
    let samples: Vec<SyntheticSample> = read_jsonl(&ctx.require("train-comparator", SYNTHETIC, "synth")?)?;
    let pairs = make_pairs(&samples, ctx.cfg.pipeline.per_base_pairs, ctx.seed("pairs"));
    write_jsonl(&ctx.path(PAIRS), &pairs)?;
    let reg = ctx.registry()?;
    let mut model = ComparatorModel::new(reg.new_encoder()?, &ctx.cfg.pipeline.head_hidden, HeadInit::Random, ctx.seed("comparator-init"));
    let train = with_seed(&ctx.cfg.training, ctx.seed("comparator-train"));
    let loader = |p: &str| ctx.load_image(p);
    let report = train_comparator(&mut model, &pairs, &train, &loader, &mut stage_logger("comparator"))?;
    let meta = CheckpointMeta::new(&model.head, model.encoder.as_ref(), &train, Some(&report));
    model.save(&ctx.path(COMPARATOR), &meta)?;
    write_json(&ctx.path(COMPARATOR_REPORT), &report)?;
    print_losses("comparator", &report, pairs.len());
    Ok(())
}

fn print_losses(what: &str, report: &TrainReport, n: usize) {
    match report.final_val_loss {
        Some(v) => println!("{what}: {n} examples, train L1 {:.4}, val L1 {v:.4}", report.final_train_loss),
        None => println!("{what}: {n} examples, train L1 {:.4}", report.final_train_loss),
    }
}

/// Identifies the comparator and exemplars a raw-score cache was built with.
fn cache_key(paths: &[PathBuf]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(std::fs::read(p).map_err(|e| AppealError::io(p, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn label(ctx: &Ctx) -> Result<()> {
    let comparator_path = ctx.require("label", COMPARATOR, "train-comparator")?;
    let reserved: Reserved = read_json(&ctx.require("label", RESERVED, "synth")?)?;
    let records: Vec<ImageRecord> = read_jsonl(&ctx.require("label", FILTERED, "filter")?)?;
    let excluded = reserved.all_ids();
    let pool: Vec<ImageRecord> = kept(&records)
        .into_iter()
        .filter(|r| !excluded.contains(r.id.as_str()))
        .cloned()
        .collect();
    if pool.is_empty() {
        return Err(AppealError::validation("filtered", "no kept images are left to label"));
    }
    let n = ctx.cfg.pipeline.n_exemplars.min(pool.len());
    if n < ctx.cfg.pipeline.n_exemplars {
        warn!("only {n} images available as voting exemplars");
    }
    let set = select_exemplars(&pool, n, ctx.seed("exemplars"))?;
    write_json(&ctx.path(EXEMPLARS), &set)?;

    let model = ComparatorModel::load(&comparator_path)?;
    let paths: HashMap<String, String> = pool.iter().map(|r| (r.id.clone(), r.path.clone())).collect();
    let loader = |p: &str| ctx.load_image(p);
    let resolved = resolve_exemplars(&set, &paths, &model, &loader)?;

    let (raws, key_path) = (ctx.path(RAWS), ctx.path(RAWS_KEY));
    let key = cache_key(&[comparator_path, ctx.path(EXEMPLARS)])?;
    let cached = std::fs::read_to_string(&key_path).ok();
    if cached.as_deref().map(str::trim) != Some(key.as_str()) {
        if raws.exists() {
            info!("comparator or exemplars changed; discarding cached raw scores");
            std::fs::remove_file(&raws).map_err(|e| AppealError::io(&raws, e))?;
        }
        write_atomic(&key_path, key.as_bytes())?;
    }
    let targets: Vec<LabelTarget> = pool
        .iter()
        .map(|r| LabelTarget {
            id: r.id.clone(),
            path: r.path.clone(),
        })
        .collect();
    let labels = annotate_dataset(&targets, &resolved, &model, &loader, Some(&raws))?;
    write_jsonl(&ctx.path(LABELS), &labels)?;
    println!("{} images labelled against {n} exemplars -> {}", labels.len(), ctx.path(LABELS).display());
    Ok(())
}

pub fn train_estimator_stage(ctx: &Ctx) -> Result<()> {
    let labels: Vec<AppealLabel> = read_jsonl(&ctx.require("train-estimator", LABELS, "label")?)?;
    let records: Vec<ImageRecord> = read_jsonl(&ctx.require("train-estimator", FILTERED, "filter")?)?;
    let paths: HashMap<&str, &str> = records.iter().map(|r| (r.id.as_str(), r.path.as_str())).collect();
    let labeled = labels
        .iter()
        .map(|l| {
            let path = paths.get(l.image_id.as_str()).ok_or_else(|| {
                AppealError::validation("labels", format!("{} is not in the filtered manifest", l.image_id))
            })?;
            Ok(LabeledImage {
                path: (*path).to_owned(),
                score: l.scaled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reg = ctx.registry()?;
    let mut model = EstimatorModel::new(reg.new_encoder()?, &ctx.cfg.pipeline.head_hidden, HeadInit::Random, ctx.seed("estimator-init"));
    let train = with_seed(&ctx.cfg.training, ctx.seed("estimator-train"));
    let loader = |p: &str| ctx.load_image(p);
    let report = train_estimator(&mut model, &labeled, &train, &loader, &mut stage_logger("estimator"))?;
    let meta = CheckpointMeta::new(&model.head, model.encoder.as_ref(), &train, Some(&report));
    model.save(&ctx.path(ESTIMATOR), &meta)?;

    let predictions = labeled
        .par_iter()
        .map(|l| Ok(model.predict(&ctx.load_image(&l.path)?)))
        .collect::<Result<Vec<f64>>>()?;
    let truth: Vec<f64> = labeled.iter().map(|l| l.score).collect();
    let fit = correlations(&predictions, &truth).ok();
    write_json(&ctx.path(ESTIMATOR_REPORT), &serde_json::json!({ "training": report, "fit": fit }))?;
    print_losses("estimator", &report, labeled.len());
    if let Some(m) = fit {
        println!("estimator fit on labels: MAE {:.4}, SRCC {:.4}", m.mae, m.srcc);
    }
    Ok(())
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| AppealError::validation("image", format!("{} has no usable file name", path.display())))
}

fn out_dir(out: Option<&Path>, image: &Path) -> PathBuf {
    match out {
        Some(dir) => dir.to_path_buf(),
        None => image.parent().map(Path::to_path_buf).unwrap_or_default(),
    }
}

fn load_estimator(ctx: &Ctx, stage: &str) -> Result<EstimatorModel> {
    EstimatorModel::load(&ctx.require(stage, ESTIMATOR, "train-estimator")?)
}

#[derive(Serialize)]
struct ScoreRow {
    image_id: String,
    path: String,
    score: f64,
}

pub fn score(ctx: &Ctx, images: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let model = load_estimator(ctx, "score")?;
    let upscaler = ctx.registry()?.upscaler()?;
    let rows = images
        .par_iter()
        .map(|p| {
            let img = normalize_image(&load_rgb(p)?, upscaler.as_ref(), ctx.domain.output_size)?.image;
            Ok(ScoreRow {
                image_id: stem(p)?,
                path: p.display().to_string(),
                score: model.predict(&img),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for row in &rows {
        println!("{}", serde_json::to_string(row)?);
    }
    if let Some(path) = out {
        write_jsonl(path, &rows)?;
    }
    Ok(())
}

pub fn heatmap(ctx: &Ctx, images: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let model = load_estimator(ctx, "heatmap")?;
    for p in images {
        let img = load_rgb(p)?;
        let grid = patch_scores(&img, &ctx.cfg.heatmap, &model)?;
        let map = build_heatmap(&grid)?;
        let (dir, id) = (out_dir(out, p), stem(p)?);
        map.save_png(&dir.join(format!("{id}_heatmap.png")))?;
        save_png(&overlay(&img, &map)?, &dir.join(format!("{id}_overlay.png")))?;
        write_json(&dir.join(format!("{id}_patches.json")), &grid)?;
        println!("{} -> {}", p.display(), dir.join(format!("{id}_heatmap.png")).display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EnhanceRow<'a> {
    image_id: &'a str,
    object_type: &'a str,
    output: String,
    #[serde(flatten)]
    report: crate::appealmap::EnhanceReport,
}

pub fn enhance_images(ctx: &Ctx, images: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let model = load_estimator(ctx, "enhance")?;
    let z_pos = {
        ctx.require("enhance", &format!("{EMBEDDINGS}/{POSITIVE_STEM}.json"), "synth")?;
        PolarityEmbedding::load(&ctx.path(EMBEDDINGS), POSITIVE_STEM)?
    };
    let reg = ctx.registry()?;
    let (captioner, inpainter) = (reg.captioner()?, reg.inpainter()?);
    let depth_backend = if ctx.cfg.enhance.depth_conditioning {
        match reg.depth() {
            Ok(d) => Some(d),
            Err(e) => {
                warn!("no depth backend ({e}); enhancing without depth");
                None
            }
        }
    } else {
        None
    };
    let lexicon = ctx.cfg.lexicon()?;
    for p in images {
        let img = load_rgb(p)?;
        let id = stem(p)?;
        let object = match caption_image(&id, &img, captioner.as_ref()) {
            Ok(c) if !c.is_empty() => extract_domain_phrases(&c, &ctx.domain.lexnames, &lexicon, &RuleChunker)
                .ok()
                .and_then(|ph| object_type(&ph, &lexicon)),
            Ok(_) => None,
            Err(e) => {
                warn!("captioning {id} failed: {e}");
                None
            }
        }
        .unwrap_or_else(|| ctx.domain.nouns[0].clone());
        let map = build_heatmap(&patch_scores(&img, &ctx.cfg.heatmap, &model)?)?;
        let depth = depth_backend.as_ref().and_then(|d| estimate_depth(&img, d.as_ref()));
        let mut cfg = ctx.cfg.enhance.clone();
        cfg.seed = derive_seed(ctx.cfg.seed, &["enhance", &cfg.seed.to_string(), &id]);
        let enhanced = enhance(&img, &object, Some(&z_pos), &map, depth.as_ref(), &cfg, inpainter.as_ref())?;
        let dir = out_dir(out, p);
        let output = dir.join(format!("{id}_enhanced.png"));
        save_png(&enhanced, &output)?;
        let row = EnhanceRow {
            image_id: &id,
            object_type: &object,
            output: output.display().to_string(),
            report: enhance_report(&img, &enhanced, &model),
        };
        write_json(&dir.join(format!("{id}_enhanced.json")), &row)?;
        println!("{}", serde_json::to_string(&row)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkdirLock::acquire(dir.path()).unwrap();
        assert!(matches!(WorkdirLock::acquire(dir.path()), Err(AppealError::Stage { .. })));
        drop(lock);
        assert!(WorkdirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn cache_key_tracks_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        std::fs::write(&p, "x").unwrap();
        let k1 = cache_key(std::slice::from_ref(&p)).unwrap();
        std::fs::write(&p, "y").unwrap();
        assert_ne!(k1, cache_key(&[p]).unwrap());
    }
}
