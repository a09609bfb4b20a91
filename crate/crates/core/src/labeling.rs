//! Absolute labels from the relative comparator by exemplar voting.
//!
//! `raw(i) = mean_v compare(i, v)` over a fixed exemplar set, so a positive
//! raw means the image beats the exemplars on average. Raws are min-max
//! scaled to 1..10 over the whole dataset.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::ImageRecord;
use crate::domain::Polarity;
use crate::error::{AppealError, Result};
use crate::field::derive_seed;
use crate::manifest::{append_jsonl, read_jsonl};
use crate::models::{ComparatorModel, ImageLoader};

pub const STRATIFIED: &str = "stratified-polarity";
pub const DEFAULT_EXEMPLARS: usize = 100;
/// Share of images allowed to fail before labelling aborts.
pub const MAX_FAILURE_RATE: f64 = 0.01;
const ATTEMPTS: usize = 3;
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub ids: Vec<String>,
    pub selection_seed: u64,
    pub strategy: String,
}

/// Half the exemplars from each polarity, uniformly under `seed`. When one
/// side is short the other makes up the difference.
pub fn select_exemplars(records: &[ImageRecord], n: usize, seed: u64) -> Result<ExemplarSet> {
    if n == 0 {
        return Err(AppealError::validation("exemplars", "count must be positive"));
    }
    if n > records.len() {
        return Err(AppealError::validation(
            "exemplars",
            format!("asked for {n} but only {} records", records.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["exemplars"]));
    let mut side = |p: Polarity| {
        let mut ids: Vec<&str> = records.iter().filter(|r| r.polarity() == p).map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut rng);
        ids
    };
    let pos = side(Polarity::Positive);
    let neg = side(Polarity::Negative);
    let want_pos = (n / 2).max(n.saturating_sub(neg.len())).min(pos.len());
    let want_neg = (n - want_pos).min(neg.len());
    let ids: Vec<String> = pos[..want_pos]
        .iter()
        .chain(&neg[..want_neg])
        .map(|s| (*s).to_owned())
        .collect();
    if ids.len() < n {
        return Err(AppealError::validation(
            "exemplars",
            format!("only {} distinct records available for {n} exemplars", ids.len()),
        ));
    }
    Ok(ExemplarSet {
        ids,
        selection_seed: seed,
        strategy: STRATIFIED.into(),
    })
}

/// Anything that compares two images through per-image features.
pub trait Comparator: Sync {
    fn features(&self, image: &RgbImage) -> Vec<f64>;
    /// Predicted appeal of `a` minus appeal of `b`.
    fn compare(&self, a: &[f64], b: &[f64]) -> f64;
}

impl Comparator for ComparatorModel {
    fn features(&self, image: &RgbImage) -> Vec<f64> {
        ComparatorModel::features(self, image)
    }

    fn compare(&self, a: &[f64], b: &[f64]) -> f64 {
        self.predict_features(a, b)
    }
}

/// Exemplar features, computed once.
#[derive(Clone, Debug)]
pub struct ResolvedExemplars {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
}

/// Every exemplar must load; there is no partial exemplar set.
pub fn resolve_exemplars(
    set: &ExemplarSet,
    paths: &HashMap<String, String>,
    model: &dyn Comparator,
    loader: &ImageLoader<'_>,
) -> Result<ResolvedExemplars> {
    if set.ids.is_empty() {
        return Err(AppealError::validation("exemplars", "set is empty"));
    }
    let features = set
        .ids
        .par_iter()
        .map(|id| {
            let path = paths
                .get(id)
                .ok_or_else(|| AppealError::validation("exemplars", format!("exemplar {id} has no image")))?;
            Ok(model.features(&loader(path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResolvedExemplars {
        ids: set.ids.clone(),
        features,
    })
}

pub fn vote_features(features: &[f64], exemplars: &ResolvedExemplars, model: &dyn Comparator) -> f64 {
    let total: f64 = exemplars.features.iter().map(|v| model.compare(features, v)).sum();
    total / exemplars.features.len() as f64
}

/// Mean comparator outcome of `image` against every exemplar.
pub fn vote_score(image: &RgbImage, exemplars: &ResolvedExemplars, model: &dyn Comparator) -> f64 {
    vote_features(&model.features(image), exemplars, model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawScore {
    pub image_id: String,
    pub raw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppealLabel {
    pub image_id: String,
    pub raw: f64,
    pub scaled: f64,
}

/// `1 + 9 (raw - min) / (max - min)`, evaluated from the max side so both
/// endpoints land exactly; 5.5 everywhere when all raws agree.
pub fn scale_scores(raws: &[RawScore]) -> Vec<AppealLabel> {
    let min = raws.iter().map(|r| r.raw).fold(f64::INFINITY, f64::min);
    let max = raws.iter().map(|r| r.raw).fold(f64::NEG_INFINITY, f64::max);
    raws.iter()
        .map(|r| AppealLabel {
            image_id: r.image_id.clone(),
            raw: r.raw,
            scaled: if max > min {
                10.0 - 9.0 * ((max - r.raw) / (max - min))
            } else {
                5.5
            },
        })
        .collect()
}

/// An image to label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTarget {
    pub id: String,
    pub path: String,
}

/// Votes every target, caching raws in `cache` (JSONL, appended in target
/// order), then scales over the full set. Cached raws are reused as is.
pub fn annotate_dataset(
    targets: &[LabelTarget],
    exemplars: &ResolvedExemplars,
    model: &dyn Comparator,
    loader: &ImageLoader<'_>,
    cache: Option<&Path>,
) -> Result<Vec<AppealLabel>> {
    let mut known: HashMap<String, f64> = HashMap::new();
    if let Some(path) = cache.filter(|p| p.exists()) {
        for row in read_jsonl::<RawScore>(path)? {
            known.insert(row.image_id, row.raw);
        }
    }
    let pending: Vec<&LabelTarget> = targets.iter().filter(|t| !known.contains_key(&t.id)).collect();
    let mut failures = Vec::new();
    for chunk in pending.chunks(CHUNK) {
        let results: Vec<Result<f64>> = chunk
            .par_iter()
            .map(|t| {
                let mut last = None;
                for _ in 0..ATTEMPTS {
                    match loader(&t.path) {
                        Ok(img) => return Ok(vote_score(&img, exemplars, model)),
                        Err(e) => last = Some(e),
                    }
                }
                Err(last.expect("at least one attempt"))
            })
            .collect();
        for (t, r) in chunk.iter().zip(results) {
            match r {
                Ok(raw) => {
                    if let Some(path) = cache {
                        append_jsonl(
                            path,
                            &RawScore {
                                image_id: t.id.clone(),
                                raw,
                            },
                        )?;
                    }
                    known.insert(t.id.clone(), raw);
                }
                Err(e) => {
                    warn!("labelling {} failed: {e}", t.id);
                    failures.push(t.id.clone());
                }
            }
        }
        if failures.len() as f64 > MAX_FAILURE_RATE * targets.len() as f64 {
            return Err(AppealError::Stage {
                stage: "label".into(),
                message: format!("{} of {} images failed (first: {})", failures.len(), targets.len(), failures[0]),
            });
        }
    }
    let raws: Vec<RawScore> = targets
        .iter()
        .filter_map(|t| {
            known.get(&t.id).map(|&raw| RawScore {
                image_id: t.id.clone(),
                raw,
            })
        })
        .collect();
    Ok(scale_scores(&raws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::RecordStatus;
    use crate::domain::SearchQuery;
    use image::Rgb;

    fn record(id: &str, polarity: Polarity) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            source: "mock".into(),
            query: SearchQuery {
                text: "x y".into(),
                polarity,
                negative_group: None,
                adjective: "x".into(),
                noun: "y".into(),
            },
            rank: 1,
            path: format!("{id}.png"),
            width: 4,
            height: 4,
            caption: None,
            relevancy_fraction: None,
            status: RecordStatus::Kept,
        }
    }

    fn corpus(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .flat_map(|i| [record(&format!("p{i:03}"), Polarity::Positive), record(&format!("n{i:03}"), Polarity::Negative)])
            .collect()
    }

    #[test]
    fn exemplar_stratification() {
        let records = corpus(500);
        let set = select_exemplars(&records, 100, 7).unwrap();
        assert_eq!(set.ids.iter().filter(|id| id.starts_with('p')).count(), 50);
        assert_eq!(set.ids.iter().filter(|id| id.starts_with('n')).count(), 50);
        assert_eq!(set, select_exemplars(&records, 100, 7).unwrap());
        let small = corpus(2);
        let mut all = select_exemplars(&small, 4, 1).unwrap().ids;
        all.sort();
        assert_eq!(all, vec!["n000", "n001", "p000", "p001"]);
        assert!(select_exemplars(&small, 5, 1).is_err());
    }

    /// Features are `[v]`; compare looks up a fixed table by exemplar value.
    struct Table(HashMap<u64, f64>);

    impl Comparator for Table {
        fn features(&self, image: &RgbImage) -> Vec<f64> {
            vec![image.get_pixel(0, 0)[0] as f64]
        }

        fn compare(&self, _a: &[f64], b: &[f64]) -> f64 {
            self.0[&(b[0] as u64)]
        }
    }

    fn px(v: u8) -> RgbImage {
        RgbImage::from_pixel(1, 1, Rgb([v, 0, 0]))
    }

    #[test]
    fn voting_means() {
        let constant = Table([(1, 0.3), (2, 0.3)].into());
        let ex = ResolvedExemplars {
            ids: vec!["a".into(), "b".into()],
            features: vec![vec![1.0], vec![2.0]],
        };
        assert!((vote_score(&px(9), &ex, &constant) - 0.3).abs() < 1e-15);
        let three = Table([(1, 0.2), (2, -0.1), (3, 0.5)].into());
        let ex = ResolvedExemplars {
            ids: vec!["a".into(), "b".into(), "c".into()],
            features: vec![vec![1.0], vec![2.0], vec![3.0]],
        };
        assert!((vote_score(&px(9), &ex, &three) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn scaling_examples() {
        let raws = |v: &[f64]| -> Vec<RawScore> {
            v.iter()
                .enumerate()
                .map(|(i, &raw)| RawScore {
                    image_id: i.to_string(),
                    raw,
                })
                .collect()
        };
        let scaled: Vec<f64> = scale_scores(&raws(&[-0.5, 0.0, 0.5])).iter().map(|l| l.scaled).collect();
        assert_eq!(scaled, vec![1.0, 5.5, 10.0]);
        assert!(scale_scores(&raws(&[0.2, 0.2])).iter().all(|l| l.scaled == 5.5));
        assert!(scale_scores(&[]).is_empty());
    }

    struct Mean;

    impl Comparator for Mean {
        fn features(&self, image: &RgbImage) -> Vec<f64> {
            vec![image.get_pixel(0, 0)[0] as f64 / 255.0]
        }

        fn compare(&self, a: &[f64], b: &[f64]) -> f64 {
            a[0] - b[0]
        }
    }

    fn load_px(path: &str) -> Result<RgbImage> {
        match path.parse::<u8>() {
            Ok(v) => Ok(px(v)),
            Err(_) => Err(AppealError::validation("path", path)),
        }
    }

    #[test]
    fn annotate_endpoints_cache_and_failures() {
        let targets: Vec<LabelTarget> = (0..20)
            .map(|i| LabelTarget {
                id: format!("img{i}"),
                path: (i * 7).to_string(),
            })
            .collect();
        let paths: HashMap<String, String> = [("e1".to_string(), "30".to_string()), ("e2".into(), "200".into())].into();
        let set = ExemplarSet {
            ids: vec!["e1".into(), "e2".into()],
            selection_seed: 0,
            strategy: STRATIFIED.into(),
        };
        let ex = resolve_exemplars(&set, &paths, &Mean, &load_px).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("raws.jsonl");
        let labels = annotate_dataset(&targets, &ex, &Mean, &load_px, Some(&cache)).unwrap();
        assert_eq!(labels.len(), 20);
        assert_eq!(labels[0].scaled, 1.0);
        assert_eq!(labels[19].scaled, 10.0);
        let again = annotate_dataset(&targets, &ex, &Mean, &load_px, Some(&cache)).unwrap();
        assert_eq!(labels, again);
        assert_eq!(read_jsonl::<RawScore>(&cache).unwrap().len(), 20);

        let mut broken = targets.clone();
        broken[3].path = "missing".into();
        assert!(annotate_dataset(&broken, &ex, &Mean, &load_px, None).is_err());
        let bad_set = ExemplarSet {
            ids: vec!["e1".into(), "nope".into()],
            ..set
        };
        assert!(resolve_exemplars(&bad_set, &paths, &Mean, &load_px).is_err());
    }
}
