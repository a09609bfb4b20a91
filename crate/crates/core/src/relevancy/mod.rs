//! Domain-relevance filtering: caption screening, the relevancy map, the
//! area test and polarity balancing.

pub mod chunk;
pub mod lexicon;

use std::collections::HashSet;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::acquisition::{ImageRecord, RecordStatus};
use crate::backends::{Captioner, Segmenter};
use crate::domain::Polarity;
use crate::error::{AppealError, Result};
use crate::field::{image_dims, ScalarField};

pub use chunk::{Chunker, RuleChunker};
pub use lexicon::Lexicon;

/// Noun phrases of a caption and the subset that names domain objects.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSet {
    pub all_phrases: Vec<String>,
    pub domain_phrases: Vec<String>,
}

impl PhraseSet {
    pub fn is_relevant(&self) -> bool {
        !self.domain_phrases.is_empty()
    }
}

/// How per-phrase segmentation maps are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Pixelwise maximum.
    #[default]
    Max,
    /// Pixelwise sum divided by its maximum.
    SumNorm,
}

/// Captions an image; an empty caption comes back as `""` so the caller
/// can treat it as a lexical-filter failure.
pub fn caption_image(image_id: &str, image: &RgbImage, captioner: &dyn Captioner) -> Result<String> {
    Ok(captioner.caption(image_id, image)?.trim().to_owned())
}

fn words(phrase: &str) -> Vec<String> {
    phrase.split_whitespace().map(str::to_lowercase).collect()
}

fn matches_domain(words: &[String], lexnames: &HashSet<&str>, lexicon: &Lexicon) -> bool {
    // Multiword collocations first (e.g. "living room"), then single words.
    for len in (2..=words.len()).rev() {
        for window in words.windows(len) {
            if lexicon.lexnames(&window.join("_")).iter().any(|n| lexnames.contains(n)) {
                return true;
            }
        }
    }
    words
        .iter()
        .any(|w| lexicon.lexnames(w).iter().any(|n| lexnames.contains(n)))
}

/// All noun phrases of `caption`, and those containing at least one word
/// (or multiword lemma) whose lexname, in any sense, is in `lexnames`.
pub fn extract_domain_phrases(
    caption: &str,
    lexnames: &[String],
    lexicon: &Lexicon,
    chunker: &dyn Chunker,
) -> Result<PhraseSet> {
    if caption.trim().is_empty() {
        return Err(AppealError::validation("caption", "must not be empty"));
    }
    let wanted: HashSet<&str> = lexnames.iter().map(String::as_str).collect();
    let all_phrases = chunker.noun_phrases(caption);
    let domain_phrases = all_phrases
        .iter()
        .filter(|p| matches_domain(&words(p), &wanted, lexicon))
        .cloned()
        .collect();
    Ok(PhraseSet {
        all_phrases,
        domain_phrases,
    })
}

/// Head noun of a phrase: a trailing multiword lemma if the lexicon knows
/// one, else the last word.
pub fn head_noun(phrase: &str, lexicon: &Lexicon) -> Option<String> {
    let ws = words(phrase);
    let last = ws.last()?;
    for len in (2..=ws.len().min(3)).rev() {
        let tail = &ws[ws.len() - len..];
        if lexicon.contains(&tail.join("_")) {
            return Some(tail.join(" "));
        }
    }
    Some(last.clone())
}

/// Object type for the enhancement prompt: the head noun of the first domain
/// phrase, falling back to the first phrase of any kind.
pub fn object_type(phrases: &PhraseSet, lexicon: &Lexicon) -> Option<String> {
    phrases
        .domain_phrases
        .first()
        .or(phrases.all_phrases.first())
        .and_then(|p| head_noun(p, lexicon))
}

/// Segments each domain phrase, clamps each map into `[0, 1]` and combines
/// them. No phrases gives an all-zero map.
pub fn build_relevancy_map(
    image_id: &str,
    image: &RgbImage,
    phrases: &PhraseSet,
    segmenter: &dyn Segmenter,
    aggregate: Aggregate,
) -> Result<ScalarField> {
    let (w, h) = image_dims(image);
    let mut maps = Vec::with_capacity(phrases.domain_phrases.len());
    for phrase in &phrases.domain_phrases {
        let raw = segmenter.segment(image_id, image, phrase)?;
        maps.push(ScalarField::from_clamped(w, h, raw)?);
    }
    aggregate_maps(w, h, &maps, aggregate)
}

pub fn aggregate_maps(w: usize, h: usize, maps: &[ScalarField], aggregate: Aggregate) -> Result<ScalarField> {
    let mut combined = ScalarField::zeros(w, h);
    match aggregate {
        Aggregate::Max => {
            for m in maps {
                combined = combined.max_with(m)?;
            }
        }
        Aggregate::SumNorm => {
            let mut sum = vec![0.0; w * h];
            for m in maps {
                m.ensure_dims((w, h))?;
                for (s, v) in sum.iter_mut().zip(m.values()) {
                    *s += v;
                }
            }
            let max = sum.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                combined = ScalarField::from_clamped(w, h, sum.into_iter().map(|s| s / max).collect())?;
            }
        }
    }
    Ok(combined)
}

/// Whether the map's mass covers at least `gamma` of its area, and the
/// covered fraction.
pub fn area_test(map: &ScalarField, gamma: f64) -> (bool, f64) {
    let area = map.width() as f64 * map.height() as f64;
    let mass = map.sum();
    (mass >= gamma * area, mass / area)
}

/// Records the relevancy fraction and keeps the image iff
/// `sum(map) >= gamma * w * h`.
pub fn area_filter(record: &mut ImageRecord, map: &ScalarField, gamma: f64) -> Result<bool> {
    map.ensure_dims((record.width as usize, record.height as usize))?;
    let (keep, fraction) = area_test(map, gamma);
    record.relevancy_fraction = Some(fraction);
    record.set_status(if keep {
        RecordStatus::Kept
    } else {
        RecordStatus::FilteredArea
    })?;
    Ok(keep)
}

/// Equalises kept positive and negative records by marking the larger
/// side's highest-rank records (ties: larger id first) as dropped.
pub fn balance_polarity(records: &mut [ImageRecord]) -> Result<()> {
    let kept = |p: Polarity, r: &ImageRecord| r.status == RecordStatus::Kept && r.polarity() == p;
    let positives = records.iter().filter(|r| kept(Polarity::Positive, r)).count();
    let negatives = records.iter().filter(|r| kept(Polarity::Negative, r)).count();
    if positives == 0 || negatives == 0 {
        return Err(AppealError::validation(
            "records",
            format!("cannot balance {positives} positive against {negatives} negative images"),
        ));
    }
    let (larger, excess) = match positives.cmp(&negatives) {
        std::cmp::Ordering::Greater => (Polarity::Positive, positives - negatives),
        std::cmp::Ordering::Less => (Polarity::Negative, negatives - positives),
        std::cmp::Ordering::Equal => return Ok(()),
    };
    let mut candidates: Vec<usize> = (0..records.len()).filter(|&i| kept(larger, &records[i])).collect();
    candidates.sort_by(|&a, &b| {
        (records[b].rank, &records[b].id).cmp(&(records[a].rank, &records[a].id))
    });
    for &i in candidates.iter().take(excess) {
        records[i].set_status(RecordStatus::DroppedBalance)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockCaptioner, MockSegmenter};
    use crate::backends::Backend;
    use crate::domain::SearchQuery;
    use image::Rgb;

    fn food() -> Vec<String> {
        vec!["noun.food".into()]
    }

    #[test]
    fn domain_phrase_examples() {
        let lex = Lexicon::builtin();
        let p = extract_domain_phrases("a room with a small apple", &food(), &lex, &RuleChunker).unwrap();
        assert_eq!(p.domain_phrases, vec!["a small apple"]);
        let p = extract_domain_phrases("a sunset over the sea", &food(), &lex, &RuleChunker).unwrap();
        assert!(p.domain_phrases.is_empty());
        assert_eq!(p.all_phrases.len(), 2);
        let p = extract_domain_phrases("rotten apple and old car", &food(), &lex, &RuleChunker).unwrap();
        assert_eq!(p.domain_phrases, vec!["rotten apple"]);
        assert!(extract_domain_phrases("  ", &food(), &lex, &RuleChunker).is_err());
    }

    #[test]
    fn adding_lexnames_never_shrinks() {
        let lex = Lexicon::builtin();
        let caption = "a dog next to a car on the street with a burger";
        let one = extract_domain_phrases(caption, &food(), &lex, &RuleChunker).unwrap();
        let two = extract_domain_phrases(
            caption,
            &["noun.food".into(), "noun.artifact".into()],
            &lex,
            &RuleChunker,
        )
        .unwrap();
        for p in &one.domain_phrases {
            assert!(two.domain_phrases.contains(p));
        }
        assert!(two.domain_phrases.len() > one.domain_phrases.len());
        assert!(two.domain_phrases.iter().all(|p| two.all_phrases.contains(p)));
    }

    #[test]
    fn object_types() {
        let lex = Lexicon::builtin();
        let p = extract_domain_phrases("a burnt burger with lettuce on a plate", &food(), &lex, &RuleChunker).unwrap();
        assert_eq!(object_type(&p, &lex).as_deref(), Some("burger"));
        let rooms = ["noun.artifact".to_string()];
        let p = extract_domain_phrases("a dirty living room", &rooms, &lex, &RuleChunker).unwrap();
        assert_eq!(object_type(&p, &lex).as_deref(), Some("living room"));
    }

    #[test]
    fn caption_trims_and_keys_by_id() {
        let mut c = MockCaptioner::default();
        c.insert("x", " a pizza \n");
        let img = RgbImage::new(2, 2);
        assert_eq!(caption_image("x", &img, &c).unwrap(), "a pizza");
        assert!(caption_image("y", &img, &c).is_err());
        assert_eq!(c.id(), "mock");
    }

    #[test]
    fn empty_phrases_give_zero_map() {
        let img = RgbImage::from_pixel(4, 3, Rgb([1, 2, 3]));
        let map = build_relevancy_map("i", &img, &PhraseSet::default(), &MockSegmenter::new(), Aggregate::Max).unwrap();
        assert!(map.is_all_zero());
        assert_eq!(map.dims(), (4, 3));
    }

    struct Fixed(Vec<Vec<f64>>);
    impl Backend for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
    }
    impl Segmenter for Fixed {
        fn segment(&self, _: &str, _: &RgbImage, phrase: &str) -> Result<Vec<f64>> {
            Ok(self.0[phrase.parse::<usize>().unwrap()].clone())
        }
    }

    #[test]
    fn maps_are_clamped_and_maxed() {
        let img = RgbImage::new(2, 2);
        let seg = Fixed(vec![vec![-1.0, 0.2, 3.0, 0.5], vec![0.4, 0.1, 0.0, f64::NAN]]);
        let phrases = PhraseSet {
            all_phrases: vec!["0".into(), "1".into()],
            domain_phrases: vec!["0".into(), "1".into()],
        };
        let single = PhraseSet {
            domain_phrases: vec!["0".into()],
            ..phrases.clone()
        };
        let one = build_relevancy_map("i", &img, &single, &seg, Aggregate::Max).unwrap();
        assert_eq!(one.values(), &[0.0, 0.2, 1.0, 0.5]);
        let both = build_relevancy_map("i", &img, &phrases, &seg, Aggregate::Max).unwrap();
        assert_eq!(both.values(), &[0.4, 0.2, 1.0, 0.5]);
        let sum = build_relevancy_map("i", &img, &phrases, &seg, Aggregate::SumNorm).unwrap();
        for (got, want) in sum.values().iter().zip([0.4, 0.3, 1.0, 0.5]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    pub(crate) fn record(id: &str, polarity: Polarity, rank: usize, w: u32, h: u32) -> ImageRecord {
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
            rank,
            path: format!("{id}.png"),
            width: w,
            height: h,
            caption: None,
            relevancy_fraction: None,
            status: RecordStatus::Fetched,
        }
    }

    #[test]
    fn area_filter_threshold() {
        let mut r = record("a", Polarity::Positive, 1, 512, 512);
        let mut values = vec![0.0; 512 * 512];
        let n = (0.39 * 512.0 * 512.0) as usize;
        values[..n].iter_mut().for_each(|v| *v = 1.0);
        let map = ScalarField::from_values(512, 512, values).unwrap();
        assert!(!area_filter(&mut r, &map, 0.4).unwrap());
        assert_eq!(r.status, RecordStatus::FilteredArea);

        let mut r = record("b", Polarity::Positive, 1, 10, 10);
        assert!(area_filter(&mut r, &ScalarField::filled(10, 10, 1.0), 0.99).unwrap());
        assert_eq!(r.relevancy_fraction, Some(1.0));

        // Equality keeps.
        let mut r = record("c", Polarity::Positive, 1, 10, 10);
        let map = ScalarField::from_fn(10, 10, |x, _| if x < 4 { 1.0 } else { 0.0 });
        assert!(area_filter(&mut r, &map, 0.4).unwrap());

        let mut r = record("d", Polarity::Positive, 1, 10, 10);
        assert!(matches!(
            area_filter(&mut r, &ScalarField::zeros(9, 10), 0.4),
            Err(AppealError::DimensionMismatch { .. })
        ));
    }

    fn kept(id: &str, polarity: Polarity, rank: usize) -> ImageRecord {
        let mut r = record(id, polarity, rank, 4, 4);
        r.status = RecordStatus::Kept;
        r
    }

    #[test]
    fn balancing_drops_highest_ranks() {
        let mut records: Vec<_> = (0..600)
            .map(|i| kept(&format!("p{i:04}"), Polarity::Positive, i + 1))
            .chain((0..500).map(|i| kept(&format!("n{i:04}"), Polarity::Negative, i + 1)))
            .collect();
        balance_polarity(&mut records).unwrap();
        let dropped: Vec<_> = records.iter().filter(|r| r.status == RecordStatus::DroppedBalance).collect();
        assert_eq!(dropped.len(), 100);
        assert!(dropped.iter().all(|r| r.polarity() == Polarity::Positive && r.rank > 500));
        let before = records.clone();
        balance_polarity(&mut records).unwrap();
        assert_eq!(records, before);
    }

    #[test]
    fn balancing_ties_by_id_and_empty_side() {
        let mut records = vec![
            kept("b", Polarity::Negative, 1),
            kept("a", Polarity::Negative, 1),
            kept("z", Polarity::Positive, 4),
        ];
        balance_polarity(&mut records).unwrap();
        assert_eq!(records[0].status, RecordStatus::DroppedBalance);
        assert_eq!(records[1].status, RecordStatus::Kept);

        let mut one_sided = vec![kept("a", Polarity::Positive, 1)];
        assert!(balance_polarity(&mut one_sided).is_err());
    }
}
