//! Synthetic search corpus for the mock image source.
//!
//! Each query directory gets ranked thumbnails with caption and mask
//! sidecars. Most images show one large domain object; the last two ranks
//! of every query are distractors (an off-domain caption, then an object
//! too small to pass the area filter).

use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{generate_queries, DomainConfig, Polarity};
use crate::error::{AppealError, Result};
use crate::field::{derive_seed, hsv_to_rgb, save_png, to_pixel, ScalarField};
use crate::manifest::write_atomic;

pub const OFF_DOMAIN_CAPTION: &str = "a clear sky above the hills";

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub per_query: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            per_query: 8,
            width: 96,
            height: 72,
            seed: 0,
        }
    }
}

/// An ellipse on a muted backdrop, plus its mask. `scale` is the ellipse
/// radius relative to the short side.
fn scene(rng: &mut ChaCha8Rng, w: u32, h: u32, saturation: f64, scale: f64) -> (RgbImage, ScalarField) {
    let short = w.min(h) as f64;
    let (bg_hue, bg_val): (f64, f64) = (rng.gen(), rng.gen_range(0.4..0.8));
    let (hue, val): (f64, f64) = (rng.gen(), rng.gen_range(0.45..0.65));
    let cx = w as f64 / 2.0 + rng.gen_range(-0.1..0.1) * short;
    let cy = h as f64 / 2.0 + rng.gen_range(-0.1..0.1) * short;
    let (rx, ry) = (scale * short * rng.gen_range(1.1..1.25), scale * short);
    let mut mask = Vec::with_capacity((w * h) as usize);
    let img = RgbImage::from_fn(w, h, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        let inside = dx * dx + dy * dy <= 1.0;
        mask.push(if inside { 1.0 } else { 0.0 });
        let hsv = if inside {
            [hue, saturation, val]
        } else {
            [bg_hue, 0.08, bg_val]
        };
        to_pixel(hsv_to_rgb(hsv))
    });
    let mask = ScalarField::from_values(w as usize, h as usize, mask).expect("binary mask");
    (img, mask)
}

/// Writes `<root>/<query-slug>/<rank>.{png,txt,mask.png}` for every query
/// of `domain`. Returns the number of images written.
pub fn write_mock_corpus(domain: &DomainConfig, root: &Path, spec: &CorpusSpec) -> Result<usize> {
    if spec.per_query < 3 {
        return Err(AppealError::validation("per_query", "need at least 3 images per query"));
    }
    let mut count = 0;
    for q in generate_queries(domain) {
        let dir = root.join(q.slug());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["corpus", &q.text]));
        for rank in 1..=spec.per_query {
            let saturation = match q.polarity {
                Polarity::Positive => rng.gen_range(0.7..0.95),
                Polarity::Negative => rng.gen_range(0.1..0.35),
            };
            let small = rank == spec.per_query;
            let off_domain = rank == spec.per_query - 1;
            let (img, mask) = scene(&mut rng, spec.width, spec.height, saturation, if small { 0.12 } else { 0.5 });
            let caption = if off_domain {
                OFF_DOMAIN_CAPTION.to_owned()
            } else {
                format!("a photo of {} {} on a table", q.adjective, q.noun)
            };
            save_png(&img, &dir.join(format!("{rank}.png")))?;
            write_atomic(&dir.join(format!("{rank}.txt")), caption.as_bytes())?;
            mask.save_png(&dir.join(format!("{rank}.mask.png")))?;
            count += 1;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainConfig;

    #[test]
    fn writes_every_query() {
        let domain = DomainConfig::from_toml_str(
            r#"
name = "food"
nouns = ["cake"]
positive_adjectives = ["delicious"]
lexnames = ["noun.food"]
gamma = 0.4
output_size = 64
[negative_groups]
burnt = ["burnt"]
[synthesis_plan]
backgrounds_per_base = 1
alphas_per_background = 3
"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let n = write_mock_corpus(&domain, dir.path(), &CorpusSpec::default()).unwrap();
        assert_eq!(n, 16);
        assert!(dir.path().join("burnt-cake/8.mask.png").is_file());
        let caption = std::fs::read_to_string(dir.path().join("delicious-cake/1.txt")).unwrap();
        assert_eq!(caption, "a photo of delicious cake on a table");
    }
}
