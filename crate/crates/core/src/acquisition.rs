//! Thumbnail retrieval, deduplication and size normalisation.

use std::collections::HashSet;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{ImageSource, SourceItem, Upscaler};
use crate::domain::{Polarity, SearchQuery};
use crate::error::{AppealError, Result};
use crate::field::{content_hash, image_dims, save_png, ScalarField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Fetched,
    FilteredCaption,
    FilteredArea,
    Kept,
    DroppedBalance,
}

impl RecordStatus {
    fn stage(self) -> u8 {
        match self {
            RecordStatus::Fetched => 0,
            RecordStatus::FilteredCaption | RecordStatus::FilteredArea | RecordStatus::Kept => 1,
            RecordStatus::DroppedBalance => 2,
        }
    }

    /// Whether a record may move from `self` to `next`.
    pub fn can_become(self, next: RecordStatus) -> bool {
        match (self, next) {
            (RecordStatus::Kept, RecordStatus::DroppedBalance) => true,
            (RecordStatus::Fetched, n) => n.stage() == 1,
            _ => false,
        }
    }
}

/// One ingested image and its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Hash of the decoded thumbnail pixels.
    pub id: String,
    pub source: String,
    pub query: SearchQuery,
    /// 1-based position in the source's results.
    pub rank: usize,
    /// Path relative to the work directory.
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub caption: Option<String>,
    pub relevancy_fraction: Option<f64>,
    pub status: RecordStatus,
}

impl ImageRecord {
    pub fn polarity(&self) -> Polarity {
        self.query.polarity
    }

    pub fn set_status(&mut self, next: RecordStatus) -> Result<()> {
        if !self.status.can_become(next) {
            return Err(AppealError::validation(
                "status",
                format!("{:?} cannot become {:?} for {}", self.status, next, self.id),
            ));
        }
        self.status = next;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FetchError {
    pub query: String,
    pub message: String,
}

/// Sidecar data a source shipped alongside an image.
#[derive(Clone, Debug)]
pub struct Sidecar {
    pub id: String,
    pub caption: Option<String>,
    pub mask_png: Option<Vec<u8>>,
}

#[derive(Debug, Default)]
pub struct FetchOutcome {
    pub records: Vec<ImageRecord>,
    pub errors: Vec<FetchError>,
    pub sidecars: Vec<Sidecar>,
}

/// Retrieves up to `top_k` images per query, decodes them, stores them as
/// `<workdir>/<rel_dir>/<id>.png` and drops repeated pixel content (first
/// occurrence wins, in query order then rank order).
pub fn fetch_thumbnails(
    queries: &[SearchQuery],
    client: &dyn ImageSource,
    top_k: usize,
    workdir: &Path,
    rel_dir: &str,
) -> Result<FetchOutcome> {
    if top_k == 0 {
        return Err(AppealError::validation("top_k", "must be at least 1"));
    }
    let results: Vec<Result<Vec<SourceItem>>> = if client.reentrant() {
        queries.par_iter().map(|q| client.search(q, top_k)).collect()
    } else {
        queries.iter().map(|q| client.search(q, top_k)).collect()
    };

    let mut outcome = FetchOutcome::default();
    let mut seen = HashSet::new();
    for (query, result) in queries.iter().zip(results) {
        let mut items = match result {
            Ok(items) => items,
            Err(e) => {
                warn!("fetch failed for `{}`: {e}", query.text);
                outcome.errors.push(FetchError {
                    query: query.text.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if items.is_empty() {
            warn!("no results for `{}`", query.text);
            continue;
        }
        items.sort_by_key(|i| i.rank);
        items.truncate(top_k);
        for item in items {
            let img = match image::load_from_memory(&item.bytes) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    warn!("`{}` rank {}: undecodable image: {e}", query.text, item.rank);
                    continue;
                }
            };
            let id = content_hash(&img);
            if !seen.insert(id.clone()) {
                continue;
            }
            let rel = format!("{rel_dir}/{id}.png");
            save_png(&img, &workdir.join(&rel))?;
            outcome.sidecars.push(Sidecar {
                id: id.clone(),
                caption: item.caption_hint,
                mask_png: item.mask_hint,
            });
            outcome.records.push(ImageRecord {
                id,
                source: client.id().to_owned(),
                query: query.clone(),
                rank: item.rank.max(1),
                path: rel,
                width: img.width(),
                height: img.height(),
                caption: None,
                relevancy_fraction: None,
                status: RecordStatus::Fetched,
            });
        }
    }
    Ok(outcome)
}

/// Placement of the resized content inside the square output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadGeometry {
    pub output_size: u32,
    pub content_width: u32,
    pub content_height: u32,
    pub left: u32,
    pub top: u32,
}

impl PadGeometry {
    /// Aspect-preserving fit of `width x height` into an `output_size` square,
    /// longest side exact, short side rounded up, centred.
    pub fn fit(width: u32, height: u32, output_size: u32) -> Self {
        let (long, short) = (width.max(height) as u64, width.min(height) as u64);
        let out = output_size as u64;
        let scaled_short = ((out * short).div_ceil(long)).clamp(1, out) as u32;
        let (cw, ch) = if width >= height {
            (output_size, scaled_short)
        } else {
            (scaled_short, output_size)
        };
        Self {
            output_size,
            content_width: cw,
            content_height: ch,
            left: (output_size - cw) / 2,
            top: (output_size - ch) / 2,
        }
    }

    /// Applies the same resize-and-pad to a per-pixel field.
    pub fn apply_to_field(&self, field: &ScalarField) -> ScalarField {
        let n = self.output_size as usize;
        field
            .resized(self.content_width as usize, self.content_height as usize)
            .padded(n, n, self.left as usize, self.top as usize)
    }
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub image: RgbImage,
    pub geometry: PadGeometry,
    /// Number of super-resolution passes applied.
    pub upscale_passes: u32,
}

/// Upscales with the backend until the longest side reaches `output_size`,
/// resizes so the longest side is exactly `output_size`, then zero-pads
/// symmetrically to a square.
pub fn normalize_image(image: &RgbImage, upscaler: &dyn Upscaler, output_size: u32) -> Result<Normalized> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Err(AppealError::validation("image", "empty image"));
    }
    if output_size == 0 {
        return Err(AppealError::validation("output_size", "must be positive"));
    }
    let geometry = PadGeometry::fit(w, h, output_size);
    if w == output_size && h == output_size {
        return Ok(Normalized {
            image: image.clone(),
            geometry,
            upscale_passes: 0,
        });
    }

    let mut current = image.clone();
    let mut passes = 0;
    while current.width().max(current.height()) < output_size {
        let next = upscaler.upscale(&current)?;
        if next.width().max(next.height()) <= current.width().max(current.height()) {
            return Err(AppealError::backend("upscaler", "upscaler did not enlarge the image"));
        }
        current = next;
        passes += 1;
    }
    let content = if (current.width(), current.height()) == (geometry.content_width, geometry.content_height) {
        current
    } else {
        image::imageops::resize(
            &current,
            geometry.content_width,
            geometry.content_height,
            FilterType::CatmullRom,
        )
    };
    let mut out = RgbImage::new(output_size, output_size);
    image::imageops::replace(&mut out, &content, geometry.left as i64, geometry.top as i64);
    Ok(Normalized {
        image: out,
        geometry,
        upscale_passes: passes,
    })
}

/// Normalises a stored record in place: reads `<workdir>/<record.path>`,
/// writes `<workdir>/<rel_dir>/<id>.png` and updates path and dimensions.
pub fn normalize_record(
    record: &mut ImageRecord,
    upscaler: &dyn Upscaler,
    output_size: u32,
    workdir: &Path,
    rel_dir: &str,
) -> Result<PadGeometry> {
    let img = crate::field::load_rgb(&workdir.join(&record.path))?;
    let normalized = normalize_image(&img, upscaler, output_size)?;
    let rel = format!("{rel_dir}/{}.png", record.id);
    save_png(&normalized.image, &workdir.join(&rel))?;
    let (w, h) = image_dims(&normalized.image);
    record.path = rel;
    record.width = w as u32;
    record.height = h as u32;
    Ok(normalized.geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{BicubicUpscaler, DirectoryImageSource};
    use crate::backends::Backend;
    use crate::domain::tests::food;
    use crate::domain::generate_queries;
    use image::Rgb;

    #[test]
    fn geometry_examples() {
        let g = PadGeometry::fit(200, 200, 512);
        assert_eq!((g.content_width, g.content_height, g.left, g.top), (512, 512, 0, 0));
        let g = PadGeometry::fit(300, 200, 512);
        assert_eq!((g.content_width, g.content_height), (512, 342));
        assert_eq!(g.top, 85);
        assert_eq!(512 - g.top - g.content_height, 85);
        let g = PadGeometry::fit(200, 300, 512);
        assert_eq!((g.content_width, g.content_height, g.left), (342, 512, 85));
    }

    #[test]
    fn normalize_200_square() {
        let img = RgbImage::from_pixel(200, 200, Rgb([10, 200, 30]));
        let n = normalize_image(&img, &BicubicUpscaler::default(), 512).unwrap();
        assert_eq!(n.image.dimensions(), (512, 512));
        assert_eq!(n.upscale_passes, 2);
        assert_eq!(*n.image.get_pixel(0, 0), Rgb([10, 200, 30]));
    }

    #[test]
    fn normalize_identity() {
        let img = RgbImage::from_fn(64, 64, |x, y| Rgb([x as u8, y as u8, 7]));
        let n = normalize_image(&img, &BicubicUpscaler::default(), 64).unwrap();
        assert_eq!(n.image, img);
    }

    #[test]
    fn normalize_pads_with_zeros() {
        let img = RgbImage::from_pixel(300, 200, Rgb([255, 255, 255]));
        let n = normalize_image(&img, &BicubicUpscaler::default(), 512).unwrap();
        assert_eq!(*n.image.get_pixel(256, 84), Rgb([0, 0, 0]));
        assert_eq!(*n.image.get_pixel(256, 85), Rgb([255, 255, 255]));
        assert_eq!(*n.image.get_pixel(256, 426), Rgb([255, 255, 255]));
        assert_eq!(*n.image.get_pixel(256, 427), Rgb([0, 0, 0]));
    }

    #[test]
    fn status_transitions_are_monotone() {
        use RecordStatus::*;
        assert!(Fetched.can_become(Kept));
        assert!(Fetched.can_become(FilteredArea));
        assert!(Kept.can_become(DroppedBalance));
        assert!(!Kept.can_become(Fetched));
        assert!(!FilteredArea.can_become(Kept));
        assert!(!DroppedBalance.can_become(Kept));
        assert!(!Fetched.can_become(DroppedBalance));
    }

    fn write_png(path: &Path, color: [u8; 3]) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(8, 6, Rgb(color)).save(path).unwrap();
    }

    #[test]
    fn fetch_truncates_and_dedups() {
        let corpus = tempfile::tempdir().unwrap();
        let work = tempfile::tempdir().unwrap();
        for rank in 1..=5 {
            write_png(&corpus.path().join(format!("delicious-burger/{rank}.png")), [rank, 0, 0]);
        }
        // Same pixels as delicious-burger/1.png.
        write_png(&corpus.path().join("delicious-cake/1.png"), [1, 0, 0]);
        write_png(&corpus.path().join("delicious-cake/2.png"), [9, 9, 9]);
        std::fs::write(corpus.path().join("delicious-cake/3.png"), b"not a png").unwrap();

        let queries: Vec<_> = generate_queries(&food()).into_iter().take(2).collect();
        let source = DirectoryImageSource::new(corpus.path());
        let out = fetch_thumbnails(&queries, &source, 3, work.path(), "food/thumbs").unwrap();
        let burger: Vec<_> = out.records.iter().filter(|r| r.query.noun == "burger").collect();
        assert_eq!(burger.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        let cake: Vec<_> = out.records.iter().filter(|r| r.query.noun == "cake").collect();
        assert_eq!(cake.len(), 1);
        assert_eq!(cake[0].rank, 2);
        assert!(out.records.iter().all(|r| r.status == RecordStatus::Fetched));
        assert!(work.path().join(&out.records[0].path).is_file());
        assert_eq!(out.records[0].source, source.id());

        let again = fetch_thumbnails(&queries, &source, 3, work.path(), "food/thumbs").unwrap();
        assert_eq!(again.records, out.records);
    }
}
