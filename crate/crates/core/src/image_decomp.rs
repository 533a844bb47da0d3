//! Entity detection, pairwise relational boxes and region cropping.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::cache::{Cache, CacheKey, Namespace};
use crate::error::{Error, Result};
use crate::model::{BBox, BoxKind, BoxSet, FallbackFlags};

/// A decoded input image together with the exact bytes it was read from.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub id: String,
    pub path: Option<PathBuf>,
    pub bytes: Vec<u8>,
    pub pixels: RgbImage,
}

impl LoadedImage {
    /// Reads and decodes an image file. The id is the file stem.
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(id, Some(path.to_path_buf()), bytes)
    }

    pub fn from_bytes(
        id: impl Into<String>,
        path: Option<PathBuf>,
        bytes: Vec<u8>,
    ) -> Result<Self> {
        let pixels = image::load_from_memory(&bytes)
            .map_err(|e| Error::InvalidInput(format!("undecodable image: {e}")))?
            .to_rgb8();
        Ok(Self {
            id: id.into(),
            path,
            bytes,
            pixels,
        })
    }

    pub fn from_pixels(id: impl Into<String>, pixels: RgbImage) -> Result<Self> {
        let bytes = encode_png(&pixels)?;
        Ok(Self {
            id: id.into(),
            path: None,
            bytes,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

pub fn encode_png(pixels: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    pixels.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// Raw detector output, in (possibly fractional, possibly out-of-bounds)
/// pixel coordinates. This is also the on-disk schema of `.boxes.json`
/// sidecar annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub label: String,
    pub confidence: f64,
}

pub trait DetectorBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_version(&self) -> &str;
    fn detect(&self, image: &LoadedImage) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompositionConfig {
    pub confidence_threshold: f64,
    pub max_entity_boxes: usize,
    pub min_region_side: u32,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.25,
            max_entity_boxes: 10,
            min_region_side: 32,
        }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!(
                "confidence_threshold {} outside [0,1]",
                self.confidence_threshold
            )));
        }
        if self.max_entity_boxes == 0 {
            return Err(Error::Config("max_entity_boxes must be at least 1".into()));
        }
        if self.min_region_side == 0 {
            return Err(Error::Config("min_region_side must be at least 1".into()));
        }
        Ok(())
    }
}

/// Runs the detector and keeps confident, in-bounds boxes, most confident
/// first, at most `max_entity_boxes` of them.
pub fn detect_entities(
    image: &LoadedImage,
    backend: &dyn DetectorBackend,
    config: &DecompositionConfig,
    cache: Option<&Cache>,
) -> Result<Vec<BBox>> {
    config.validate()?;
    let key = cache.map(|_| {
        let cfg = serde_json::to_vec(config).expect("config serializes");
        CacheKey::derive(
            Namespace::Detect,
            backend.backend_id(),
            backend.model_version(),
            &[&image.bytes, &cfg],
        )
    });
    if let (Some(cache), Some(key)) = (cache, &key) {
        if let Some(boxes) = cache.get_json::<Vec<BBox>>(key)? {
            return Ok(boxes);
        }
    }

    let raw = backend.detect(image)?;
    let (w, h) = (image.width(), image.height());
    let mut boxes = Vec::with_capacity(raw.len());
    for d in raw {
        let coords = [d.x0, d.y0, d.x1, d.y1];
        if coords.iter().any(|c| !c.is_finite()) || !(0.0..=1.0).contains(&d.confidence) {
            return Err(Error::backend(
                backend.backend_id(),
                format!("detection {d:?} violates the detector contract"),
            ));
        }
        if d.confidence < config.confidence_threshold {
            continue;
        }
        let x0 = d.x0.max(0.0).floor().min(w as f64) as u32;
        let y0 = d.y0.max(0.0).floor().min(h as f64) as u32;
        let x1 = d.x1.min(w as f64).ceil().max(0.0) as u32;
        let y1 = d.y1.min(h as f64).ceil().max(0.0) as u32;
        if x0 >= x1 || y0 >= y1 {
            log::warn!("dropping degenerate detection {d:?} on {}", image.id);
            continue;
        }
        boxes.push(BBox {
            x0,
            y0,
            x1,
            y1,
            label: d.label,
            confidence: d.confidence,
            kind: BoxKind::Entity,
            parents: None,
        });
    }
    // Stable, so equal confidences keep detector order.
    boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    boxes.truncate(config.max_entity_boxes);

    if let (Some(cache), Some(key)) = (cache, &key) {
        cache.put_json(key, &boxes)?;
    }
    Ok(boxes)
}

/// One union rectangle per unordered pair `i < j`.
pub fn pair_relational_boxes(entity_boxes: &[BBox]) -> Vec<BBox> {
    let n = entity_boxes.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&entity_boxes[i], &entity_boxes[j]);
            out.push(BBox {
                x0: a.x0.min(b.x0),
                y0: a.y0.min(b.y0),
                x1: a.x1.max(b.x1),
                y1: a.y1.max(b.y1),
                label: format!("{}+{}", a.label, b.label),
                confidence: a.confidence.min(b.confidence),
                kind: BoxKind::Relational,
                parents: Some([i, j]),
            });
        }
    }
    out
}

/// Detects entities, pairs them, and substitutes the whole image for any
/// group that comes back empty.
pub fn build_box_set(
    image: &LoadedImage,
    backend: &dyn DetectorBackend,
    config: &DecompositionConfig,
    cache: Option<&Cache>,
) -> Result<BoxSet> {
    let mut entity_boxes = detect_entities(image, backend, config, cache)?;
    let mut relational_boxes = pair_relational_boxes(&entity_boxes);
    let mut fallback_used = FallbackFlags::default();
    let whole = BBox::whole_image(image.width(), image.height());
    if entity_boxes.is_empty() {
        entity_boxes.push(whole.clone());
        fallback_used.entity = true;
    }
    if relational_boxes.is_empty() {
        relational_boxes.push(whole);
        fallback_used.relational = true;
    }
    Ok(BoxSet {
        image_id: image.id.clone(),
        image_width: image.width(),
        image_height: image.height(),
        entity_boxes,
        relational_boxes,
        fallback_used,
    })
}

/// An image region as shown to a VQA backend, with its provenance.
#[derive(Debug, Clone)]
pub struct Region {
    pub pixels: RgbImage,
    /// Crop window in source-image pixels, `[x0, y0, x1, y1]`.
    pub window: [u32; 4],
    pub kind: BoxKind,
    pub box_index: usize,
    pub label: String,
    pub image_id: String,
    pub source: Option<PathBuf>,
}

impl Region {
    /// Canonical bytes for cache keying: dimensions followed by raw RGB.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.pixels.as_raw().len());
        out.extend_from_slice(&self.pixels.width().to_le_bytes());
        out.extend_from_slice(&self.pixels.height().to_le_bytes());
        out.extend_from_slice(self.pixels.as_raw());
        out
    }

    pub fn whole(image: &LoadedImage) -> Self {
        Self {
            pixels: image.pixels.clone(),
            window: [0, 0, image.width(), image.height()],
            kind: BoxKind::WholeImage,
            box_index: 0,
            label: "whole_image".into(),
            image_id: image.id.clone(),
            source: image.path.clone(),
        }
    }
}

/// Computes the crop window for `bbox`: the box itself, widened about its
/// center to `min_side` along any short axis and shifted back inside the
/// image. Sides never exceed the image.
pub fn crop_window(bbox: &BBox, width: u32, height: u32, min_side: u32) -> Result<[u32; 4]> {
    if bbox.kind == BoxKind::WholeImage {
        return Ok([0, 0, width, height]);
    }
    let x0 = bbox.x0.min(width);
    let x1 = bbox.x1.min(width);
    let y0 = bbox.y0.min(height);
    let y1 = bbox.y1.min(height);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::InvalidInput(format!(
            "box ({},{},{},{}) has zero area inside a {width}x{height} image",
            bbox.x0, bbox.y0, bbox.x1, bbox.y1
        )));
    }
    let (nx0, nx1) = widen(x0, x1, width, min_side);
    let (ny0, ny1) = widen(y0, y1, height, min_side);
    Ok([nx0, ny0, nx1, ny1])
}

fn widen(lo: u32, hi: u32, limit: u32, min_side: u32) -> (u32, u32) {
    let side = hi - lo;
    if side >= min_side {
        return (lo, hi);
    }
    let target = min_side.min(limit) as i64;
    // Doubled center keeps the arithmetic integral.
    let start = (lo as i64 + hi as i64 - target).div_euclid(2);
    let start = start.clamp(0, limit as i64 - target);
    (start as u32, (start + target) as u32)
}

pub fn crop_region(
    image: &LoadedImage,
    bbox: &BBox,
    box_index: usize,
    min_side: u32,
) -> Result<Region> {
    let window = crop_window(bbox, image.width(), image.height(), min_side)?;
    let [x0, y0, x1, y1] = window;
    let pixels = if window == [0, 0, image.width(), image.height()] {
        image.pixels.clone()
    } else {
        image::imageops::crop_imm(&image.pixels, x0, y0, x1 - x0, y1 - y0).to_image()
    };
    Ok(Region {
        pixels,
        window,
        kind: bbox.kind,
        box_index,
        label: bbox.label.clone(),
        image_id: image.id.clone(),
        source: image.path.clone(),
    })
}

pub fn crop_all(image: &LoadedImage, boxes: &[BBox], min_side: u32) -> Result<Vec<Region>> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| crop_region(image, b, i, min_side))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Fixed(Vec<Detection>, AtomicUsize);

    impl DetectorBackend for Fixed {
        fn backend_id(&self) -> &str {
            "fixed"
        }
        fn model_version(&self) -> &str {
            "1"
        }
        fn detect(&self, _image: &LoadedImage) -> Result<Vec<Detection>> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0.clone())
        }
    }

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, conf: f64) -> Detection {
        Detection {
            x0,
            y0,
            x1,
            y1,
            label: "thing".into(),
            confidence: conf,
        }
    }

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox {
            x0,
            y0,
            x1,
            y1,
            label: "b".into(),
            confidence: 1.0,
            kind: BoxKind::Entity,
            parents: None,
        }
    }

    fn blank(w: u32, h: u32) -> LoadedImage {
        LoadedImage::from_pixels("img", RgbImage::new(w, h)).unwrap()
    }

    #[test]
    fn threshold_filters() {
        let b = Fixed(
            vec![
                det(0., 0., 5., 5., 0.9),
                det(0., 0., 5., 5., 0.3),
                det(0., 0., 5., 5., 0.1),
            ],
            AtomicUsize::new(0),
        );
        let boxes =
            detect_entities(&blank(10, 10), &b, &DecompositionConfig::default(), None).unwrap();
        assert_eq!(boxes.len(), 2);
    }

    #[test]
    fn truncation_keeps_most_confident() {
        let dets = (0..12)
            .map(|i| det(0., 0., 5., 5., 0.3 + i as f64 * 0.05))
            .collect();
        let b = Fixed(dets, AtomicUsize::new(0));
        let boxes =
            detect_entities(&blank(10, 10), &b, &DecompositionConfig::default(), None).unwrap();
        assert_eq!(boxes.len(), 10);
        assert!((boxes[0].confidence - 0.85).abs() < 1e-12);
        assert!((boxes[9].confidence - 0.40).abs() < 1e-12);
        assert!(boxes.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn clamps_to_bounds() {
        let b = Fixed(vec![det(-3.5, 2.2, 14.0, 9.7, 0.8)], AtomicUsize::new(0));
        let boxes =
            detect_entities(&blank(10, 10), &b, &DecompositionConfig::default(), None).unwrap();
        assert_eq!(
            (boxes[0].x0, boxes[0].y0, boxes[0].x1, boxes[0].y1),
            (0, 2, 10, 10)
        );
    }

    #[test]
    fn contract_violation_is_backend_error() {
        let b = Fixed(vec![det(0., 0., 5., 5., 1.5)], AtomicUsize::new(0));
        let err =
            detect_entities(&blank(10, 10), &b, &DecompositionConfig::default(), None).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn detection_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::open(dir.path()).unwrap();
        let b = Fixed(vec![det(1., 1., 5., 5., 0.9)], AtomicUsize::new(0));
        let img = blank(10, 10);
        let cfg = DecompositionConfig::default();
        let first = detect_entities(&img, &b, &cfg, Some(&cache)).unwrap();
        let second = detect_entities(&img, &b, &cfg, Some(&cache)).unwrap();
        assert_eq!(first, second);
        assert_eq!(b.1.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn pairing_basics() {
        assert!(pair_relational_boxes(&[]).is_empty());
        let r = pair_relational_boxes(&[bx(0, 0, 10, 10), bx(20, 20, 30, 30)]);
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].x0, r[0].y0, r[0].x1, r[0].y1), (0, 0, 30, 30));
        assert_eq!(r[0].parents, Some([0, 1]));
        let four: Vec<_> = (0..4).map(|i| bx(i * 10, 0, i * 10 + 5, 5)).collect();
        assert_eq!(pair_relational_boxes(&four).len(), 6);
    }

    #[test]
    fn fallback_policy() {
        let cfg = DecompositionConfig::default();
        let img = blank(64, 48);
        let none = Fixed(vec![], AtomicUsize::new(0));
        let set = build_box_set(&img, &none, &cfg, None).unwrap();
        assert_eq!(set.entity_boxes, vec![BBox::whole_image(64, 48)]);
        assert_eq!(set.relational_boxes, vec![BBox::whole_image(64, 48)]);
        assert_eq!(
            set.fallback_used,
            FallbackFlags {
                entity: true,
                relational: true
            }
        );

        let one = Fixed(vec![det(1., 1., 9., 9., 0.9)], AtomicUsize::new(0));
        let set = build_box_set(&img, &one, &cfg, None).unwrap();
        assert_eq!(set.entity_boxes.len(), 1);
        assert_eq!(set.relational_boxes[0].kind, BoxKind::WholeImage);
        assert_eq!(
            set.fallback_used,
            FallbackFlags {
                entity: false,
                relational: true
            }
        );

        let three = Fixed(
            vec![
                det(1., 1., 9., 9., 0.9),
                det(20., 1., 29., 9., 0.8),
                det(1., 20., 9., 29., 0.7),
            ],
            AtomicUsize::new(0),
        );
        let set = build_box_set(&img, &three, &cfg, None).unwrap();
        assert_eq!((set.entity_boxes.len(), set.relational_boxes.len()), (3, 3));
        assert_eq!(set.fallback_used, FallbackFlags::default());
        assert!(set.violations().is_empty());
    }

    #[test]
    fn crop_without_expansion() {
        let img = blank(300, 300);
        let r = crop_region(&img, &bx(10, 10, 200, 200), 0, 32).unwrap();
        assert_eq!(r.window, [10, 10, 200, 200]);
        assert_eq!(r.pixels.dimensions(), (190, 190));
    }

    #[test]
    fn crop_expands_and_shifts_at_origin() {
        // Center (4,4), half-side 16 -> [-12, 20], shifted into [0, 32].
        assert_eq!(
            crop_window(&bx(0, 0, 8, 8), 100, 100, 32).unwrap(),
            [0, 0, 32, 32]
        );
        // Symmetric expansion away from edges.
        assert_eq!(
            crop_window(&bx(50, 50, 58, 58), 100, 100, 32).unwrap(),
            [38, 38, 70, 70]
        );
        // Far edge.
        assert_eq!(
            crop_window(&bx(95, 95, 100, 100), 100, 100, 32).unwrap(),
            [68, 68, 100, 100]
        );
        // Image smaller than min side.
        assert_eq!(
            crop_window(&bx(2, 2, 4, 4), 20, 10, 32).unwrap(),
            [0, 0, 20, 10]
        );
    }

    #[test]
    fn whole_image_crop_is_identity() {
        let img = blank(40, 30);
        let r = crop_region(&img, &BBox::whole_image(40, 30), 0, 32).unwrap();
        assert_eq!(r.pixels, img.pixels);
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        assert!(crop_window(&bx(120, 120, 130, 130), 100, 100, 32).is_err());
    }

    #[test]
    fn undecodable_bytes() {
        assert!(matches!(
            LoadedImage::from_bytes("x", None, b"not an image".to_vec()),
            Err(Error::InvalidInput(_))
        ));
    }
}
