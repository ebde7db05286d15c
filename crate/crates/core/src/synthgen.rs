//! Procedural generator of vessel-like grayscale images with exact
//! ground-truth masks, plane labels, and matching COCO-subset
//! annotations, so the whole pipeline runs without clinical data.
//!
//! Each image draws an acquisition plane, then renders tubes as stroked
//! quadratic Bezier curves (darker than the noisy background) in disjoint
//! horizontal bands; every tube's class comes from the plane's allowed
//! set. The emitted masks are rasterized from the very polygons written
//! to the annotation document, so reparsing and re-rasterizing the JSON
//! reproduces the masks exactly.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::annio::{
    build_class_mask, class_name, AnnotationRecord, AnnotationSet, ClassMask, ImageInfo,
    OverlapPolicy, MAX_CLASS_ID,
};
use crate::imgproc::GrayImage;
use crate::pipeline::ViewLabelTable;
use crate::seeds::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic dataset configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Annio(#[from] crate::annio::AnnioError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Allowed class set per plane (plane id = index, at most 11 planes).
    pub planes: Vec<Vec<u8>>,
    /// Tubes per image, inclusive range.
    pub branch_range: (usize, usize),
    /// Stroke width range in pixels.
    pub width_range: (f64, f64),
    /// Gaussian background texture sigma (intensity units).
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 10,
            width: 64,
            height: 64,
            planes: vec![vec![1, 5], vec![2, 9], vec![13, 20]],
            branch_range: (2, 5),
            width_range: (4.0, 7.0),
            background_noise: 8.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.width < 16 || self.height < 16 {
            return Err(SynthError::BadConfig(
                "count must be positive and images at least 16x16".into(),
            ));
        }
        if self.planes.is_empty() || self.planes.len() > 11 {
            return Err(SynthError::BadConfig("need 1..=11 planes".into()));
        }
        for (i, allowed) in self.planes.iter().enumerate() {
            if allowed.is_empty() {
                return Err(SynthError::BadConfig(format!("plane {i} has no classes")));
            }
            if allowed.iter().any(|&c| c < 1 || c > MAX_CLASS_ID) {
                return Err(SynthError::BadConfig(format!(
                    "plane {i} lists a class outside 1..=26"
                )));
            }
        }
        let (blo, bhi) = self.branch_range;
        if blo < 1 || blo > bhi {
            return Err(SynthError::BadConfig("bad branch range".into()));
        }
        let (wlo, whi) = self.width_range;
        if !(1.0 <= wlo && wlo <= whi) {
            return Err(SynthError::BadConfig("bad width range".into()));
        }
        Ok(())
    }

    /// Union of all plane class sets, ascending.
    pub fn classes(&self) -> Vec<u8> {
        let mut all: Vec<u8> = self.planes.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// A generated dataset, fully in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub images: BTreeMap<u32, GrayImage>,
    pub masks: BTreeMap<u32, ClassMask>,
    pub annotations: AnnotationSet,
    pub views: ViewLabelTable,
    /// The annotation document as COCO-subset JSON text.
    pub coco_json: String,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Stroke a quadratic Bezier into a closed polygon of the given width,
/// with coordinates rounded to 2 decimals (the exact values written to
/// the annotation file).
fn stroke_bezier(
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
    half_width: f64,
    samples: usize,
) -> Vec<(f64, f64)> {
    let point = |t: f64| {
        let u = 1.0 - t;
        (
            u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
            u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
        )
    };
    let tangent = |t: f64| {
        let u = 1.0 - t;
        (
            2.0 * u * (p1.0 - p0.0) + 2.0 * t * (p2.0 - p1.0),
            2.0 * u * (p1.1 - p0.1) + 2.0 * t * (p2.1 - p1.1),
        )
    };
    let mut left = Vec::with_capacity(samples + 1);
    let mut right = Vec::with_capacity(samples + 1);
    for i in 0..=samples {
        let t = i as f64 / samples as f64;
        let (x, y) = point(t);
        let (tx, ty) = tangent(t);
        let norm = (tx * tx + ty * ty).sqrt().max(1e-9);
        let (nx, ny) = (-ty / norm, tx / norm);
        left.push((round2(x + nx * half_width), round2(y + ny * half_width)));
        right.push((round2(x - nx * half_width), round2(y - ny * half_width)));
    }
    right.reverse();
    left.extend(right);
    left
}

/// Generate the dataset. Per-image randomness derives from
/// `seed + image index`, so images are independent and the whole run is
/// reproducible.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut set = AnnotationSet::default();
    let mut views = ViewLabelTable::default();
    for (plane, allowed) in cfg.planes.iter().enumerate() {
        views
            .plane_classes
            .insert(plane as u8, allowed.iter().copied().collect());
    }

    let mut tube_shades: BTreeMap<u32, Vec<(u8, u8)>> = BTreeMap::new();
    let mut annotation_id = 0u32;
    for idx in 0..cfg.count {
        let image_id = idx as u32 + 1;
        let mut rng = rng_from_seed(derive_seed(cfg.seed, idx as u64));
        let plane = (rng.random::<u64>() % cfg.planes.len() as u64) as u8;
        views.image_planes.insert(image_id, plane);
        set.images.insert(
            image_id,
            ImageInfo {
                width: cfg.width as u32,
                height: cfg.height as u32,
                file_name: format!("{image_id}.pgm"),
            },
        );

        let allowed = &cfg.planes[plane as usize];
        let (blo, bhi) = cfg.branch_range;
        let span = (bhi - blo + 1) as u64;
        let branches = (blo + (rng.random::<u64>() % span) as usize).min(allowed.len());

        // Draw distinct classes from the plane's set.
        let mut pool = allowed.clone();
        for i in 0..branches {
            let j = i + (rng.random::<u64>() % (pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }

        let band_h = cfg.height as f64 / branches as f64;
        let mut shades = Vec::with_capacity(branches);
        for (b, &class) in pool[..branches].iter().enumerate() {
            let (wlo, whi) = cfg.width_range;
            let stroke = wlo + rng.random::<f64>() * (whi - wlo);
            // Keep the whole stroke inside its band so tubes stay disjoint.
            let margin = (stroke / 2.0 + 1.5).min(band_h / 2.0 - 0.5).max(1.0);
            let y_lo = b as f64 * band_h + margin;
            let y_hi = ((b + 1) as f64 * band_h - margin).max(y_lo + 0.1);
            let rand_y = |rng: &mut rand_chacha::ChaCha8Rng| {
                y_lo + rng.random::<f64>() * (y_hi - y_lo)
            };
            let p0 = (1.0 + rng.random::<f64>() * 3.0, rand_y(&mut rng));
            let p2 = (
                cfg.width as f64 - 1.0 - rng.random::<f64>() * 3.0,
                rand_y(&mut rng),
            );
            let p1 = (
                cfg.width as f64 * (0.3 + rng.random::<f64>() * 0.4),
                rand_y(&mut rng),
            );
            let polygon = stroke_bezier(p0, p1, p2, stroke / 2.0, 24);
            annotation_id += 1;
            set.annotations.push(AnnotationRecord {
                annotation_id,
                image_id,
                category_id: class,
                polygons: vec![polygon],
            });
            let shade = 50 + (rng.random::<u64>() % 40) as u8;
            shades.push((class, shade));
        }
        tube_shades.insert(image_id, shades);
    }

    // Masks come from the same rasterization path the parser feeds, so
    // the JSON round-trip reproduces them exactly.
    let mut masks = BTreeMap::new();
    for &image_id in set.images.keys() {
        masks.insert(
            image_id,
            build_class_mask(&set, image_id, OverlapPolicy::LastWins)?,
        );
    }

    // Render images: noisy light background, darker tubes.
    let mut images = BTreeMap::new();
    for (&image_id, mask) in &masks {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x5000_0000 + image_id as u64));
        let shades: BTreeMap<u8, u8> = tube_shades[&image_id].iter().copied().collect();
        let mut img = GrayImage::new(cfg.width, cfg.height, 0);
        for (pix, &class) in mask.data.iter().enumerate() {
            let noise = gaussian(&mut rng);
            let value = if class == 0 {
                190.0 + noise * cfg.background_noise
            } else {
                f64::from(shades[&class]) + noise * cfg.background_noise * 0.5
            };
            img.data[pix] = (value + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
        images.insert(image_id, img);
    }

    let coco_json = coco_to_json(&set, &cfg.classes());
    Ok(SynthDataset {
        images,
        masks,
        annotations: set,
        views,
        coco_json,
    })
}

/// Serialize an annotation set as COCO-subset JSON. Field order and float
/// formatting are fixed, so output is byte-stable.
fn coco_to_json(set: &AnnotationSet, categories: &[u8]) -> String {
    use serde_json::{json, Value};
    let images: Vec<Value> = set
        .images
        .iter()
        .map(|(&id, info)| {
            json!({
                "id": id,
                "width": info.width,
                "height": info.height,
                "file_name": info.file_name,
            })
        })
        .collect();
    let annotations: Vec<Value> = set
        .annotations
        .iter()
        .map(|a| {
            let polys: Vec<Vec<f64>> = a
                .polygons
                .iter()
                .map(|p| p.iter().flat_map(|&(x, y)| [x, y]).collect())
                .collect();
            json!({
                "id": a.annotation_id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "segmentation": polys,
            })
        })
        .collect();
    let cats: Vec<Value> = categories
        .iter()
        .map(|&id| {
            json!({
                "id": id,
                "name": class_name(id).unwrap_or("?"),
            })
        })
        .collect();
    serde_json::to_string_pretty(&json!({
        "images": images,
        "annotations": annotations,
        "categories": cats,
    }))
    .expect("serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annio::parse_coco;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            count: 6,
            width: 64,
            height: 64,
            seed: 123,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.coco_json, b.coco_json);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.images, b.images);
        assert_eq!(a.views, b.views);
        assert_eq!(a.images.len(), 6);

        let c = generate(&SynthConfig {
            seed: 124,
            ..cfg
        })
        .unwrap();
        assert_ne!(a.coco_json, c.coco_json);
    }

    #[test]
    fn classes_respect_plane_assignment() {
        let data = generate(&small_cfg()).unwrap();
        for (&id, mask) in &data.masks {
            let plane = data.views.image_planes[&id];
            let allowed = &data.views.plane_classes[&plane];
            for class in mask.classes_present() {
                assert!(
                    allowed.contains(&class),
                    "image {id}: class {class} not allowed on plane {plane}"
                );
            }
            assert!(!mask.classes_present().is_empty(), "image {id} has no tubes");
        }
    }

    #[test]
    fn coco_roundtrip_reproduces_masks_exactly() {
        let data = generate(&small_cfg()).unwrap();
        let reparsed = parse_coco(&data.coco_json).unwrap();
        assert_eq!(reparsed.annotations.len(), data.annotations.annotations.len());
        for (&id, mask) in &data.masks {
            let rebuilt = build_class_mask(&reparsed, id, OverlapPolicy::LastWins).unwrap();
            assert_eq!(&rebuilt, mask, "mask mismatch for image {id}");
        }
    }

    #[test]
    fn vessels_are_darker_than_background() {
        let data = generate(&small_cfg()).unwrap();
        for (&id, img) in &data.images {
            let mask = &data.masks[&id];
            let (mut fg_sum, mut fg_n, mut bg_sum, mut bg_n) = (0f64, 0u64, 0f64, 0u64);
            for (pix, &class) in mask.data.iter().enumerate() {
                if class > 0 {
                    fg_sum += img.data[pix] as f64;
                    fg_n += 1;
                } else {
                    bg_sum += img.data[pix] as f64;
                    bg_n += 1;
                }
            }
            assert!(fg_n > 0 && bg_n > 0);
            assert!(
                fg_sum / fg_n as f64 + 40.0 < bg_sum / bg_n as f64,
                "image {id}: vessels not clearly darker"
            );
        }
    }

    #[test]
    fn config_validation() {
        let bad = SynthConfig {
            planes: vec![],
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            planes: vec![vec![0]],
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            branch_range: (3, 2),
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn view_table_is_serializable() {
        let data = generate(&small_cfg()).unwrap();
        let text = data.views.to_text();
        let parsed = ViewLabelTable::parse(&text).unwrap();
        assert_eq!(parsed, data.views);
    }
}
