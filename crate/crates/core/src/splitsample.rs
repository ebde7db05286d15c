//! Dataset statistics, difficulty-aware stratified splitting, class
//! frequency scores, and weighted mini-batch sampling.
//!
//! The validation allocation follows the proportional rule
//! `V_i = P_i * V / sum_j P_j` with `P_i = N / n_i`, evaluated in exact
//! rational arithmetic and rounded by the largest-remainder method so the
//! per-class counts always sum to `V`. Within a class, segments smaller
//! than the size threshold go to validation first (ascending size); any
//! remaining quota is filled by seeded uniform choice.

use std::collections::{BTreeMap, BTreeSet};

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{ToPrimitive, Zero};
use rand::Rng;
use thiserror::Error;

use crate::annio::{class_name, rasterize_annotation, AnnotationSet, MAX_CLASS_ID};
use crate::seeds::rng_from_seed;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("dataset index is empty")]
    EmptyIndex,
    #[error("validation size {v} must satisfy 0 < V < {images} (total images)")]
    InvalidV { v: u64, images: usize },
    #[error("size threshold must be positive")]
    InvalidThreshold,
    #[error("class {class_id} present in index has no score in the weight table")]
    UncoveredClass { class_id: u8 },
    #[error("class {class_id} has score 0; its reciprocal weight is undefined")]
    UndefinedReciprocal { class_id: u8 },
    #[error("weight for image {image_id} is not positive")]
    NonPositiveWeight { image_id: u32 },
    #[error("cannot sample from an empty weight map")]
    EmptyPopulation,
    #[error(transparent)]
    Annio(#[from] crate::annio::AnnioError),
}

pub type Result<T> = std::result::Result<T, SplitError>;

/// One annotated segment instance: its class and rasterized pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentRecord {
    pub class_id: u8,
    pub pixels: u64,
}

/// All segments of one image, in document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: u32,
    pub segments: Vec<SegmentRecord>,
}

/// Per-image segment inventory driving splitting, weighting, and
/// curriculum difficulty. Images are kept in ascending id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
}

impl DatasetIndex {
    /// Build the index by rasterizing every annotation (union of its
    /// polygons). Also returns the total background pixel count: image
    /// area minus the per-image union of all annotations.
    pub fn from_annotations(set: &AnnotationSet) -> Result<(Self, u64)> {
        let mut images = Vec::with_capacity(set.images.len());
        let mut background = 0u64;
        for (&image_id, info) in &set.images {
            let (w, h) = (info.width as usize, info.height as usize);
            let mut union = vec![false; w * h];
            let mut segments = Vec::new();
            for record in set.annotations_for(image_id) {
                let layer = rasterize_annotation(record, w, h)?;
                let mut pixels = 0u64;
                for (u, &v) in union.iter_mut().zip(&layer.data) {
                    if v != 0 {
                        pixels += 1;
                        *u = true;
                    }
                }
                segments.push(SegmentRecord {
                    class_id: record.category_id,
                    pixels,
                });
            }
            let covered = union.iter().filter(|&&u| u).count() as u64;
            background += (w * h) as u64 - covered;
            images.push(ImageRecord { image_id, segments });
        }
        Ok((Self { images }, background))
    }

    /// Total number of segments `N`.
    pub fn total_segments(&self) -> u64 {
        self.images.iter().map(|i| i.segments.len() as u64).sum()
    }

    /// Per-class segment counts `n_i`, ascending class id.
    pub fn class_counts(&self) -> BTreeMap<u8, u64> {
        let mut counts = BTreeMap::new();
        for image in &self.images {
            for seg in &image.segments {
                *counts.entry(seg.class_id).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Index restricted to a subset of image ids (weights for a training
    /// split are computed on the split, not the full dataset).
    pub fn restricted_to(&self, ids: &BTreeSet<u32>) -> DatasetIndex {
        DatasetIndex {
            images: self
                .images
                .iter()
                .filter(|i| ids.contains(&i.image_id))
                .cloned()
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset statistics
// ---------------------------------------------------------------------------

/// One row of the class statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub class_id: u8,
    pub class_name: &'static str,
    pub count: u64,
    pub total_pixels: u64,
    pub min_size: u64,
    pub max_size: u64,
    /// total / count, rounded to 2 decimals.
    pub avg_size: f64,
    /// Percentage of all per-annotation pixel totals plus background.
    pub share_pct: f64,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Class-wise statistics: background row first, then one row per class
/// present, ascending. Overlapping annotations are counted once per
/// annotation. The background row is synthesized from the supplied total:
/// count is the image count and min/max bracket the average, since the
/// index does not retain per-image background sizes.
pub fn dataset_stats(index: &DatasetIndex, background_pixels: u64) -> Result<Vec<StatsRow>> {
    if index.images.is_empty() {
        return Err(SplitError::EmptyIndex);
    }
    let mut per_class: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
    for image in &index.images {
        for seg in &image.segments {
            per_class.entry(seg.class_id).or_default().push(seg.pixels);
        }
    }
    let foreground_total: u64 = per_class.values().flatten().sum();
    let denom = (foreground_total + background_pixels) as f64;

    let mut rows = Vec::with_capacity(per_class.len() + 1);
    let image_count = index.images.len() as u64;
    let bg_avg = background_pixels as f64 / image_count as f64;
    rows.push(StatsRow {
        class_id: 0,
        class_name: class_name(0).unwrap(),
        count: image_count,
        total_pixels: background_pixels,
        min_size: bg_avg.floor() as u64,
        max_size: bg_avg.ceil() as u64,
        avg_size: round2(bg_avg),
        share_pct: 100.0 * background_pixels as f64 / denom,
    });
    for (class_id, sizes) in per_class {
        let count = sizes.len() as u64;
        let total: u64 = sizes.iter().sum();
        rows.push(StatsRow {
            class_id,
            class_name: class_name(class_id).unwrap_or("?"),
            count,
            total_pixels: total,
            min_size: *sizes.iter().min().unwrap(),
            max_size: *sizes.iter().max().unwrap(),
            avg_size: round2(total as f64 / count as f64),
            share_pct: 100.0 * total as f64 / denom,
        });
    }
    Ok(rows)
}

/// Tab-separated statistics table in dataset row order.
pub fn stats_to_tsv(rows: &[StatsRow]) -> String {
    let mut out = String::from(
        "class_id\tclass_name\tsegment_count\ttotal_pixels\tmin_size\tmax_size\tavg_size\tshare_pct\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.4}\n",
            r.class_id,
            r.class_name,
            r.count,
            r.total_pixels,
            r.min_size,
            r.max_size,
            r.avg_size,
            r.share_pct
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

/// Exact proportional allocation: `V_i = P_i * V / sum_j P_j` with
/// `P_i = N / n_i`, rounded by the largest-remainder method (ties broken
/// by lower class id) so the counts sum to `v_total` exactly.
///
/// `class_counts` must list `(class_id, n_i)` with every `n_i > 0`.
pub fn allocate_validation_counts(class_counts: &[(u8, u64)], v_total: u64) -> Vec<(u8, u64)> {
    assert!(
        class_counts.iter().all(|&(_, n)| n > 0),
        "allocation requires positive class counts"
    );
    let n_total: BigInt = class_counts.iter().map(|&(_, n)| BigInt::from(n)).sum();
    let proportions: Vec<BigRational> = class_counts
        .iter()
        .map(|&(_, n)| BigRational::new(n_total.clone(), BigInt::from(n)))
        .collect();
    let sum_p: BigRational = proportions.iter().cloned().sum();
    let v = BigRational::from_integer(BigInt::from(v_total));

    let mut base = Vec::with_capacity(class_counts.len());
    let mut remainders = Vec::with_capacity(class_counts.len());
    let mut assigned = BigInt::zero();
    for p in &proportions {
        let quota = p * &v / &sum_p;
        let floor = quota.floor();
        assigned += floor.numer();
        remainders.push(&quota - &floor);
        base.push(floor.numer().to_u64().expect("quota fits in u64"));
    }
    let leftover = (BigInt::from(v_total) - assigned)
        .to_usize()
        .expect("leftover fits in usize");

    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .cmp(&remainders[a])
            .then(class_counts[a].0.cmp(&class_counts[b].0))
    });
    for &i in order.iter().take(leftover) {
        base[i] += 1;
    }
    class_counts
        .iter()
        .zip(base)
        .map(|(&(c, _), v)| (c, v))
        .collect()
}

/// Which side of the split an image landed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
}

/// Result of [`stratified_split`]: image roles plus segment-level
/// bookkeeping for reporting.
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub roles: BTreeMap<u32, SplitRole>,
    /// Post-clip validation quota per class.
    pub quotas: BTreeMap<u8, u64>,
    /// Chosen validation segments as (image_id, segment index).
    pub val_segments: Vec<(u32, usize)>,
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn ids_with_role(&self, role: SplitRole) -> BTreeSet<u32> {
        self.roles
            .iter()
            .filter(|&(_, &r)| r == role)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Text form: one `image_id<TAB>train|val` line per image, ascending.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, role) in &self.roles {
            out.push_str(&format!(
                "{}\t{}\n",
                id,
                match role {
                    SplitRole::Train => "train",
                    SplitRole::Val => "val",
                }
            ));
        }
        out
    }
}

#[derive(Clone, Copy)]
struct SegRef {
    image_id: u32,
    seg_idx: usize,
    size: u64,
}

/// Difficulty-aware stratified split. `v_total` validation segments are
/// allocated across classes proportionally to `P_i = N / n_i`; within each
/// class, segments smaller than `size_threshold` are assigned first in
/// ascending size, and any remaining quota is drawn uniformly (seeded)
/// from the larger segments. An image is validation iff it owns at least
/// one validation segment.
pub fn stratified_split(
    index: &DatasetIndex,
    v_total: u64,
    size_threshold: u64,
    seed: u64,
) -> Result<SplitAssignment> {
    if index.images.is_empty() {
        return Err(SplitError::EmptyIndex);
    }
    if size_threshold == 0 {
        return Err(SplitError::InvalidThreshold);
    }
    if v_total == 0 || v_total >= index.images.len() as u64 {
        return Err(SplitError::InvalidV {
            v: v_total,
            images: index.images.len(),
        });
    }

    let counts: Vec<(u8, u64)> = index.class_counts().into_iter().collect();
    let allocation = allocate_validation_counts(&counts, v_total);

    let mut by_class: BTreeMap<u8, Vec<SegRef>> = BTreeMap::new();
    for image in &index.images {
        for (seg_idx, seg) in image.segments.iter().enumerate() {
            by_class.entry(seg.class_id).or_default().push(SegRef {
                image_id: image.image_id,
                seg_idx,
                size: seg.pixels,
            });
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut quotas = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut val_segments: Vec<(u32, usize)> = Vec::new();
    // Classes are processed in ascending id order so the RNG stream is
    // consumed deterministically.
    for (class_id, quota) in allocation {
        let segs = &by_class[&class_id];
        let quota = if quota > segs.len() as u64 {
            warnings.push(format!(
                "class {}: allocation {} exceeds available segments {}; clipped",
                class_id,
                quota,
                segs.len()
            ));
            segs.len()
        } else {
            quota as usize
        };
        quotas.insert(class_id, quota as u64);

        let mut small: Vec<SegRef> = segs
            .iter()
            .copied()
            .filter(|s| s.size < size_threshold)
            .collect();
        small.sort_by_key(|s| (s.size, s.image_id, s.seg_idx));
        let take_small = quota.min(small.len());
        let mut chosen: Vec<SegRef> = small[..take_small].to_vec();

        let missing = quota - take_small;
        if missing > 0 {
            let mut pool: Vec<SegRef> = segs
                .iter()
                .copied()
                .filter(|s| s.size >= size_threshold)
                .collect();
            // Partial Fisher-Yates with pinned arithmetic keeps the draw
            // sequence stable across releases.
            for i in 0..missing {
                let j = i + (rng.random::<u64>() % (pool.len() - i) as u64) as usize;
                pool.swap(i, j);
            }
            chosen.extend_from_slice(&pool[..missing]);
        }
        val_segments.extend(chosen.iter().map(|s| (s.image_id, s.seg_idx)));
    }

    let val_images: BTreeSet<u32> = val_segments.iter().map(|&(id, _)| id).collect();
    let roles = index
        .images
        .iter()
        .map(|image| {
            let role = if val_images.contains(&image.image_id) {
                SplitRole::Val
            } else {
                SplitRole::Train
            };
            (image.image_id, role)
        })
        .collect();
    val_segments.sort_unstable();
    Ok(SplitAssignment {
        roles,
        quotas,
        val_segments,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Class frequency scores and image weights
// ---------------------------------------------------------------------------

/// Per-class frequency table: `F_c = n_c / N`, `S_c = sqrt(F_c)` for every
/// class with segments; classes 1..=26 absent from the index are listed in
/// `excluded`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub frequency: BTreeMap<u8, f64>,
    pub score: BTreeMap<u8, f64>,
    pub excluded: Vec<u8>,
}

pub fn class_frequency_scores(index: &DatasetIndex) -> Result<WeightTable> {
    let counts = index.class_counts();
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(SplitError::EmptyIndex);
    }
    let mut frequency = BTreeMap::new();
    let mut score = BTreeMap::new();
    for (&class_id, &n) in &counts {
        let f = n as f64 / total as f64;
        frequency.insert(class_id, f);
        score.insert(class_id, f.sqrt());
    }
    let excluded = (1..=MAX_CLASS_ID)
        .filter(|c| !counts.contains_key(c))
        .collect();
    Ok(WeightTable {
        frequency,
        score,
        excluded,
    })
}

/// How the per-image weight reads the class-score formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `S_x = 1 / min_c S_c`: the rarest class present boosts the image
    /// (default; matches the stated goal of oversampling rare classes).
    Intent,
    /// `S_x = min_c (1 / S_c)`: the literal formula, which resolves to the
    /// reciprocal of the most frequent class present.
    AsWritten,
}

/// Sampling weight per image. Images without segments get weight 1.
pub fn image_weights(
    index: &DatasetIndex,
    table: &WeightTable,
    mode: WeightMode,
) -> Result<BTreeMap<u32, f64>> {
    let mut weights = BTreeMap::new();
    for image in &index.images {
        let classes: BTreeSet<u8> = image.segments.iter().map(|s| s.class_id).collect();
        let weight = if classes.is_empty() {
            1.0
        } else {
            let mut scores = Vec::with_capacity(classes.len());
            for &c in &classes {
                let s = *table
                    .score
                    .get(&c)
                    .ok_or(SplitError::UncoveredClass { class_id: c })?;
                if s == 0.0 {
                    return Err(SplitError::UndefinedReciprocal { class_id: c });
                }
                scores.push(s);
            }
            match mode {
                WeightMode::Intent => 1.0 / scores.iter().cloned().fold(f64::INFINITY, f64::min),
                WeightMode::AsWritten => scores
                    .iter()
                    .map(|s| 1.0 / s)
                    .fold(f64::INFINITY, f64::min),
            }
        };
        weights.insert(image.image_id, weight);
    }
    Ok(weights)
}

// ---------------------------------------------------------------------------
// Weighted sampling
// ---------------------------------------------------------------------------

/// Draw `batch` image ids with replacement, probability proportional to
/// weight, by inverse-CDF search over ids in ascending order.
pub fn weighted_sample(
    weights: &BTreeMap<u32, f64>,
    batch: usize,
    rng_seed: u64,
) -> Result<Vec<u32>> {
    if weights.is_empty() {
        return Err(SplitError::EmptyPopulation);
    }
    let mut ids = Vec::with_capacity(weights.len());
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut total = 0.0;
    for (&id, &w) in weights {
        if w <= 0.0 || !w.is_finite() {
            return Err(SplitError::NonPositiveWeight { image_id: id });
        }
        total += w;
        ids.push(id);
        cumulative.push(total);
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let u = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= u).min(ids.len() - 1);
        out.push(ids[idx]);
    }
    Ok(out)
}
