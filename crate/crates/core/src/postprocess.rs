//! Morphological repair of decoded class masks: open-close smoothing,
//! removal of implausibly sized segments, hole filling, and per-class
//! recomposition.

use std::collections::VecDeque;

use thiserror::Error;

use crate::annio::{BinaryMask, ClassMask};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("structuring element size {0} must be odd and >= 3")]
    BadStructuringElement(usize),
    #[error("invalid refine configuration: {0}")]
    BadConfig(&'static str),
}

pub type Result<T> = std::result::Result<T, PostprocessError>;

/// Basic binary morphology operators with a square structuring element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
    /// Erode then dilate: removes small foreground.
    Open,
    /// Dilate then erode: bridges small gaps.
    Close,
}

fn erode_or_dilate(mask: &BinaryMask, se: usize, dilate: bool) -> BinaryMask {
    let half = (se / 2) as i64;
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut out = BinaryMask::new(mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            // Border counts as background: erosion needs every neighbor
            // inside and set; dilation needs any in-bounds neighbor set.
            let mut hit = !dilate;
            'scan: for ky in -half..=half {
                for kx in -half..=half {
                    let (nx, ny) = (x + kx, y + ky);
                    let on = nx >= 0
                        && nx < w
                        && ny >= 0
                        && ny < h
                        && mask.data[(ny * w + nx) as usize] != 0;
                    if dilate && on {
                        hit = true;
                        break 'scan;
                    }
                    if !dilate && !on {
                        hit = false;
                        break 'scan;
                    }
                }
            }
            if hit {
                out.data[(y * w + x) as usize] = 255;
            }
        }
    }
    out
}

/// Apply one morphology operation with a `se x se` square structuring
/// element (`se` odd, >= 3). The border is treated as background.
pub fn morphology(mask: &BinaryMask, op: MorphOp, se: usize) -> Result<BinaryMask> {
    if se < 3 || se % 2 == 0 {
        return Err(PostprocessError::BadStructuringElement(se));
    }
    Ok(match op {
        MorphOp::Erode => erode_or_dilate(mask, se, false),
        MorphOp::Dilate => erode_or_dilate(mask, se, true),
        MorphOp::Open => erode_or_dilate(&erode_or_dilate(mask, se, false), se, true),
        MorphOp::Close => erode_or_dilate(&erode_or_dilate(mask, se, true), se, false),
    })
}

/// One connected blob: owning class, pixel count, and bounding box
/// (x0, y0, x1, y1 inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blob {
    pub class_id: u8,
    pub pixels: usize,
    pub bbox: (usize, usize, usize, usize),
}

/// 8-connected component labeling. Label 0 is background; blob `i` has
/// label `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobLabeling {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub blobs: Vec<Blob>,
}

/// Label the 8-connected foreground components of a binary mask. Labels
/// are assigned in raster-scan order of each blob's first pixel, so the
/// output is deterministic. `class_id` tags the blobs with the class the
/// layer represents (use 0 for plain binary masks).
pub fn connected_components(mask: &BinaryMask, class_id: u8) -> BlobLabeling {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = blobs.len() as u32 + 1;
        let mut pixels = 0usize;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        labels[start] = label;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            pixels += 1;
            let (x, y) = (idx % w, idx / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = (ny as usize) * w + nx as usize;
                    if mask.data[nidx] != 0 && labels[nidx] == 0 {
                        labels[nidx] = label;
                        queue.push_back(nidx);
                    }
                }
            }
        }
        blobs.push(Blob {
            class_id,
            pixels,
            bbox: (x0, y0, x1, y1),
        });
    }
    BlobLabeling {
        width: w,
        height: h,
        labels,
        blobs,
    }
}

/// Fill enclosed holes: background components with no path to the image
/// border become foreground. Background connectivity is 4-connected, the
/// dual of the 8-connected foreground.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut reachable = vec![false; w * h];
    let mut queue = VecDeque::new();
    let push = |idx: usize, reachable: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if mask.data[idx] == 0 && !reachable[idx] {
            reachable[idx] = true;
            queue.push_back(idx);
        }
    };
    for x in 0..w {
        push(x, &mut reachable, &mut queue);
        push((h - 1) * w + x, &mut reachable, &mut queue);
    }
    for y in 0..h {
        push(y * w, &mut reachable, &mut queue);
        push(y * w + w - 1, &mut reachable, &mut queue);
    }
    while let Some(idx) = queue.pop_front() {
        let (x, y) = (idx % w, idx / w);
        for (nx, ny) in [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ] {
            if nx < w && ny < h {
                push(ny * w + nx, &mut reachable, &mut queue);
            }
        }
    }
    let mut out = mask.clone();
    for (idx, r) in reachable.iter().enumerate() {
        if mask.data[idx] == 0 && !r {
            out.data[idx] = 255;
        }
    }
    out
}

/// Mask repair parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Square structuring element side, odd and >= 3.
    pub se_size: usize,
    /// Components smaller than this are dropped.
    pub min_size: usize,
    /// Components larger than this are dropped.
    pub max_size: usize,
    pub fill_holes: bool,
    pub passes: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            se_size: 3,
            min_size: 64,
            max_size: 8192,
            fill_holes: true,
            passes: 1,
        }
    }
}

impl RefineConfig {
    /// Defaults with size bounds scaled by image area relative to the
    /// 512x512 frames the unscaled thresholds were calibrated on.
    pub fn scaled_default(width: usize, height: usize) -> Self {
        let scale = (width * height) as f64 / (512.0 * 512.0);
        let base = Self::default();
        Self {
            min_size: ((base.min_size as f64 * scale).round() as usize).max(1),
            max_size: ((base.max_size as f64 * scale).round() as usize).max(2),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.se_size < 3 || self.se_size % 2 == 0 {
            return Err(PostprocessError::BadStructuringElement(self.se_size));
        }
        if self.min_size >= self.max_size {
            return Err(PostprocessError::BadConfig("min_size must be < max_size"));
        }
        if self.passes == 0 {
            return Err(PostprocessError::BadConfig("passes must be >= 1"));
        }
        Ok(())
    }
}

fn refine_once(mask: &ClassMask, cfg: &RefineConfig) -> Result<ClassMask> {
    let (w, h) = (mask.width, mask.height);
    // Per pixel: winning class and the size of the blob that claimed it.
    let mut win_class = vec![0u8; w * h];
    let mut win_size = vec![0usize; w * h];
    for class in mask.classes_present() {
        let layer = BinaryMask {
            width: w,
            height: h,
            data: mask
                .data
                .iter()
                .map(|&v| if v == class { 255 } else { 0 })
                .collect(),
        };
        let mut repaired = morphology(&layer, MorphOp::Open, cfg.se_size)?;
        repaired = morphology(&repaired, MorphOp::Close, cfg.se_size)?;
        if cfg.fill_holes {
            repaired = fill_holes(&repaired);
        }
        let labeling = connected_components(&repaired, class);
        for (idx, &label) in labeling.labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            let size = labeling.blobs[label as usize - 1].pixels;
            if size < cfg.min_size || size > cfg.max_size {
                continue;
            }
            // Overlaps after repair go to the larger blob; ties keep the
            // lower class id (classes are visited ascending).
            if size > win_size[idx] {
                win_size[idx] = size;
                win_class[idx] = class;
            }
        }
    }
    Ok(ClassMask {
        width: w,
        height: h,
        data: win_class,
    })
}

/// Repair a class mask: per foreground class (ascending), open-close with
/// the structuring element, optionally fill holes, drop components outside
/// `[min_size, max_size]`, then recompose. Classes absent from the input
/// stay absent.
pub fn refine_mask(mask: &ClassMask, cfg: &RefineConfig) -> Result<ClassMask> {
    cfg.validate()?;
    let mut current = refine_once(mask, cfg)?;
    for _ in 1..cfg.passes {
        current = refine_once(&current, cfg)?;
    }
    Ok(current)
}
