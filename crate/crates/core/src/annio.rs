//! Annotation ingestion and raster formats.
//!
//! Parses the COCO-subset JSON used by angiogram challenge datasets,
//! rasterizes polygon segments at pixel centers under the even-odd rule,
//! flattens per-annotation layers into class-encoded masks, and reads and
//! writes the on-disk raster formats (binary PGM masks, `ARTPROB1`
//! probability maps) bit-exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Highest valid segment class id (25 artery segments + stenosis).
pub const MAX_CLASS_ID: u8 = 26;

/// Class display names in dataset row order (index = class id).
pub const CLASS_NAMES: [&str; 27] = [
    "Background",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9",
    "9a",
    "10",
    "10a",
    "11",
    "12",
    "12a",
    "13",
    "14",
    "14a",
    "15",
    "16",
    "16a",
    "16b",
    "16c",
    "12b",
    "14b",
    "Stenosis",
];

/// Display name for a class id, if in range.
pub fn class_name(id: u8) -> Option<&'static str> {
    CLASS_NAMES.get(id as usize).copied()
}

#[derive(Debug, Error)]
pub enum AnnioError {
    #[error("JSON parse error at line {line}, column {column} (byte offset {offset}): {message}")]
    Parse {
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("annotation {annotation_id} references missing image {image_id}")]
    MissingImage { annotation_id: u32, image_id: u32 },
    #[error("annotation {annotation_id} has category id {category_id} outside 1..=26")]
    CategoryRange { annotation_id: u32, category_id: i64 },
    #[error("annotation {annotation_id} uses an RLE segmentation; only polygon lists are supported")]
    RleUnsupported { annotation_id: u32 },
    #[error("annotation {annotation_id} polygon {index} has an odd coordinate count ({count})")]
    OddCoordinates {
        annotation_id: u32,
        index: usize,
        count: usize,
    },
    #[error("annotation {annotation_id} polygon {index} contains a non-finite coordinate")]
    NonFiniteCoordinate { annotation_id: u32, index: usize },
    #[error("degenerate polygon: {vertices} vertices (at least 3 required)")]
    DegeneratePolygon { vertices: usize },
    #[error("image {image_id} has invalid dimensions {width}x{height}")]
    BadImageDims {
        image_id: u32,
        width: i64,
        height: i64,
    },
    #[error("image {image_id} not present in annotation set")]
    UnknownImage { image_id: u32 },
    #[error("bad mask magic {found:?} (expected \"P5\")")]
    MaskMagic { found: String },
    #[error("malformed PGM header: missing or invalid {field}")]
    MaskHeader { field: &'static str },
    #[error("unsupported PGM maxval {maxval} (only 255)")]
    UnsupportedDepth { maxval: u64 },
    #[error("mask payload size mismatch: expected {expected} bytes, got {actual}")]
    MaskSize { expected: usize, actual: usize },
    #[error("class mask value {value} at index {index} exceeds {MAX_CLASS_ID}")]
    ClassRange { value: u8, index: usize },
    #[error("binary mask value {value} at index {index} is neither 0 nor 255")]
    NotBinary { value: u8, index: usize },
    #[error("bad probability map magic {found:?} (expected \"ARTPROB1\")")]
    ProbMagic { found: String },
    #[error("probability map value at index {index} is non-finite or outside [0,1]")]
    ProbInvalid { index: usize },
    #[error("probability map payload size mismatch: expected {expected} bytes, got {actual}")]
    ProbSize { expected: usize, actual: usize },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnnioError>;

/// One polygon annotation: a class label plus one or more closed polygons
/// in sub-pixel image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub annotation_id: u32,
    pub image_id: u32,
    /// Segment class in 1..=26.
    pub category_id: u8,
    /// Closed polygons; each has at least 3 vertices.
    pub polygons: Vec<Vec<(f64, f64)>>,
}

/// Image metadata from the document `images` array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInfo {
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

/// A parsed annotation document: image table plus annotations in document
/// order.
#[derive(Debug, Clone, Default)]
pub struct AnnotationSet {
    pub images: BTreeMap<u32, ImageInfo>,
    pub annotations: Vec<AnnotationRecord>,
}

impl AnnotationSet {
    /// Annotations belonging to one image, in document order.
    pub fn annotations_for(&self, image_id: u32) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations
            .iter()
            .filter(move |a| a.image_id == image_id)
    }
}

/// Row-major grid of class ids 0..=26 (0 = background).
#[derive(Clone, PartialEq, Eq)]
pub struct ClassMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ClassMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(AnnioError::DimensionMismatch {
                context: format!(
                    "class mask data length {} != {}x{}",
                    data.len(),
                    width,
                    height
                ),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > MAX_CLASS_ID) {
            return Err(AnnioError::ClassRange { value, index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        debug_assert!(value <= MAX_CLASS_ID);
        self.data[y * self.width + x] = value;
    }

    /// Distinct foreground class ids present, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 27];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=MAX_CLASS_ID).filter(|&c| seen[c as usize]).collect()
    }
}

impl fmt::Debug for ClassMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClassMask({}x{})", self.width, self.height)
    }
}

/// Row-major grid holding only 0 or 255.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(AnnioError::DimensionMismatch {
                context: format!(
                    "binary mask data length {} != {}x{}",
                    data.len(),
                    width,
                    height
                ),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0 && v != 255)
        {
            return Err(AnnioError::NotBinary { value, index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = if on { 255 } else { 0 };
    }

    pub fn count_foreground(&self) -> u64 {
        self.data.iter().filter(|&&v| v != 0).count() as u64
    }
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({}x{})", self.width, self.height)
    }
}

/// Per-pixel class probability volume, class-major row-major. Values are
/// `f32` to match the on-disk format exactly.
#[derive(Clone, PartialEq)]
pub struct ProbabilityMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            data: vec![0.0; classes * height * width],
        }
    }

    pub fn from_data(classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(AnnioError::DimensionMismatch {
                context: format!(
                    "probability map data length {} != {}x{}x{}",
                    data.len(),
                    classes,
                    height,
                    width
                ),
            });
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn index(&self, class: usize, y: usize, x: usize) -> usize {
        (class * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, class: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(class, y, x)]
    }
}

impl fmt::Debug for ProbabilityMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ProbabilityMap({}x{}x{})",
            self.classes, self.height, self.width
        )
    }
}

// ---------------------------------------------------------------------------
// COCO-subset parsing
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[allow(dead_code)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u32,
    width: i64,
    height: i64,
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u32,
    image_id: u32,
    category_id: i64,
    segmentation: Segmentation,
}

/// COCO stores polygon segmentations as lists of flat coordinate arrays
/// and RLE segmentations as an object; the latter is rejected.
#[derive(Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(#[allow(dead_code)] serde_json::Map<String, serde_json::Value>),
}

#[derive(Deserialize)]
struct CocoCategory {
    #[allow(dead_code)]
    id: i64,
    #[allow(dead_code)]
    #[serde(default)]
    name: String,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based line/column; column counts bytes.
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

/// Parse a COCO-subset document into an [`AnnotationSet`].
///
/// Unknown fields are ignored. Annotations are returned in document order.
/// Referential integrity (every annotation's image exists), category range
/// (1..=26), and polygon well-formedness (even coordinate count, >= 3
/// finite vertices) are enforced here so downstream code can assume them.
pub fn parse_coco(document_text: &str) -> Result<AnnotationSet> {
    let doc: CocoDoc = serde_json::from_str(document_text).map_err(|e| AnnioError::Parse {
        line: e.line(),
        column: e.column(),
        offset: byte_offset(document_text, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let mut images = BTreeMap::new();
    for img in doc.images {
        if img.width <= 0 || img.height <= 0 {
            return Err(AnnioError::BadImageDims {
                image_id: img.id,
                width: img.width,
                height: img.height,
            });
        }
        images.insert(
            img.id,
            ImageInfo {
                width: img.width as u32,
                height: img.height as u32,
                file_name: img.file_name,
            },
        );
    }

    let mut annotations = Vec::with_capacity(doc.annotations.len());
    for ann in doc.annotations {
        if !images.contains_key(&ann.image_id) {
            return Err(AnnioError::MissingImage {
                annotation_id: ann.id,
                image_id: ann.image_id,
            });
        }
        if ann.category_id < 1 || ann.category_id > MAX_CLASS_ID as i64 {
            return Err(AnnioError::CategoryRange {
                annotation_id: ann.id,
                category_id: ann.category_id,
            });
        }
        let flat_polys = match ann.segmentation {
            Segmentation::Polygons(p) => p,
            Segmentation::Rle(_) => {
                return Err(AnnioError::RleUnsupported { annotation_id: ann.id })
            }
        };
        let mut polygons = Vec::with_capacity(flat_polys.len());
        for (index, flat) in flat_polys.into_iter().enumerate() {
            if flat.len() % 2 != 0 {
                return Err(AnnioError::OddCoordinates {
                    annotation_id: ann.id,
                    index,
                    count: flat.len(),
                });
            }
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(AnnioError::NonFiniteCoordinate {
                    annotation_id: ann.id,
                    index,
                });
            }
            let vertices: Vec<(f64, f64)> =
                flat.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            if vertices.len() < 3 {
                return Err(AnnioError::DegeneratePolygon {
                    vertices: vertices.len(),
                });
            }
            polygons.push(vertices);
        }
        annotations.push(AnnotationRecord {
            annotation_id: ann.id,
            image_id: ann.image_id,
            category_id: ann.category_id as u8,
            polygons,
        });
    }

    Ok(AnnotationSet {
        images,
        annotations,
    })
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Visit the foreground spans of one polygon row by row.
///
/// A pixel (x, y) is foreground iff its center (x+0.5, y+0.5) lies inside
/// the polygon under the even-odd rule. Edges are intersected with each
/// row's center line using the half-open convention `(y1 <= yc) != (y2 <= yc)`
/// so vertices on the line are counted exactly once.
fn polygon_spans(
    polygon: &[(f64, f64)],
    width: usize,
    height: usize,
    mut emit: impl FnMut(usize, usize, usize),
) {
    let n = polygon.len();
    let min_y = polygon.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = polygon
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let y_start = (min_y - 0.5).ceil().max(0.0) as usize;
    let y_end = ((max_y - 0.5).ceil() as i64).clamp(0, height as i64) as usize;

    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    for y in y_start..y_end {
        let yc = y as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (x1, y1) = polygon[i];
            let (x2, y2) = polygon[(i + 1) % n];
            if (y1 <= yc) != (y2 <= yc) {
                crossings.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks_exact(2) {
            // Centers x+0.5 in [a, b).
            let x0 = ((pair[0] - 0.5).ceil() as i64).clamp(0, width as i64) as usize;
            let x1 = ((pair[1] - 0.5).ceil() as i64).clamp(0, width as i64) as usize;
            if x0 < x1 {
                emit(y, x0, x1);
            }
        }
    }
}

/// Rasterize a single closed polygon into a binary mask.
pub fn rasterize_polygon(
    polygon: &[(f64, f64)],
    width: usize,
    height: usize,
) -> Result<BinaryMask> {
    if polygon.len() < 3 {
        return Err(AnnioError::DegeneratePolygon {
            vertices: polygon.len(),
        });
    }
    let mut mask = BinaryMask::new(width, height);
    polygon_spans(polygon, width, height, |y, x0, x1| {
        mask.data[y * width + x0..y * width + x1].fill(255);
    });
    Ok(mask)
}

/// Rasterize an annotation as the union of its polygons.
pub fn rasterize_annotation(
    record: &AnnotationRecord,
    width: usize,
    height: usize,
) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(width, height);
    for polygon in &record.polygons {
        if polygon.len() < 3 {
            return Err(AnnioError::DegeneratePolygon {
                vertices: polygon.len(),
            });
        }
        polygon_spans(polygon, width, height, |y, x0, x1| {
            mask.data[y * width + x0..y * width + x1].fill(255);
        });
    }
    Ok(mask)
}

/// Which annotation claims a pixel covered by several annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapPolicy {
    /// Later annotations in document order overwrite earlier ones (default).
    LastWins,
    /// The first covering annotation keeps the pixel.
    FirstWins,
}

/// Flatten all annotations of one image into a class-encoded mask.
pub fn build_class_mask(
    set: &AnnotationSet,
    image_id: u32,
    policy: OverlapPolicy,
) -> Result<ClassMask> {
    let info = set
        .images
        .get(&image_id)
        .ok_or(AnnioError::UnknownImage { image_id })?;
    let (width, height) = (info.width as usize, info.height as usize);
    let mut mask = ClassMask::new(width, height);
    for record in set.annotations_for(image_id) {
        let class = record.category_id;
        for polygon in &record.polygons {
            polygon_spans(polygon, width, height, |y, x0, x1| {
                for v in &mut mask.data[y * width + x0..y * width + x1] {
                    match policy {
                        OverlapPolicy::LastWins => *v = class,
                        OverlapPolicy::FirstWins => {
                            if *v == 0 {
                                *v = class;
                            }
                        }
                    }
                }
            });
        }
    }
    Ok(mask)
}

/// Collapse a class mask to binary: 255 wherever the class id is nonzero.
pub fn binarize_mask(mask: &ClassMask) -> BinaryMask {
    BinaryMask {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect(),
    }
}

// ---------------------------------------------------------------------------
// Mask I/O: binary PGM (P5), maxval 255
// ---------------------------------------------------------------------------

fn write_pgm(width: usize, height: usize, data: &[u8], path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + data.len());
    write!(out, "P5\n{} {}\n255\n", width, height)?;
    out.extend_from_slice(data);
    fs::write(path, out)?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(AnnioError::MaskMagic { found });
    }
    let mut pos = 2;
    let mut next_token = |field: &'static str| -> Result<u64> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(AnnioError::MaskHeader { field });
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(AnnioError::MaskHeader { field })
    };
    let width = next_token("width")? as usize;
    let height = next_token("height")? as usize;
    let maxval = next_token("maxval")?;
    if maxval != 255 {
        return Err(AnnioError::UnsupportedDepth { maxval });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(AnnioError::MaskHeader { field: "separator" });
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = width * height;
    if payload.len() != expected {
        return Err(AnnioError::MaskSize {
            expected,
            actual: payload.len(),
        });
    }
    Ok((width, height, payload.to_vec()))
}

/// Write a class mask as binary PGM; class ids map directly to byte values.
pub fn write_class_mask(mask: &ClassMask, path: &Path) -> Result<()> {
    write_pgm(mask.width, mask.height, &mask.data, path)
}

/// Read a class mask written by [`write_class_mask`]. Values above 26 are
/// rejected.
pub fn read_class_mask(path: &Path) -> Result<ClassMask> {
    let (width, height, data) = read_pgm(path)?;
    ClassMask::from_data(width, height, data)
}

/// Write a binary mask as binary PGM (values 0 and 255).
pub fn write_binary_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    write_pgm(mask.width, mask.height, &mask.data, path)
}

/// Read a binary mask; any value other than 0 or 255 is rejected.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    let (width, height, data) = read_pgm(path)?;
    BinaryMask::from_data(width, height, data)
}

// ---------------------------------------------------------------------------
// Probability map I/O: "ARTPROB1", u32 LE C,H,W, then f32 LE data
// ---------------------------------------------------------------------------

const PROB_MAGIC: &[u8; 8] = b"ARTPROB1";

/// Write a probability map. All values must be finite and in [0,1]; the
/// check runs before the file is created so failures leave nothing behind.
pub fn write_probmap(map: &ProbabilityMap, path: &Path) -> Result<()> {
    if let Some((index, _)) = map
        .data
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(AnnioError::ProbInvalid { index });
    }
    let mut out = Vec::with_capacity(8 + 12 + map.data.len() * 4);
    out.extend_from_slice(PROB_MAGIC);
    out.extend_from_slice(&(map.classes as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a probability map written by [`write_probmap`].
pub fn read_probmap(path: &Path) -> Result<ProbabilityMap> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != PROB_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(AnnioError::ProbMagic { found });
    }
    if bytes.len() < 20 {
        return Err(AnnioError::ProbSize {
            expected: 20,
            actual: bytes.len(),
        });
    }
    let classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expected = classes * height * width * 4;
    let payload = &bytes[20..];
    if payload.len() != expected {
        return Err(AnnioError::ProbSize {
            expected,
            actual: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(classes * height * width);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    if let Some((index, _)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(AnnioError::ProbInvalid { index });
    }
    ProbabilityMap::from_data(classes, height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn coco_doc(annotations: &str) -> String {
        format!(
            r#"{{
  "images": [{{"id": 1, "width": 512, "height": 512, "file_name": "a.pgm"}}],
  "annotations": [{}],
  "categories": [{{"id": 5, "name": "5"}}]
}}"#,
            annotations
        )
    }

    #[test]
    fn parse_single_record() {
        let doc = coco_doc(
            r#"{"id": 10, "image_id": 1, "category_id": 5,
                "segmentation": [[0.0, 0.0, 4.0, 0.0, 4.0, 4.0]]}"#,
        );
        let set = parse_coco(&doc).unwrap();
        assert_eq!(set.images.len(), 1);
        assert_eq!(set.annotations.len(), 1);
        assert_eq!(set.annotations[0].category_id, 5);
        assert_eq!(set.images[&1].width, 512);
    }

    #[test]
    fn parse_empty_annotations() {
        let set = parse_coco(&coco_doc("")).unwrap();
        assert!(set.annotations.is_empty());
    }

    #[test]
    fn parse_missing_image_reference() {
        let doc = r#"{
          "images": [{"id": 1, "width": 8, "height": 8, "file_name": "a.pgm"}],
          "annotations": [{"id": 3, "image_id": 99, "category_id": 2,
                           "segmentation": [[0,0, 1,0, 1,1]]}],
          "categories": []
        }"#;
        match parse_coco(doc) {
            Err(AnnioError::MissingImage {
                annotation_id: 3,
                image_id: 99,
            }) => {}
            other => panic!("expected MissingImage, got {:?}", other.err()),
        }
    }

    #[test]
    fn parse_reports_byte_offset() {
        let doc = "{\n  \"images\": [}";
        match parse_coco(doc) {
            Err(AnnioError::Parse { offset, .. }) => {
                assert_eq!(&doc.as_bytes()[offset..offset + 1], b"}");
            }
            other => panic!("expected Parse, got {:?}", other.err()),
        }
    }

    #[test]
    fn parse_rejects_category_out_of_range() {
        let doc = coco_doc(
            r#"{"id": 1, "image_id": 1, "category_id": 27,
                "segmentation": [[0,0, 1,0, 1,1]]}"#,
        );
        assert!(matches!(
            parse_coco(&doc),
            Err(AnnioError::CategoryRange {
                annotation_id: 1,
                category_id: 27
            })
        ));
    }

    #[test]
    fn parse_rejects_rle() {
        let doc = coco_doc(
            r#"{"id": 1, "image_id": 1, "category_id": 5,
                "segmentation": {"counts": [1, 2], "size": [8, 8]}}"#,
        );
        assert!(matches!(
            parse_coco(&doc),
            Err(AnnioError::RleUnsupported { annotation_id: 1 })
        ));
    }

    #[test]
    fn order_stability() {
        let doc = coco_doc(
            r#"{"id": 7, "image_id": 1, "category_id": 1, "segmentation": [[0,0, 1,0, 1,1]]},
               {"id": 3, "image_id": 1, "category_id": 2, "segmentation": [[0,0, 1,0, 1,1]]},
               {"id": 5, "image_id": 1, "category_id": 3, "segmentation": [[0,0, 1,0, 1,1]]}"#,
        );
        let set = parse_coco(&doc).unwrap();
        let ids: Vec<u32> = set.annotations.iter().map(|a| a.annotation_id).collect();
        assert_eq!(ids, vec![7, 3, 5]);
    }

    /// Independent even-odd point-in-polygon test (ray cast to +x).
    fn center_inside(px: f64, py: f64, polygon: &[(f64, f64)]) -> bool {
        let n = polygon.len();
        let mut inside = false;
        for i in 0..n {
            let (x1, y1) = polygon[i];
            let (x2, y2) = polygon[(i + 1) % n];
            if (y1 <= py) != (y2 <= py) {
                let xc = x1 + (py - y1) * (x2 - x1) / (y2 - y1);
                if px < xc {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn oracle_rasterize(polygon: &[(f64, f64)], width: usize, height: usize) -> BinaryMask {
        let mut mask = BinaryMask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if center_inside(x as f64 + 0.5, y as f64 + 0.5, polygon) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    #[test]
    fn rasterize_square() {
        let square = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
        let mask = rasterize_polygon(&square, 8, 8).unwrap();
        assert_eq!(mask.count_foreground(), 16);
        assert_eq!(mask, oracle_rasterize(&square, 8, 8));
    }

    #[test]
    fn rasterize_degenerate() {
        let err = rasterize_polygon(&[(0.0, 0.0), (1.0, 1.0)], 8, 8).unwrap_err();
        assert!(matches!(err, AnnioError::DegeneratePolygon { vertices: 2 }));
    }

    #[test]
    fn rasterize_triangle_matches_oracle() {
        let tri = [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)];
        let mask = rasterize_polygon(&tri, 8, 8).unwrap();
        let oracle = oracle_rasterize(&tri, 8, 8);
        assert_eq!(mask, oracle);
        assert_eq!(mask.count_foreground(), oracle.count_foreground());
    }

    #[test]
    fn rasterize_matches_oracle_on_random_polygons() {
        let mut rng = crate::seeds::rng_from_seed(0xA55);
        for case in 0..100 {
            let n = 3 + (rng.random::<u64>() % 8) as usize;
            let polygon: Vec<(f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random::<f64>() * 36.0 - 2.0,
                        rng.random::<f64>() * 36.0 - 2.0,
                    )
                })
                .collect();
            let mask = rasterize_polygon(&polygon, 32, 32).unwrap();
            let oracle = oracle_rasterize(&polygon, 32, 32);
            assert_eq!(mask, oracle, "mismatch on case {case}: {polygon:?}");
        }
    }

    fn two_square_doc(second_cat: u8, overlap: bool) -> AnnotationSet {
        let second = if overlap {
            "[[2.0,2.0, 6.0,2.0, 6.0,6.0, 2.0,6.0]]"
        } else {
            "[[5.0,5.0, 7.0,5.0, 7.0,7.0, 5.0,7.0]]"
        };
        let doc = format!(
            r#"{{
          "images": [{{"id": 1, "width": 8, "height": 8, "file_name": "a.pgm"}}],
          "annotations": [
            {{"id": 1, "image_id": 1, "category_id": {}, "segmentation": [[0,0, 4,0, 4,4, 0,4]]}},
            {{"id": 2, "image_id": 1, "category_id": {}, "segmentation": {}}}
          ],
          "categories": []
        }}"#,
            if overlap { 3 } else { 1 },
            second_cat,
            second
        );
        parse_coco(&doc).unwrap()
    }

    #[test]
    fn class_mask_disjoint_squares() {
        let set = two_square_doc(2, false);
        let mask = build_class_mask(&set, 1, OverlapPolicy::LastWins).unwrap();
        let mut values: Vec<u8> = mask.data.clone();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values, vec![0, 1, 2]);
        // Each annotation region must agree with its own rasterization.
        for record in set.annotations_for(1) {
            let layer = rasterize_annotation(record, 8, 8).unwrap();
            for (i, &on) in layer.data.iter().enumerate() {
                if on != 0 {
                    assert_eq!(mask.data[i], record.category_id);
                }
            }
        }
    }

    #[test]
    fn class_mask_overlap_policies() {
        let set = two_square_doc(7, true);
        let last = build_class_mask(&set, 1, OverlapPolicy::LastWins).unwrap();
        let first = build_class_mask(&set, 1, OverlapPolicy::FirstWins).unwrap();
        // Overlap pixels: covered by both squares.
        let a = rasterize_annotation(&set.annotations[0], 8, 8).unwrap();
        let b = rasterize_annotation(&set.annotations[1], 8, 8).unwrap();
        let mut overlap_seen = false;
        for i in 0..64 {
            let both = a.data[i] != 0 && b.data[i] != 0;
            if both {
                overlap_seen = true;
                assert_eq!(last.data[i], 7);
                assert_eq!(first.data[i], 3);
            } else {
                // Policies agree away from multiply-covered pixels.
                assert_eq!(last.data[i], first.data[i]);
            }
        }
        assert!(overlap_seen);
    }

    #[test]
    fn class_mask_empty_image() {
        let set = parse_coco(&coco_doc("")).unwrap();
        let mask = build_class_mask(&set, 1, OverlapPolicy::LastWins).unwrap();
        assert!(mask.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn class_mask_unknown_image() {
        let set = parse_coco(&coco_doc("")).unwrap();
        assert!(matches!(
            build_class_mask(&set, 42, OverlapPolicy::LastWins),
            Err(AnnioError::UnknownImage { image_id: 42 })
        ));
    }

    #[test]
    fn binarize_examples() {
        let mask = ClassMask::from_data(3, 1, vec![0, 3, 7]).unwrap();
        let bin = binarize_mask(&mask);
        assert_eq!(bin.data, vec![0, 255, 255]);

        let zeros = ClassMask::new(4, 4);
        assert!(binarize_mask(&zeros).data.iter().all(|&v| v == 0));

        // Idempotence: re-binarizing the binary values a class mask cannot
        // hold is exercised through the {0,255}->{0,255} fixed point.
        let fixed = BinaryMask::from_data(3, 1, vec![0, 255, 255]).unwrap();
        let again = binarize_mask(&ClassMask {
            width: 3,
            height: 1,
            data: fixed.data.iter().map(|&v| if v > 0 { 1 } else { 0 }).collect(),
        });
        assert_eq!(again, fixed);
    }

    #[test]
    fn mask_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = ClassMask::from_data(4, 4, vec![5; 16]).unwrap();
        write_class_mask(&mask, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(&bytes[11..], &[5u8; 16][..]);
        assert_eq!(read_class_mask(&path).unwrap(), mask);
    }

    #[test]
    fn mask_roundtrip_random() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut rng = crate::seeds::rng_from_seed(9);
        let data: Vec<u8> = (0..32 * 32).map(|_| (rng.random::<u64>() % 27) as u8).collect();
        let mask = ClassMask::from_data(32, 32, data).unwrap();
        write_class_mask(&mask, &path).unwrap();
        assert_eq!(read_class_mask(&path).unwrap(), mask);
    }

    #[test]
    fn mask_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P6\n1 1\n255\n\0").unwrap();
        match read_class_mask(&path) {
            Err(AnnioError::MaskMagic { found }) => assert_eq!(found, "P6"),
            other => panic!("expected MaskMagic, got {:?}", other.err()),
        }
    }

    #[test]
    fn mask_bad_depth_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P5\n2 2\n128\n\0\0\0\0").unwrap();
        assert!(matches!(
            read_class_mask(&path),
            Err(AnnioError::UnsupportedDepth { maxval: 128 })
        ));
        fs::write(&path, b"P5\n2 2\n255\n\0\0").unwrap();
        assert!(matches!(
            read_class_mask(&path),
            Err(AnnioError::MaskSize {
                expected: 4,
                actual: 2
            })
        ));
    }

    #[test]
    fn probmap_layout_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.probmap");
        let map = ProbabilityMap::from_data(2, 1, 1, vec![0.25, 0.75]).unwrap();
        write_probmap(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 28);
        assert_eq!(&bytes[..8], b"ARTPROB1");
        assert_eq!(read_probmap(&path).unwrap(), map);
    }

    #[test]
    fn probmap_rejects_nan_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.probmap");
        let map = ProbabilityMap::from_data(1, 1, 2, vec![0.5, f32::NAN]).unwrap();
        assert!(matches!(
            write_probmap(&map, &path),
            Err(AnnioError::ProbInvalid { index: 1 })
        ));
        assert!(!path.exists());
    }

    #[test]
    fn probmap_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.probmap");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"ARTPROB1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match read_probmap(&path) {
            Err(AnnioError::ProbSize { expected, actual }) => {
                assert_eq!(expected, 8);
                assert_eq!(actual, 4);
            }
            other => panic!("expected ProbSize, got {:?}", other.err()),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            /// I/O roundtrips are bit-identical for arbitrary valid masks.
            #[test]
            fn mask_roundtrip(w in 1usize..12, h in 1usize..12, seed in 0u64..1000) {
                let mut rng = crate::seeds::rng_from_seed(seed);
                let data: Vec<u8> = (0..w * h).map(|_| (rng.random::<u64>() % 27) as u8).collect();
                let mask = ClassMask::from_data(w, h, data).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("m.pgm");
                write_class_mask(&mask, &path).unwrap();
                prop_assert_eq!(read_class_mask(&path).unwrap(), mask);
            }

            /// Probability map roundtrips are bit-identical.
            #[test]
            fn probmap_roundtrip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
                let mut rng = crate::seeds::rng_from_seed(seed);
                let data: Vec<f32> = (0..c * h * w).map(|_| rng.random::<f64>() as f32).collect();
                let map = ProbabilityMap::from_data(c, h, w, data).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("p.probmap");
                write_probmap(&map, &path).unwrap();
                let back = read_probmap(&path).unwrap();
                prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                map.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }
}
