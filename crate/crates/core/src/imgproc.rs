//! Deterministic grayscale transforms for preprocessing and train-time
//! degradation.
//!
//! All operations preserve dimensions and the 8-bit range, convert
//! float results to bytes with half-up rounding exactly once per
//! operation, and use reflect-101 borders for convolutions. Randomized
//! operations own a generator seeded by the caller, so identical inputs
//! and seeds give byte-identical outputs.

use rand::Rng;
use thiserror::Error;

use crate::seeds::rng_from_seed;

#[derive(Debug, Error)]
pub enum ImgprocError {
    #[error("tile grid {tiles}x{tiles} does not fit a {width}x{height} image")]
    TilesTooLarge {
        tiles: usize,
        width: usize,
        height: usize,
    },
    #[error("tone curve control points must start at x=0, end at x=1, and be strictly increasing in x")]
    BadToneCurve,
    #[error("invalid parameter: {0}")]
    BadParameter(&'static str),
}

pub type Result<T> = std::result::Result<T, ImgprocError>;

/// Row-major 8-bit grayscale image.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "image data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

/// Half-up rounding to a byte, the crate-wide float-to-u8 convention.
#[inline]
fn to_byte(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Reflect-101 index mapping: ...3 2 1 | 0 1 2 3 | 2 1 0...
#[inline]
fn reflect101(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - r;
    }
    r as usize
}

// ---------------------------------------------------------------------------
// CLAHE
// ---------------------------------------------------------------------------

/// CLAHE parameters: histogram clip factor and square tile grid size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tiles: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles: 8,
        }
    }
}

/// Per-tile lookup table: clipped histogram, excess redistributed evenly
/// (remainder to the lowest bins), then `lut[v] = round(255 * cdf[v] / area)`.
fn tile_lut(hist: &[u64; 256], area: usize, clip_limit: f64) -> [u8; 256] {
    let mut hist = *hist;
    let clip = ((clip_limit * area as f64 / 256.0).max(1.0)).floor() as u64;
    let mut excess = 0u64;
    for bin in hist.iter_mut() {
        if *bin > clip {
            excess += *bin - clip;
            *bin = clip;
        }
    }
    let share = excess / 256;
    let remainder = (excess % 256) as usize;
    for (i, bin) in hist.iter_mut().enumerate() {
        *bin += share + u64::from(i < remainder);
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for v in 0..256 {
        cdf += hist[v];
        lut[v] = to_byte(255.0 * cdf as f64 / area as f64);
    }
    lut
}

/// Contrast-limited adaptive histogram equalization over an `n x n` tile
/// grid with bilinear interpolation between neighboring tile mappings.
pub fn clahe(img: &GrayImage, clip_limit: f64, tiles: usize) -> Result<GrayImage> {
    if clip_limit <= 0.0 {
        return Err(ImgprocError::BadParameter("clip_limit must be > 0"));
    }
    if tiles < 1 {
        return Err(ImgprocError::BadParameter("tiles must be >= 1"));
    }
    if tiles > img.width || tiles > img.height {
        return Err(ImgprocError::TilesTooLarge {
            tiles,
            width: img.width,
            height: img.height,
        });
    }

    // Tile t spans [floor(t*extent/n), floor((t+1)*extent/n)).
    let bound = |t: usize, extent: usize| t * extent / tiles;
    let mut luts = vec![[0u8; 256]; tiles * tiles];
    let mut centers_x = vec![0.0f64; tiles];
    let mut centers_y = vec![0.0f64; tiles];
    for ty in 0..tiles {
        let (y0, y1) = (bound(ty, img.height), bound(ty + 1, img.height));
        centers_y[ty] = (y0 + y1) as f64 / 2.0;
        for tx in 0..tiles {
            let (x0, x1) = (bound(tx, img.width), bound(tx + 1, img.width));
            centers_x[tx] = (x0 + x1) as f64 / 2.0;
            let mut hist = [0u64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[img.get(x, y) as usize] += 1;
                }
            }
            luts[ty * tiles + tx] = tile_lut(&hist, (x1 - x0) * (y1 - y0), clip_limit);
        }
    }

    let mut out = GrayImage::new(img.width, img.height, 0);
    for y in 0..img.height {
        let cy = y as f64 + 0.5;
        let ty1 = match centers_y.partition_point(|&c| c <= cy) {
            0 => 0,
            p => p - 1,
        };
        let ty2 = (ty1 + 1).min(tiles - 1);
        let fy = if ty2 > ty1 {
            ((cy - centers_y[ty1]) / (centers_y[ty2] - centers_y[ty1])).clamp(0.0, 1.0)
        } else {
            0.0
        };
        for x in 0..img.width {
            let cx = x as f64 + 0.5;
            let tx1 = match centers_x.partition_point(|&c| c <= cx) {
                0 => 0,
                p => p - 1,
            };
            let tx2 = (tx1 + 1).min(tiles - 1);
            let fx = if tx2 > tx1 {
                ((cx - centers_x[tx1]) / (centers_x[tx2] - centers_x[tx1])).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let v = img.get(x, y) as usize;
            let tl = luts[ty1 * tiles + tx1][v] as f64;
            let tr = luts[ty1 * tiles + tx2][v] as f64;
            let bl = luts[ty2 * tiles + tx1][v] as f64;
            let br = luts[ty2 * tiles + tx2][v] as f64;
            let top = tl + fx * (tr - tl);
            let bottom = bl + fx * (br - bl);
            out.set(x, y, to_byte(top + fy * (bottom - top)));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gamma and tone curve
// ---------------------------------------------------------------------------

/// Apply gamma then a piecewise-linear tone curve through control points on
/// the unit square; a single half-up rounding at the end.
///
/// Control points must start at x=0, end at x=1, and be strictly increasing
/// in x. Pass `&[(0.0, 0.0), (1.0, 1.0)]` for the identity curve.
pub fn point_transform(
    img: &GrayImage,
    gamma: f64,
    tone_points: &[(f64, f64)],
) -> Result<GrayImage> {
    if gamma <= 0.0 {
        return Err(ImgprocError::BadParameter("gamma must be > 0"));
    }
    if tone_points.len() < 2
        || tone_points[0].0 != 0.0
        || tone_points[tone_points.len() - 1].0 != 1.0
        || tone_points.windows(2).any(|w| w[1].0 <= w[0].0)
    {
        return Err(ImgprocError::BadToneCurve);
    }

    // 256-entry LUT; each input value is transformed once.
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        let t = (v as f64 / 255.0).powf(gamma);
        let seg = tone_points
            .windows(2)
            .find(|w| t <= w[1].0)
            .unwrap_or_else(|| &tone_points[tone_points.len() - 2..]);
        let (x0, y0) = seg[0];
        let (x1, y1) = seg[1];
        let mapped = y0 + (t - x0) * (y1 - y0) / (x1 - x0);
        *slot = to_byte(255.0 * mapped);
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| lut[v as usize]).collect(),
    })
}

// ---------------------------------------------------------------------------
// Gabor filtering
// ---------------------------------------------------------------------------

/// Real-part Gabor kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborParams {
    /// Carrier wavelength in pixels.
    pub wavelength: f64,
    /// Carrier orientation in radians.
    pub orientation: f64,
    /// Gaussian envelope sigma in pixels.
    pub sigma: f64,
    /// Spatial aspect ratio of the envelope.
    pub aspect: f64,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            wavelength: 8.0,
            orientation: 0.0,
            sigma: 3.0,
            aspect: 0.5,
        }
    }
}

/// Evaluate the real Gabor kernel, truncated at +-3 sigma.
pub fn gabor_kernel(params: &GaborParams) -> (usize, Vec<f64>) {
    let half = (3.0 * params.sigma).ceil() as i64;
    let size = (2 * half + 1) as usize;
    let (sin_t, cos_t) = params.orientation.sin_cos();
    let mut kernel = Vec::with_capacity(size * size);
    for ky in -half..=half {
        for kx in -half..=half {
            let xr = kx as f64 * cos_t + ky as f64 * sin_t;
            let yr = -(kx as f64) * sin_t + ky as f64 * cos_t;
            let envelope =
                (-(xr * xr + params.aspect * params.aspect * yr * yr) / (2.0 * params.sigma * params.sigma)).exp();
            kernel.push(envelope * (2.0 * std::f64::consts::PI * xr / params.wavelength).cos());
        }
    }
    (size, kernel)
}

/// Convolve with the real-part Gabor kernel; reflect-101 borders, result
/// clamped to [0,255] with half-up rounding.
pub fn gabor(img: &GrayImage, params: &GaborParams) -> Result<GrayImage> {
    if params.sigma <= 0.0 {
        return Err(ImgprocError::BadParameter("sigma must be > 0"));
    }
    let (size, kernel) = gabor_kernel(params);
    let half = (size / 2) as i64;
    let mut out = GrayImage::new(img.width, img.height, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = 0.0;
            for ky in 0..size as i64 {
                let sy = reflect101(y as i64 + ky - half, img.height);
                for kx in 0..size as i64 {
                    let sx = reflect101(x as i64 + kx - half, img.width);
                    acc += kernel[(ky * size as i64 + kx) as usize] * img.get(sx, sy) as f64;
                }
            }
            out.set(x, y, to_byte(acc));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Degradation: multiplicative noise + Gaussian blur
// ---------------------------------------------------------------------------

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur over f64 samples, reflect-101 borders.
fn blur_f64(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let half = (taps.len() / 2) as i64;
    let mut horiz = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let sx = reflect101(x as i64 + k as i64 - half, width);
                acc += tap * values[y * width + sx];
            }
            horiz[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, tap) in taps.iter().enumerate() {
                let sy = reflect101(y as i64 + k as i64 - half, height);
                acc += tap * horiz[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Multiplicative uniform noise in `[lo, hi]` followed by a Gaussian blur
/// (`sigma == 0` skips the blur). `noise_range == [1, 1]` with `sigma == 0`
/// is the byte-exact identity.
pub fn degrade(
    img: &GrayImage,
    noise_range: (f64, f64),
    blur_sigma: f64,
    seed: u64,
) -> Result<GrayImage> {
    let (lo, hi) = noise_range;
    if !(0.0 < lo && lo <= hi) {
        return Err(ImgprocError::BadParameter("noise range must satisfy 0 < lo <= hi"));
    }
    if blur_sigma < 0.0 {
        return Err(ImgprocError::BadParameter("blur sigma must be >= 0"));
    }
    let mut rng = rng_from_seed(seed);
    let mut values: Vec<f64> = img
        .data
        .iter()
        .map(|&v| {
            let factor = lo + rng.random::<f64>() * (hi - lo);
            (v as f64 * factor).clamp(0.0, 255.0)
        })
        .collect();
    if blur_sigma > 0.0 {
        values = blur_f64(&values, img.width, img.height, blur_sigma);
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data: values.into_iter().map(to_byte).collect(),
    })
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Full augmentation stack. Transforms run in the fixed order
/// CLAHE -> Gabor -> gamma/tone -> degrade; disabled steps are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// CLAHE step; off by default (it did not help on angiograms).
    pub clahe: Option<ClaheParams>,
    /// Gabor step; off by default.
    pub gabor: Option<GaborParams>,
    /// Gamma drawn uniformly from this range per call.
    pub gamma_range: (f64, f64),
    /// Tone curve control points; identity by default.
    pub tone_curve: Vec<(f64, f64)>,
    /// Multiplicative noise factor range.
    pub noise_range: (f64, f64),
    /// Blur sigma in pixels (0 disables).
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            clahe: None,
            gabor: None,
            gamma_range: (1.0, 1.0),
            tone_curve: vec![(0.0, 0.0), (1.0, 1.0)],
            noise_range: (0.9, 1.1),
            blur_sigma: 0.8,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves images untouched.
    pub fn identity() -> Self {
        Self {
            noise_range: (1.0, 1.0),
            blur_sigma: 0.0,
            ..Self::default()
        }
    }
}

/// Apply the enabled transforms in the fixed order. Random parameters
/// (gamma draw, noise seed) come from `cfg.seed`, so identical inputs and
/// configs give byte-identical outputs.
pub fn compose_augment(img: &GrayImage, cfg: &AugmentConfig) -> Result<GrayImage> {
    let (glo, ghi) = cfg.gamma_range;
    if !(0.0 < glo && glo <= ghi) {
        return Err(ImgprocError::BadParameter("gamma range must satisfy 0 < lo <= hi"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let gamma = glo + rng.random::<f64>() * (ghi - glo);
    let degrade_seed = rng.random::<u64>();

    let mut current = img.clone();
    if let Some(params) = cfg.clahe {
        current = clahe(&current, params.clip_limit, params.tiles)?;
    }
    if let Some(params) = &cfg.gabor {
        current = gabor(&current, params)?;
    }
    current = point_transform(&current, gamma, &cfg.tone_curve)?;
    current = degrade(&current, cfg.noise_range, cfg.blur_sigma, degrade_seed)?;
    Ok(current)
}
