//! Differentiable losses (focal, Tversky, combo, cross-entropy) with
//! analytic gradients, the per-image F1 metric, and a finite-difference
//! gradient checker.
//!
//! Losses run in double precision on [`ProbVolume`] buffers; the `f32`
//! [`ProbabilityMap`](crate::annio::ProbabilityMap) wire format is lifted
//! to `f64` at the boundary. True-class probabilities are floored at
//! [`PROB_FLOOR`] to keep logs finite; the stated gradients are exact for
//! the floored functions.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::annio::{ClassMask, ProbabilityMap};

/// Probability floor applied before logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("invalid loss configuration: {0}")]
    BadConfig(&'static str),
    #[error("cannot average an empty score list")]
    EmptyScores,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Double-precision class probability volume, class-major row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            data: vec![0.0; classes * height * width],
        }
    }

    pub fn from_data(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), classes * height * width);
        Self {
            classes,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn index(&self, class: usize, y: usize, x: usize) -> usize {
        (class * self.height + y) * self.width + x
    }

    /// Quantize to the `f32` interchange format.
    pub fn to_probability_map(&self) -> ProbabilityMap {
        ProbabilityMap {
            classes: self.classes,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl From<&ProbabilityMap> for ProbVolume {
    fn from(map: &ProbabilityMap) -> Self {
        Self {
            classes: map.classes,
            height: map.height,
            width: map.width,
            data: map.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Ground-truth targets: one label per pixel plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTargets {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
}

impl PixelTargets {
    /// Multiclass targets straight from a class mask; all pixels valid.
    pub fn from_class_mask(mask: &ClassMask, classes: usize) -> Result<Self> {
        if let Some(&bad) = mask.data.iter().find(|&&v| (v as usize) >= classes) {
            return Err(LossError::LabelRange {
                label: bad as usize,
                classes,
            });
        }
        Ok(Self {
            classes,
            height: mask.height,
            width: mask.width,
            labels: mask.data.clone(),
            valid: vec![true; mask.data.len()],
        })
    }

    /// Binary targets: label 1 wherever the mask has any foreground class.
    pub fn binary_from_class_mask(mask: &ClassMask) -> Self {
        Self {
            classes: 2,
            height: mask.height,
            width: mask.width,
            labels: mask.data.iter().map(|&v| u8::from(v > 0)).collect(),
            valid: vec![true; mask.data.len()],
        }
    }
}

fn check_shapes(probs: &ProbVolume, targets: &PixelTargets) -> Result<()> {
    if probs.classes != targets.classes
        || probs.height != targets.height
        || probs.width != targets.width
    {
        return Err(LossError::ShapeMismatch {
            context: format!(
                "probs {}x{}x{} vs targets {}x{}x{}",
                probs.classes,
                probs.height,
                probs.width,
                targets.classes,
                targets.height,
                targets.width
            ),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Focal loss
// ---------------------------------------------------------------------------

/// Multiclass focal loss: mean over valid pixels of `-(1-p_t)^g * ln(p_t)`
/// on the true-class probability. Returns the loss and its gradient with
/// respect to every probability entry (zero off the true class).
pub fn focal_loss(
    probs: &ProbVolume,
    targets: &PixelTargets,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(probs, targets)?;
    let mut grad = vec![0.0; probs.data.len()];
    let n_valid = targets.valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    for y in 0..probs.height {
        for x in 0..probs.width {
            let pix = y * probs.width + x;
            if !targets.valid[pix] {
                continue;
            }
            let idx = probs.index(targets.labels[pix] as usize, y, x);
            let raw = probs.data[idx];
            let p = raw.max(PROB_FLOOR);
            let om = 1.0 - p;
            loss += om.powf(gamma) * (-p.ln());
            grad[idx] = if raw < PROB_FLOOR {
                0.0
            } else if om <= 0.0 {
                // p == 1: the loss term is 0; only gamma == 0 leaves slope.
                if gamma == 0.0 {
                    -scale / p
                } else {
                    0.0
                }
            } else {
                scale * (gamma * om.powf(gamma - 1.0) * p.ln() - om.powf(gamma) / p)
            };
        }
    }
    Ok((loss * scale, grad))
}

// ---------------------------------------------------------------------------
// Tversky loss
// ---------------------------------------------------------------------------

/// Focal-Tversky loss over soft probabilities. For each foreground class
/// present in the targets,
/// `TI_c = (<p,g> + s) / (<p,g> + a<p,1-g> + b<1-p,g> + s)`,
/// and the loss is the mean of `(1 - TI_c)^g` over those classes.
pub fn tversky_loss(
    probs: &ProbVolume,
    targets: &PixelTargets,
    t_alpha: f64,
    t_beta: f64,
    gamma: f64,
    smooth: f64,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(probs, targets)?;
    let mut grad = vec![0.0; probs.data.len()];

    let mut present = [false; 256];
    for (pix, &v) in targets.labels.iter().enumerate() {
        if targets.valid[pix] && v > 0 {
            present[v as usize] = true;
        }
    }
    let classes: Vec<usize> = (1..targets.classes).filter(|&c| present[c]).collect();
    if classes.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / classes.len() as f64;

    let mut loss = 0.0;
    for &c in &classes {
        let mut inter = 0.0; // <p_c, g_c>
        let mut false_pos = 0.0; // <p_c, 1-g_c>
        let mut false_neg = 0.0; // <1-p_c, g_c>
        for y in 0..probs.height {
            for x in 0..probs.width {
                let pix = y * probs.width + x;
                if !targets.valid[pix] {
                    continue;
                }
                let p = probs.data[probs.index(c, y, x)];
                if targets.labels[pix] as usize == c {
                    inter += p;
                    false_neg += 1.0 - p;
                } else {
                    false_pos += p;
                }
            }
        }
        let numer = inter + smooth;
        let denom = inter + t_alpha * false_pos + t_beta * false_neg + smooth;
        let ti = numer / denom;
        let om = 1.0 - ti;
        loss += om.powf(gamma);

        // d(1-TI)^g/dp = -g (1-TI)^(g-1) dTI/dp, spread over class-c entries.
        let outer = if om <= 0.0 {
            if gamma == 1.0 {
                -1.0
            } else {
                0.0
            }
        } else {
            -gamma * om.powf(gamma - 1.0)
        };
        if outer != 0.0 {
            for y in 0..probs.height {
                for x in 0..probs.width {
                    let pix = y * probs.width + x;
                    if !targets.valid[pix] {
                        continue;
                    }
                    let g = f64::from(targets.labels[pix] as usize == c);
                    let dnum = g;
                    let dden = g + t_alpha * (1.0 - g) - t_beta * g;
                    let dti = (dnum * denom - numer * dden) / (denom * denom);
                    grad[probs.index(c, y, x)] += scale * outer * dti;
                }
            }
        }
    }
    Ok((loss * scale, grad))
}

// ---------------------------------------------------------------------------
// Combo loss
// ---------------------------------------------------------------------------

/// Combo loss parameters: `alpha` balances focal vs Tversky, `gamma`
/// focuses both components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComboLossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub smooth: f64,
}

impl Default for ComboLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
            tversky_alpha: 0.3,
            tversky_beta: 0.7,
            smooth: 1.0,
        }
    }
}

impl ComboLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::BadConfig("alpha must be in [0,1]"));
        }
        if self.gamma < 0.0 {
            return Err(LossError::BadConfig("gamma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.tversky_alpha) || !(0.0..=1.0).contains(&self.tversky_beta)
        {
            return Err(LossError::BadConfig("tversky weights must be in [0,1]"));
        }
        if self.smooth <= 0.0 {
            return Err(LossError::BadConfig("smooth must be > 0"));
        }
        Ok(())
    }
}

/// `L_C = alpha * L_F + (1 - alpha) * L_T`, values and gradients combined
/// affinely. The boundaries `alpha == 1` and `alpha == 0` return the
/// component results bit-for-bit.
pub fn combo_loss(
    probs: &ProbVolume,
    targets: &PixelTargets,
    cfg: &ComboLossConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if cfg.alpha == 1.0 {
        return focal_loss(probs, targets, cfg.gamma);
    }
    if cfg.alpha == 0.0 {
        return tversky_loss(
            probs,
            targets,
            cfg.tversky_alpha,
            cfg.tversky_beta,
            cfg.gamma,
            cfg.smooth,
        );
    }
    let (lf, gf) = focal_loss(probs, targets, cfg.gamma)?;
    let (lt, gt) = tversky_loss(
        probs,
        targets,
        cfg.tversky_alpha,
        cfg.tversky_beta,
        cfg.gamma,
        cfg.smooth,
    )?;
    let a = cfg.alpha;
    let loss = a * lf + (1.0 - a) * lt;
    let grad = gf
        .iter()
        .zip(&gt)
        .map(|(&f, &t)| a * f + (1.0 - a) * t)
        .collect();
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Cross-entropy on a class-probability vector
// ---------------------------------------------------------------------------

/// `-ln(p_label)` with the probability floored at [`PROB_FLOOR`]. The
/// caller is responsible for passing a (near-)normalized vector.
pub fn cross_entropy(class_probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= class_probs.len() {
        return Err(LossError::LabelRange {
            label,
            classes: class_probs.len(),
        });
    }
    let raw = class_probs[label];
    let p = raw.max(PROB_FLOOR);
    let mut grad = vec![0.0; class_probs.len()];
    if raw >= PROB_FLOOR {
        grad[label] = -1.0 / p;
    }
    Ok((-p.ln(), grad))
}

// ---------------------------------------------------------------------------
// Per-image F1
// ---------------------------------------------------------------------------

/// Pixel confusion counts and derived scores for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class confusion counts plus the image-level F1 aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub per_class: BTreeMap<u8, ClassCounts>,
    pub image_f1: f64,
}

/// Per-image F1 under the union-macro convention: `F1_c` is computed for
/// every foreground class present in either mask and averaged (ascending
/// class order); an image where neither mask has foreground scores 1.0.
pub fn image_f1(pred: &ClassMask, gt: &ClassMask) -> Result<ImageScore> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(LossError::ShapeMismatch {
            context: format!(
                "pred {}x{} vs gt {}x{}",
                pred.width, pred.height, gt.width, gt.height
            ),
        });
    }
    let mut tp = [0u64; 27];
    let mut fp = [0u64; 27];
    let mut fn_ = [0u64; 27];
    let mut present = [false; 27];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p > 0 {
            present[p as usize] = true;
        }
        if g > 0 {
            present[g as usize] = true;
        }
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[g as usize] += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 1..=26u8 {
        if !present[c as usize] {
            continue;
        }
        let (t, f_p, f_n) = (tp[c as usize], fp[c as usize], fn_[c as usize]);
        let precision = if t + f_p > 0 {
            t as f64 / (t + f_p) as f64
        } else {
            0.0
        };
        let recall = if t + f_n > 0 {
            t as f64 / (t + f_n) as f64
        } else {
            0.0
        };
        let denom = 2 * t + f_p + f_n;
        let f1 = if denom > 0 {
            2.0 * t as f64 / denom as f64
        } else {
            0.0
        };
        per_class.insert(
            c,
            ClassCounts {
                tp: t,
                fp: f_p,
                fn_: f_n,
                precision,
                recall,
                f1,
            },
        );
        sum += f1;
        count += 1;
    }
    let image_f1 = if count == 0 { 1.0 } else { sum / count as f64 };
    Ok(ImageScore {
        per_class,
        image_f1,
    })
}

/// Arithmetic mean of per-image F1 scores. Summation runs in sorted order
/// so the result is bit-identical under any permutation of the input.
pub fn mean_f1(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(LossError::EmptyScores);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of an analytic gradient. `f` returns
/// `(value, gradient)` at a point; the result is the maximum over
/// coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    let mut work = point.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..point.len() {
        work[i] = point[i] + eps;
        let (fp, _) = f(&work);
        work[i] = point[i] - eps;
        let (fm, _) = f(&work);
        work[i] = point[i];
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Random interior probability fixture with matching targets.
    fn random_fixture(
        classes: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> (ProbVolume, PixelTargets) {
        let mut rng = crate::seeds::rng_from_seed(seed);
        let mut probs = ProbVolume::new(classes, height, width);
        for y in 0..height {
            for x in 0..width {
                let raw: Vec<f64> = (0..classes)
                    .map(|_| 0.1 + rng.random::<f64>() * 0.9)
                    .collect();
                let total: f64 = raw.iter().sum();
                for c in 0..classes {
                    let idx = probs.index(c, y, x);
                    probs.data[idx] = raw[c] / total;
                }
            }
        }
        let labels: Vec<u8> = (0..height * width)
            .map(|_| (rng.random::<u64>() % classes as u64) as u8)
            .collect();
        let targets = PixelTargets {
            classes,
            height,
            width,
            labels,
            valid: vec![true; height * width],
        };
        (probs, targets)
    }

    fn one_hot(targets: &PixelTargets) -> ProbVolume {
        let mut probs = ProbVolume::new(targets.classes, targets.height, targets.width);
        for y in 0..targets.height {
            for x in 0..targets.width {
                let pix = y * targets.width + x;
                let idx = probs.index(targets.labels[pix] as usize, y, x);
                probs.data[idx] = 1.0;
            }
        }
        probs
    }

    #[test]
    fn focal_perfect_prediction_is_zero() {
        let (_, targets) = random_fixture(3, 4, 4, 1);
        let probs = one_hot(&targets);
        let (loss, _) = focal_loss(&probs, &targets, 2.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn focal_hand_value() {
        let probs = ProbVolume::from_data(2, 1, 1, vec![0.1, 0.9]);
        let targets = PixelTargets {
            classes: 2,
            height: 1,
            width: 1,
            labels: vec![1],
            valid: vec![true],
        };
        let (loss, _) = focal_loss(&probs, &targets, 2.0).unwrap();
        let expected = -(0.1f64.powi(2)) * 0.9f64.ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.0010536).abs() < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let (probs, targets) = random_fixture(3, 4, 4, 2);
        let (loss, _) = focal_loss(&probs, &targets, 0.0).unwrap();
        let mut ce = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let pix = y * 4 + x;
                ce -= probs.data[probs.index(targets.labels[pix] as usize, y, x)].ln();
            }
        }
        assert!((loss - ce / 16.0).abs() < 1e-12);
    }

    #[test]
    fn tversky_perfect_overlap_is_zero() {
        let (_, targets) = random_fixture(3, 4, 4, 3);
        let probs = one_hot(&targets);
        let (loss, _) = tversky_loss(&probs, &targets, 0.3, 0.7, 1.0, 1.0).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn tversky_all_background_hand_value() {
        // 100 gt pixels of class 1, prediction entirely background.
        let width = 10;
        let height = 10;
        let mut probs = ProbVolume::new(2, height, width);
        for y in 0..height {
            for x in 0..width {
                let idx = probs.index(0, y, x);
                probs.data[idx] = 1.0;
            }
        }
        let targets = PixelTargets {
            classes: 2,
            height,
            width,
            labels: vec![1; 100],
            valid: vec![true; 100],
        };
        let (loss, _) = tversky_loss(&probs, &targets, 0.3, 0.5, 1.0, 1.0).unwrap();
        assert!((loss - 50.0 / 51.0).abs() < 1e-12);
    }

    #[test]
    fn tversky_is_soft_dice_at_half_half() {
        let (probs, targets) = random_fixture(3, 4, 4, 4);
        let smooth = 1.0;
        let (loss, _) = tversky_loss(&probs, &targets, 0.5, 0.5, 1.0, smooth).unwrap();
        // Independent soft-Dice computation per class present.
        let mut dice_losses = Vec::new();
        for c in 1..3usize {
            let mut inter = 0.0;
            let mut p_sum = 0.0;
            let mut g_sum = 0.0;
            let mut any = false;
            for y in 0..4 {
                for x in 0..4 {
                    let pix = y * 4 + x;
                    let g = f64::from(targets.labels[pix] as usize == c);
                    let p = probs.data[probs.index(c, y, x)];
                    inter += p * g;
                    p_sum += p;
                    g_sum += g;
                    any |= targets.labels[pix] as usize == c;
                }
            }
            if any {
                let dice = (2.0 * inter + 2.0 * smooth) / (p_sum + g_sum + 2.0 * smooth);
                dice_losses.push(1.0 - dice);
            }
        }
        let expected = dice_losses.iter().sum::<f64>() / dice_losses.len() as f64;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn combo_boundaries_are_bitwise() {
        let (probs, targets) = random_fixture(3, 4, 4, 5);
        let cfg = ComboLossConfig {
            alpha: 1.0,
            ..ComboLossConfig::default()
        };
        let (lc, gc) = combo_loss(&probs, &targets, &cfg).unwrap();
        let (lf, gf) = focal_loss(&probs, &targets, cfg.gamma).unwrap();
        assert_eq!(lc.to_bits(), lf.to_bits());
        assert_eq!(gc, gf);

        let cfg = ComboLossConfig {
            alpha: 0.0,
            ..ComboLossConfig::default()
        };
        let (lc, gc) = combo_loss(&probs, &targets, &cfg).unwrap();
        let (lt, gt) = tversky_loss(
            &probs,
            &targets,
            cfg.tversky_alpha,
            cfg.tversky_beta,
            cfg.gamma,
            cfg.smooth,
        )
        .unwrap();
        assert_eq!(lc.to_bits(), lt.to_bits());
        assert_eq!(gc, gt);
    }

    #[test]
    fn combo_half_is_exact_average_of_components() {
        let (probs, targets) = random_fixture(2, 4, 4, 6);
        let cfg = ComboLossConfig::default();
        let (lc, _) = combo_loss(&probs, &targets, &cfg).unwrap();
        let (lf, _) = focal_loss(&probs, &targets, cfg.gamma).unwrap();
        let (lt, _) = tversky_loss(
            &probs,
            &targets,
            cfg.tversky_alpha,
            cfg.tversky_beta,
            cfg.gamma,
            cfg.smooth,
        )
        .unwrap();
        assert_eq!(lc.to_bits(), (0.5 * lf + 0.5 * lt).to_bits());
    }

    #[test]
    fn combo_is_affine_in_alpha() {
        let (probs, targets) = random_fixture(3, 4, 4, 7);
        let cfg = ComboLossConfig {
            alpha: 0.3,
            ..ComboLossConfig::default()
        };
        let (lc, _) = combo_loss(&probs, &targets, &cfg).unwrap();
        let (lf, _) = focal_loss(&probs, &targets, cfg.gamma).unwrap();
        let (lt, _) = tversky_loss(
            &probs,
            &targets,
            cfg.tversky_alpha,
            cfg.tversky_beta,
            cfg.gamma,
            cfg.smooth,
        )
        .unwrap();
        assert!((lc - (0.3 * lf + 0.7 * lt)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_contracts() {
        let (loss, grad) = cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad[1], -1.0);

        let uniform = vec![1.0 / 11.0; 11];
        let (loss, _) = cross_entropy(&uniform, 4).unwrap();
        assert!((loss - 11f64.ln()).abs() < 1e-12);
        assert!((loss - 2.39790).abs() < 1e-5);

        let (loss, grad) = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!((loss - 16.1181).abs() < 1e-4);
        assert_eq!(grad[1], 0.0, "floored probability has zero slope");

        assert!(matches!(
            cross_entropy(&[1.0], 3),
            Err(LossError::LabelRange {
                label: 3,
                classes: 1
            })
        ));
    }

    fn mask_of(values: &[u8], width: usize) -> ClassMask {
        ClassMask::from_data(width, values.len() / width, values.to_vec()).unwrap()
    }

    #[test]
    fn image_f1_identity_disjoint_and_half() {
        let gt = mask_of(&[0, 1, 1, 0], 2);
        assert_eq!(image_f1(&gt, &gt).unwrap().image_f1, 1.0);

        let pred = mask_of(&[1, 0, 0, 1], 2);
        assert_eq!(image_f1(&pred, &gt).unwrap().image_f1, 0.0);

        // 100 gt px of class 1; pred has 100 px with 50 overlapping.
        let mut gt = ClassMask::new(20, 20);
        let mut pred = ClassMask::new(20, 20);
        for i in 0..100 {
            gt.data[i] = 1;
            pred.data[50 + i] = 1;
        }
        let score = image_f1(&pred, &gt).unwrap();
        let counts = &score.per_class[&1];
        assert_eq!((counts.tp, counts.fp, counts.fn_), (50, 50, 50));
        assert!((counts.precision - 0.5).abs() < 1e-15);
        assert!((counts.recall - 0.5).abs() < 1e-15);
        assert_eq!(score.image_f1, 0.5);
    }

    #[test]
    fn image_f1_both_empty_is_one() {
        let empty = ClassMask::new(4, 4);
        assert_eq!(image_f1(&empty, &empty).unwrap().image_f1, 1.0);
    }

    #[test]
    fn image_f1_dimension_mismatch() {
        let a = ClassMask::new(4, 4);
        let b = ClassMask::new(5, 4);
        assert!(matches!(
            image_f1(&a, &b),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mean_f1_contracts() {
        assert_eq!(mean_f1(&[0.5]).unwrap(), 0.5);
        assert_eq!(mean_f1(&[1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(mean_f1(&[]), Err(LossError::EmptyScores)));

        let scores = [0.3, 0.9, 0.1, 0.7, 0.5];
        let shuffled = [0.7, 0.1, 0.5, 0.9, 0.3];
        assert_eq!(
            mean_f1(&scores).unwrap().to_bits(),
            mean_f1(&shuffled).unwrap().to_bits()
        );
    }

    #[test]
    fn finite_diff_exact_on_linear() {
        let coeffs = [1.5, -2.0, 0.25];
        let f = |p: &[f64]| {
            let value = p.iter().zip(&coeffs).map(|(x, c)| x * c).sum();
            (value, coeffs.to_vec())
        };
        let err = finite_diff_check(f, &[0.3, 0.4, 0.2], 1e-5);
        assert!(err < 1e-10, "linear check error {err}");
    }

    #[test]
    fn finite_diff_validates_combo_gradients() {
        for seed in 0..5 {
            let (probs, targets) = random_fixture(3, 4, 4, 100 + seed);
            let cfg = ComboLossConfig::default();
            let f = |p: &[f64]| {
                let vol = ProbVolume::from_data(3, 4, 4, p.to_vec());
                combo_loss(&vol, &targets, &cfg).unwrap()
            };
            let err = finite_diff_check(f, &probs.data, 1e-5);
            assert!(err < 1e-4, "seed {seed}: gradient error {err}");
        }
    }

    #[test]
    fn finite_diff_detects_corrupted_gradient() {
        // Small fixture so individual gradient entries are O(1).
        let (probs, targets) = random_fixture(2, 1, 2, 55);
        let cfg = ComboLossConfig::default();
        let f = |p: &[f64]| {
            let vol = ProbVolume::from_data(2, 1, 2, p.to_vec());
            let (loss, mut grad) = combo_loss(&vol, &targets, &cfg).unwrap();
            // Corrupt the largest component.
            let imax = (0..grad.len())
                .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                .unwrap();
            grad[imax] *= 2.0;
            (loss, grad)
        };
        let err = finite_diff_check(f, &probs.data, 1e-5);
        assert!(err > 0.1, "corruption not detected: {err}");
    }

    #[test]
    fn losses_are_nonnegative_on_random_fixtures() {
        for seed in 0..10 {
            let (probs, targets) = random_fixture(3, 4, 4, 200 + seed);
            let (lf, _) = focal_loss(&probs, &targets, 2.0).unwrap();
            let (lt, _) = tversky_loss(&probs, &targets, 0.3, 0.7, 2.0, 1.0).unwrap();
            let (lc, _) = combo_loss(&probs, &targets, &ComboLossConfig::default()).unwrap();
            assert!(lf >= 0.0 && lt >= 0.0 && lc >= 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (probs, _) = random_fixture(3, 4, 4, 8);
        let (_, targets) = random_fixture(3, 4, 5, 9);
        assert!(matches!(
            focal_loss(&probs, &targets, 2.0),
            Err(LossError::ShapeMismatch { .. })
        ));
    }
}
