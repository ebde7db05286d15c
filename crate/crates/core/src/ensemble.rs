//! Soft-voting ensembles over per-model probability maps: convex
//! combination of member maps, performance-derived weights, exhaustive
//! subset search, and argmax decoding.
//!
//! Members carry explicit source ids and are always summed in ascending
//! source order, so uniform averaging is bit-identical under any argument
//! permutation.


use thiserror::Error;

use crate::annio::{ClassMask, ProbabilityMap};
use crate::lossmetric::{image_f1, mean_f1};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    Empty,
    #[error("member {source_id} has shape {got} but expected {expected}")]
    ShapeMismatch {
        source_id: usize,
        got: String,
        expected: String,
    },
    #[error("duplicate member source id {0}")]
    DuplicateSource(usize),
    #[error("weights length {weights} does not match member count {members}")]
    WeightCount { weights: usize, members: usize },
    #[error("weights must be non-negative and sum to 1 (sum was {sum})")]
    BadWeights { sum: f64 },
    #[error("member maps and ground truth counts differ: {maps} vs {gt}")]
    LengthMismatch { maps: usize, gt: usize },
    #[error(transparent)]
    Metric(#[from] crate::lossmetric::LossError),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

/// Ensemble membership: ordered source ids plus a normalized weight per
/// member (`None` = uniform).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub sources: Vec<usize>,
    pub weights: Option<Vec<f64>>,
}

fn shape_of(map: &ProbabilityMap) -> String {
    format!("{}x{}x{}", map.classes, map.height, map.width)
}

/// Pixelwise convex combination of member maps. `members` pairs each map
/// with its source id; `weights[i]` belongs to `members[i]`. With no
/// weights the mean is taken (sum in ascending source order, one final
/// division), so `B` identical maps average to themselves exactly.
pub fn ensemble_average(
    members: &[(usize, &ProbabilityMap)],
    weights: Option<&[f64]>,
) -> Result<ProbabilityMap> {
    if members.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if let Some(w) = weights {
        if w.len() != members.len() {
            return Err(EnsembleError::WeightCount {
                weights: w.len(),
                members: members.len(),
            });
        }
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(EnsembleError::BadWeights { sum });
        }
    }

    // Sum in ascending source-id order regardless of argument order.
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by_key(|&i| members[i].0);
    for pair in order.windows(2) {
        if members[pair[0]].0 == members[pair[1]].0 {
            return Err(EnsembleError::DuplicateSource(members[pair[0]].0));
        }
    }

    let first = members[order[0]].1;
    let expected = shape_of(first);
    let mut acc = vec![0.0f64; first.data.len()];
    for &i in &order {
        let (source, map) = members[i];
        if map.classes != first.classes || map.height != first.height || map.width != first.width
        {
            return Err(EnsembleError::ShapeMismatch {
                source_id: source,
                got: shape_of(map),
                expected,
            });
        }
        match weights {
            Some(w) => {
                let wi = w[i];
                for (a, &v) in acc.iter_mut().zip(&map.data) {
                    *a += wi * v as f64;
                }
            }
            None => {
                for (a, &v) in acc.iter_mut().zip(&map.data) {
                    *a += v as f64;
                }
            }
        }
    }
    if weights.is_none() {
        let b = members.len() as f64;
        for a in acc.iter_mut() {
            *a /= b;
        }
    }
    Ok(ProbabilityMap {
        classes: first.classes,
        height: first.height,
        width: first.width,
        data: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Weights proportional to each member's mean F1, normalized to sum 1.
/// An all-zero score vector falls back to uniform weights.
pub fn performance_weights(mean_f1_per_model: &[f64]) -> Vec<f64> {
    debug_assert!(mean_f1_per_model.iter().all(|&v| v >= 0.0));
    let total: f64 = mean_f1_per_model.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / mean_f1_per_model.len() as f64; mean_f1_per_model.len()];
    }
    mean_f1_per_model.iter().map(|&v| v / total).collect()
}

/// How subset members are weighted during the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchWeighting {
    Uniform,
    /// Weights proportional to each member's solo mean F1 on the same set.
    Performance,
}

/// Outcome of [`subset_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSearchResult {
    /// Member indices of the winning subset, ascending.
    pub best_subset: Vec<usize>,
    pub best_mean_f1: f64,
    /// Every evaluated subset as (bitmask, mean F1), ascending bitmask;
    /// bit `i` stands for member `i`.
    pub log: Vec<(u32, f64)>,
}

impl SubsetSearchResult {
    /// Search log as `bitmask<TAB>mean_f1` lines.
    pub fn log_to_text(&self) -> String {
        let mut out = String::new();
        for (mask, f1) in &self.log {
            out.push_str(&format!("{}\t{:.6}\n", mask, f1));
        }
        out
    }
}

/// Evaluate every non-empty subset of up to 8 members on a validation set
/// (per-image probability maps vs ground-truth masks) and return the
/// subset with the best ensembled mean F1. Ties prefer the smaller
/// subset, then the lexicographically least member index set.
pub fn subset_search(
    members: &[Vec<ProbabilityMap>],
    gt: &[ClassMask],
    weighting: SearchWeighting,
) -> Result<SubsetSearchResult> {
    if members.is_empty() {
        return Err(EnsembleError::Empty);
    }
    assert!(members.len() <= 8, "exhaustive search supports up to 8 members");
    for (i, maps) in members.iter().enumerate() {
        if maps.len() != gt.len() {
            return Err(EnsembleError::LengthMismatch {
                maps: maps.len(),
                gt: gt.len(),
            });
        }
        let _ = i;
    }

    let solo_f1: Vec<f64> = match weighting {
        SearchWeighting::Uniform => vec![0.0; members.len()],
        SearchWeighting::Performance => members
            .iter()
            .map(|maps| {
                let scores: Vec<f64> = maps
                    .iter()
                    .zip(gt)
                    .map(|(map, mask)| {
                        image_f1(&decode_argmax(map), mask).map(|s| s.image_f1)
                    })
                    .collect::<crate::lossmetric::Result<_>>()?;
                Ok(mean_f1(&scores)?)
            })
            .collect::<Result<_>>()?,
    };

    let mut log = Vec::with_capacity((1 << members.len()) - 1);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 1u32..(1 << members.len()) {
        let subset: Vec<usize> = (0..members.len()).filter(|i| mask & (1 << i) != 0).collect();
        let weights = match weighting {
            SearchWeighting::Uniform => None,
            SearchWeighting::Performance => {
                let scores: Vec<f64> = subset.iter().map(|&i| solo_f1[i]).collect();
                Some(performance_weights(&scores))
            }
        };
        let mut scores = Vec::with_capacity(gt.len());
        for (img_idx, mask_gt) in gt.iter().enumerate() {
            let pairs: Vec<(usize, &ProbabilityMap)> = subset
                .iter()
                .map(|&i| (i, &members[i][img_idx]))
                .collect();
            let averaged = ensemble_average(&pairs, weights.as_deref())?;
            scores.push(image_f1(&decode_argmax(&averaged), mask_gt)?.image_f1);
        }
        let score = mean_f1(&scores)?;
        log.push((mask, score));
        let better = match &best {
            None => true,
            Some((best_score, best_subset)) => {
                score > *best_score
                    || (score == *best_score
                        && (subset.len() < best_subset.len()
                            || (subset.len() == best_subset.len() && subset < *best_subset)))
            }
        };
        if better {
            best = Some((score, subset));
        }
    }
    let (best_mean_f1, best_subset) = best.expect("at least one subset");
    Ok(SubsetSearchResult {
        best_subset,
        best_mean_f1,
        log,
    })
}

/// Per-pixel argmax over all channels (background included); ties go to
/// the lowest class id.
pub fn decode_argmax(map: &ProbabilityMap) -> ClassMask {
    let mut mask = ClassMask::new(map.width, map.height);
    for y in 0..map.height {
        for x in 0..map.width {
            let mut best_class = 0u8;
            let mut best = f32::NEG_INFINITY;
            for c in 0..map.classes {
                let v = map.data[map.index(c, y, x)];
                if v > best {
                    best = v;
                    best_class = c as u8;
                }
            }
            mask.data[y * map.width + x] = best_class;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn map_of(classes: usize, h: usize, w: usize, data: Vec<f32>) -> ProbabilityMap {
        ProbabilityMap::from_data(classes, h, w, data).unwrap()
    }

    #[test]
    fn average_hand_example() {
        let a = map_of(2, 1, 1, vec![0.2, 0.8]);
        let b = map_of(2, 1, 1, vec![0.4, 0.6]);
        let out = ensemble_average(&[(0, &a), (1, &b)], None).unwrap();
        assert!((out.data[0] - 0.3).abs() < 1e-6);
        assert!((out.data[1] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn average_of_identical_maps_is_identity() {
        let mut rng = crate::seeds::rng_from_seed(3);
        let data: Vec<f32> = (0..3 * 4 * 4).map(|_| rng.random::<f64>() as f32).collect();
        let map = map_of(3, 4, 4, data);
        for b in [2usize, 3, 5] {
            let members: Vec<(usize, &ProbabilityMap)> =
                (0..b).map(|i| (i, &map)).collect();
            let out = ensemble_average(&members, None).unwrap();
            assert_eq!(out.data, map.data, "B = {b} must reproduce the input");
        }
    }

    #[test]
    fn degenerate_weights_select_one_member() {
        let a = map_of(2, 1, 2, vec![0.1, 0.9, 0.6, 0.4]);
        let b = map_of(2, 1, 2, vec![0.7, 0.3, 0.2, 0.8]);
        let out = ensemble_average(&[(0, &a), (1, &b)], Some(&[1.0, 0.0])).unwrap();
        assert_eq!(out.data, a.data);
    }

    #[test]
    fn average_is_permutation_invariant() {
        let mut rng = crate::seeds::rng_from_seed(4);
        let maps: Vec<ProbabilityMap> = (0..3)
            .map(|_| {
                map_of(
                    2,
                    3,
                    3,
                    (0..2 * 3 * 3).map(|_| rng.random::<f64>() as f32).collect(),
                )
            })
            .collect();
        let forward: Vec<(usize, &ProbabilityMap)> =
            maps.iter().enumerate().collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        let a = ensemble_average(&forward, None).unwrap();
        let b = ensemble_average(&reversed, None).unwrap();
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn average_validates_input() {
        assert!(matches!(ensemble_average(&[], None), Err(EnsembleError::Empty)));
        let a = map_of(2, 1, 1, vec![0.5, 0.5]);
        let b = map_of(3, 1, 1, vec![0.3, 0.3, 0.4]);
        assert!(matches!(
            ensemble_average(&[(0, &a), (1, &b)], None),
            Err(EnsembleError::ShapeMismatch { source_id: 1, .. })
        ));
        assert!(matches!(
            ensemble_average(&[(0, &a), (0, &a)], None),
            Err(EnsembleError::DuplicateSource(0))
        ));
        assert!(matches!(
            ensemble_average(&[(0, &a)], Some(&[0.5, 0.5])),
            Err(EnsembleError::WeightCount { .. })
        ));
        assert!(matches!(
            ensemble_average(&[(0, &a)], Some(&[0.7])),
            Err(EnsembleError::BadWeights { .. })
        ));
    }

    #[test]
    fn averaged_pixels_stay_normalized() {
        let mut rng = crate::seeds::rng_from_seed(8);
        let mut make = || {
            let mut data = vec![0.0f32; 3 * 2 * 2];
            for pix in 0..4 {
                let raw: Vec<f64> = (0..3).map(|_| 0.05 + rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                for c in 0..3 {
                    data[c * 4 + pix] = (raw[c] / total) as f32;
                }
            }
            map_of(3, 2, 2, data)
        };
        let (a, b, c) = (make(), make(), make());
        let out = ensemble_average(&[(0, &a), (1, &b), (2, &c)], Some(&[0.2, 0.3, 0.5])).unwrap();
        for pix in 0..4 {
            let sum: f32 = (0..3).map(|ch| out.data[ch * 4 + pix]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn performance_weight_examples() {
        assert_eq!(performance_weights(&[0.2, 0.2]), vec![0.5, 0.5]);
        let w = performance_weights(&[0.3, 0.1]);
        assert!((w[0] - 0.75).abs() < 1e-12);
        assert!((w[1] - 0.25).abs() < 1e-12);
        let uniform = performance_weights(&[0.0, 0.0, 0.0]);
        assert!(uniform.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn decode_argmax_contracts() {
        let one_hot = map_of(3, 1, 1, vec![0.0, 1.0, 0.0]);
        assert_eq!(decode_argmax(&one_hot).data, vec![1]);

        let tie = map_of(2, 1, 1, vec![0.5, 0.5]);
        assert_eq!(decode_argmax(&tie).data, vec![0], "ties take the lowest id");

        // Brute-force scan oracle on a random map.
        let mut rng = crate::seeds::rng_from_seed(5);
        let data: Vec<f32> = (0..27 * 8 * 8).map(|_| rng.random::<f64>() as f32).collect();
        let map = map_of(27, 8, 8, data);
        let decoded = decode_argmax(&map);
        for y in 0..8 {
            for x in 0..8 {
                let mut best = 0usize;
                for c in 0..27 {
                    if map.get(c, y, x) > map.get(best, y, x) {
                        best = c;
                    }
                }
                assert_eq!(decoded.get(x, y), best as u8);
            }
        }
    }

    /// Complementary-members fixture: A is right on the first half of the
    /// images, B on the second half, C is always weakly wrong.
    fn complementary_fixture() -> (Vec<Vec<ProbabilityMap>>, Vec<ClassMask>) {
        let n_images = 4;
        let gt: Vec<ClassMask> = (0..n_images)
            .map(|i| {
                let mut mask = ClassMask::new(2, 2);
                mask.data = if i % 2 == 0 {
                    vec![1, 1, 0, 0]
                } else {
                    vec![0, 2, 2, 0]
                };
                mask
            })
            .collect();
        let make_map = |mask: &ClassMask, correct: bool| {
            let mut data = vec![0.0f32; 3 * 4];
            for pix in 0..4 {
                let true_class = mask.data[pix] as usize;
                for c in 0..3 {
                    let is_true = c == true_class;
                    // Correct members are confident; wrong ones lean 0.55
                    // toward the next class.
                    data[c * 4 + pix] = if correct {
                        if is_true {
                            0.9
                        } else {
                            0.05
                        }
                    } else {
                        let wrong = (true_class + 1) % 3;
                        if c == wrong {
                            0.55
                        } else if is_true {
                            0.45
                        } else {
                            0.0
                        }
                    };
                }
            }
            ProbabilityMap::from_data(3, 2, 2, data).unwrap()
        };
        let member_a: Vec<ProbabilityMap> = gt
            .iter()
            .enumerate()
            .map(|(i, m)| make_map(m, i < 2))
            .collect();
        let member_b: Vec<ProbabilityMap> = gt
            .iter()
            .enumerate()
            .map(|(i, m)| make_map(m, i >= 2))
            .collect();
        let member_c: Vec<ProbabilityMap> = gt.iter().map(|m| make_map(m, false)).collect();
        (vec![member_a, member_b, member_c], gt)
    }

    #[test]
    fn subset_search_singleton() {
        let (members, gt) = complementary_fixture();
        let single = vec![members[0].clone()];
        let result = subset_search(&single, &gt, SearchWeighting::Uniform).unwrap();
        assert_eq!(result.best_subset, vec![0]);
        assert_eq!(result.log.len(), 1);
    }

    #[test]
    fn subset_search_finds_complementary_pair() {
        let (members, gt) = complementary_fixture();
        let result = subset_search(&members, &gt, SearchWeighting::Uniform).unwrap();
        assert_eq!(result.log.len(), 7, "3 members -> 7 subsets");
        assert_eq!(result.best_subset, vec![0, 1]);
        assert!((result.best_mean_f1 - 1.0).abs() < 1e-12);

        // The winner must beat every singleton.
        for (mask, f1) in &result.log {
            if mask.count_ones() == 1 {
                assert!(result.best_mean_f1 > *f1);
            }
        }
    }

    #[test]
    fn subset_search_log_is_complete_and_formatted() {
        let (members, gt) = complementary_fixture();
        let result = subset_search(&members, &gt, SearchWeighting::Performance).unwrap();
        let masks: Vec<u32> = result.log.iter().map(|&(m, _)| m).collect();
        assert_eq!(masks, (1..8).collect::<Vec<u32>>());
        let text = result.log_to_text();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().all(|l| l.split('\t').count() == 2));
    }

    #[test]
    fn subset_search_rejects_empty() {
        let gt: Vec<ClassMask> = vec![];
        assert!(matches!(
            subset_search(&[], &gt, SearchWeighting::Uniform),
            Err(EnsembleError::Empty)
        ));
    }
}
