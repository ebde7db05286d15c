//! Five-stage training orchestration and the F1-driven curriculum.
//!
//! Stage 1 pretrains a fresh binary model on binarized masks; stage 2
//! re-heads it for multivessel output and fine-tunes (head-only warm
//! epochs, then discriminative rates); stage 3 repeats stage 2 with
//! class-frequency weighted sampling; stage 4 drives sampling with the
//! difficulty curriculum; stage 5 adds the view-classification loss.
//! Stages must run in order; every stage records per-epoch train loss
//! and validation mean F1 and is byte-reproducible under its seed.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::annio::ClassMask;
use crate::ensemble::decode_argmax;
use crate::imgproc::{degrade, GrayImage};
use crate::lossmetric::{image_f1, mean_f1, ComboLossConfig, PixelTargets};
use crate::nnet::{
    adapt_output_head, forward, init_model, train_step, LrSchedule, ModelState, NetConfig,
    TrainSample,
};
use crate::postprocess::connected_components;
use crate::seeds::{derive_seed, rng_from_seed};
use crate::splitsample::{
    class_frequency_scores, image_weights, weighted_sample, DatasetIndex, SplitAssignment,
    SplitRole, WeightMode,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} requires {needed}")]
    MissingPrerequisite { stage: u8, needed: String },
    #[error("invalid stage configuration: {0}")]
    BadStageConfig(String),
    #[error("stage 5 requires a view label table")]
    MissingViewLabels,
    #[error("image {0} has no view label")]
    UnlabeledImage(u32),
    #[error("view label table line {line}: {message}")]
    ViewTableParse { line: usize, message: String },
    #[error(transparent)]
    Nnet(#[from] crate::nnet::NnetError),
    #[error(transparent)]
    Loss(#[from] crate::lossmetric::LossError),
    #[error(transparent)]
    Split(#[from] crate::splitsample::SplitError),
    #[error(transparent)]
    Imgproc(#[from] crate::imgproc::ImgprocError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

// ---------------------------------------------------------------------------
// View label table
// ---------------------------------------------------------------------------

/// Acquisition-plane labels: per-image plane ids plus the class set each
/// plane admits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ViewLabelTable {
    pub image_planes: BTreeMap<u32, u8>,
    pub plane_classes: BTreeMap<u8, BTreeSet<u8>>,
}

impl ViewLabelTable {
    pub fn validate(&self) -> Result<()> {
        for (&plane, classes) in &self.plane_classes {
            if plane >= 11 {
                return Err(PipelineError::BadStageConfig(format!(
                    "plane id {plane} out of range (0..=10)"
                )));
            }
            if classes.is_empty() {
                return Err(PipelineError::BadStageConfig(format!(
                    "plane {plane} admits no classes"
                )));
            }
        }
        for (&image, &plane) in &self.image_planes {
            if !self.plane_classes.contains_key(&plane) {
                return Err(PipelineError::BadStageConfig(format!(
                    "image {image} labeled with undefined plane {plane}"
                )));
            }
        }
        Ok(())
    }

    /// Parse the text form: `plane<TAB>id<TAB>class,class,...` definition
    /// lines plus `image_id<TAB>plane_id` label lines, in any order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = ViewLabelTable::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |message: &str| PipelineError::ViewTableParse {
                line: line_no,
                message: message.to_string(),
            };
            if fields[0] == "plane" {
                if fields.len() != 3 {
                    return Err(bad("plane lines need 3 tab-separated fields"));
                }
                let plane: u8 = fields[1].parse().map_err(|_| bad("bad plane id"))?;
                let classes = fields[2]
                    .split(',')
                    .map(|c| c.trim().parse::<u8>().map_err(|_| bad("bad class id")))
                    .collect::<Result<BTreeSet<u8>>>()?;
                table.plane_classes.insert(plane, classes);
            } else {
                if fields.len() != 2 {
                    return Err(bad("label lines need 2 tab-separated fields"));
                }
                let image: u32 = fields[0].parse().map_err(|_| bad("bad image id"))?;
                let plane: u8 = fields[1].parse().map_err(|_| bad("bad plane id"))?;
                table.image_planes.insert(image, plane);
            }
        }
        table.validate()?;
        Ok(table)
    }

    /// Text form: plane definitions first, then image labels, ascending.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (plane, classes) in &self.plane_classes {
            let list: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("plane\t{}\t{}\n", plane, list.join(",")));
        }
        for (image, plane) in &self.image_planes {
            out.push_str(&format!("{}\t{}\n", image, plane));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Curriculum
// ---------------------------------------------------------------------------

/// Per-image difficulty state for the curriculum sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub initial: BTreeMap<u32, f64>,
    pub difficulty: BTreeMap<u32, f64>,
    /// Smoothing factor for difficulty updates.
    pub beta: f64,
}

impl CurriculumState {
    pub fn new(initial: BTreeMap<u32, f64>, beta: f64) -> Self {
        Self {
            difficulty: initial.clone(),
            initial,
            beta,
        }
    }
}

/// Starting difficulty of an image: the coefficient of variation of its
/// connected instance sizes, squashed to [0,1) by `cv / (1 + cv)`. Fewer
/// than two instances score 0.
pub fn initial_difficulty(mask: &ClassMask) -> f64 {
    let mut sizes: Vec<f64> = Vec::new();
    for class in mask.classes_present() {
        let layer = crate::annio::BinaryMask {
            width: mask.width,
            height: mask.height,
            data: mask
                .data
                .iter()
                .map(|&v| if v == class { 255 } else { 0 })
                .collect(),
        };
        for blob in connected_components(&layer, class).blobs {
            sizes.push(blob.pixels as f64);
        }
    }
    if sizes.len() < 2 {
        return 0.0;
    }
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<f64>() / n;
    let var = sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let cv = var.sqrt() / mean;
    cv / (1.0 + cv)
}

/// Blend a fresh per-image F1 into the running difficulty:
/// `d <- beta * d + (1 - beta) * (1 - f1)`. Images never evaluated keep
/// their initial difficulty.
pub fn update_difficulty(state: &mut CurriculumState, image_id: u32, f1: f64) {
    debug_assert!((0.0..=1.0).contains(&f1));
    if let Some(d) = state.difficulty.get_mut(&image_id) {
        *d = state.beta * *d + (1.0 - state.beta) * (1.0 - f1);
    }
}

/// Sampling weights for one epoch. The inclusion quantile ramps linearly
/// from 0.5 at epoch 0 to 1.0 at `warmup_epochs`; the `ceil(q*n)` easiest
/// images (ties broken by lower id) are included with weight `1 + d`,
/// everything else gets 0.
pub fn curriculum_probabilities(
    state: &CurriculumState,
    epoch: usize,
    warmup_epochs: usize,
) -> BTreeMap<u32, f64> {
    assert!(warmup_epochs >= 1);
    let n = state.difficulty.len();
    let progress = (epoch as f64 / warmup_epochs as f64).min(1.0);
    let q = 0.5 + 0.5 * progress;
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<(&u32, &f64)> = state.difficulty.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)));
    let mut weights = BTreeMap::new();
    for (rank, (&id, &d)) in order.into_iter().enumerate() {
        let w = if rank < k { 1.0 + d } else { 0.0 };
        weights.insert(id, w);
    }
    weights
}

// ---------------------------------------------------------------------------
// Stage orchestration
// ---------------------------------------------------------------------------

/// Mini-batch sampling strategy of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Uniform,
    ClassFrequencyWeighted,
    Curriculum,
}

/// One training stage's configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub net: NetConfig,
    pub epochs: usize,
    /// Head-only epochs at the start (stages >= 2).
    pub warm_epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub loss: ComboLossConfig,
    /// View-loss mixing weight (stage 5).
    pub lambda_view: f64,
    /// Stage 3 weighting mode.
    pub weight_mode: WeightMode,
    /// Stage 4 difficulty smoothing.
    pub curriculum_beta: f64,
    /// Stage 4 inclusion ramp length in epochs.
    pub curriculum_warmup: usize,
    /// Optional train-time degradation: (noise lo, noise hi, blur sigma).
    pub degrade: Option<(f64, f64, f64)>,
    pub seed: u64,
}

impl StageConfig {
    /// Toy-scale defaults: 20 pretraining epochs for stage 1, 10
    /// fine-tuning epochs for later stages.
    pub fn for_stage(stage: u8, net: NetConfig) -> Self {
        Self {
            stage,
            net,
            epochs: if stage == 1 { 20 } else { 10 },
            warm_epochs: if stage == 1 { 0 } else { 2 },
            base_lr: 1e-3,
            batch_size: 8,
            loss: ComboLossConfig::default(),
            lambda_view: if stage == 5 { 1.0 } else { 0.0 },
            weight_mode: WeightMode::Intent,
            curriculum_beta: 0.8,
            curriculum_warmup: 4,
            degrade: None,
            seed: 0,
        }
    }

    pub fn sampler(&self) -> SamplerKind {
        match self.stage {
            3 => SamplerKind::ClassFrequencyWeighted,
            4 => SamplerKind::Curriculum,
            _ => SamplerKind::Uniform,
        }
    }
}

/// Everything a stage consumes: images, ground-truth masks, the split,
/// the segment index, and (for stage 5) view labels.
#[derive(Debug, Clone)]
pub struct StageData {
    pub images: BTreeMap<u32, GrayImage>,
    pub masks: BTreeMap<u32, ClassMask>,
    pub split: SplitAssignment,
    pub index: DatasetIndex,
    pub views: Option<ViewLabelTable>,
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_f1: f64,
}

/// Append-only stage log.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub epochs: Vec<EpochStats>,
}

impl StageReport {
    /// `epoch<TAB>train_loss<TAB>val_mean_f1` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\n",
                e.epoch, e.train_loss, e.val_mean_f1
            ));
        }
        out
    }

    pub fn final_val_f1(&self) -> f64 {
        self.epochs.last().map(|e| e.val_mean_f1).unwrap_or(0.0)
    }
}

/// Score a model on (image, ground truth) pairs: per-image F1 of the
/// argmax decoding plus the mean. Scoring fans out over images with a
/// deterministic ordered reduction.
pub fn evaluate_model(
    model: &ModelState,
    items: &[(u32, &GrayImage, &ClassMask)],
) -> Result<(Vec<(u32, f64)>, f64)> {
    let scores: Vec<Result<(u32, f64)>> = items
        .par_iter()
        .map(|&(id, img, gt)| {
            let (probs, _) = forward(model, img)?;
            let pred = decode_argmax(&probs);
            Ok((id, image_f1(&pred, gt)?.image_f1))
        })
        .collect();
    let per_image: Vec<(u32, f64)> = scores.into_iter().collect::<Result<_>>()?;
    let mean = mean_f1(&per_image.iter().map(|&(_, f)| f).collect::<Vec<_>>())?;
    Ok((per_image, mean))
}

fn binarize_gt(mask: &ClassMask) -> ClassMask {
    ClassMask {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|&v| u8::from(v > 0)).collect(),
    }
}

/// Uniform per-epoch order: a seeded permutation of the train ids.
fn shuffled(ids: &[u32], seed: u64) -> Vec<u32> {
    let mut rng = rng_from_seed(seed);
    let mut order = ids.to_vec();
    for i in 0..order.len().saturating_sub(1) {
        let j = i + (rand::Rng::random::<u64>(&mut rng) % (order.len() - i) as u64) as usize;
        order.swap(i, j);
    }
    order
}

fn check_prerequisites(cfg: &StageConfig, model_in: &Option<ModelState>) -> Result<()> {
    let stage = cfg.stage;
    if !(1..=5).contains(&stage) {
        return Err(PipelineError::BadStageConfig(format!(
            "stage {stage} out of range 1..=5"
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(PipelineError::BadStageConfig(
            "epochs and batch_size must be positive".into(),
        ));
    }
    match (stage, model_in) {
        (1, None) => Ok(()),
        (1, Some(_)) => Err(PipelineError::BadStageConfig(
            "stage 1 starts from a fresh model; pass no checkpoint".into(),
        )),
        (_, None) => Err(PipelineError::MissingPrerequisite {
            stage,
            needed: format!("a stage-{} checkpoint", stage - 1),
        }),
        (_, Some(model)) => {
            if model.completed_stage != stage as u32 - 1 {
                return Err(PipelineError::MissingPrerequisite {
                    stage,
                    needed: format!(
                        "a stage-{} checkpoint (got a stage-{} one)",
                        stage - 1,
                        model.completed_stage
                    ),
                });
            }
            let want_out = if stage == 2 { 2 } else { 27 };
            if model.config.out_classes != want_out {
                return Err(PipelineError::MissingPrerequisite {
                    stage,
                    needed: format!(
                        "a model with {} output classes (got {})",
                        want_out, model.config.out_classes
                    ),
                });
            }
            Ok(())
        }
    }
}

/// Run one training stage. See the module docs for per-stage behavior.
/// Deterministic: identical (config, model, data) produce byte-identical
/// models and reports.
pub fn run_stage(
    cfg: &StageConfig,
    model_in: Option<ModelState>,
    data: &StageData,
) -> Result<(ModelState, StageReport)> {
    check_prerequisites(cfg, &model_in)?;
    cfg.loss.validate()?;

    let binary = cfg.stage == 1;
    let out_classes = if binary { 2 } else { 27 };
    let train_ids: Vec<u32> = data
        .split
        .ids_with_role(SplitRole::Train)
        .into_iter()
        .collect();
    let val_ids: Vec<u32> = data.split.ids_with_role(SplitRole::Val).into_iter().collect();
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(PipelineError::BadStageConfig(
            "split must contain both train and validation images".into(),
        ));
    }
    for id in train_ids.iter().chain(&val_ids) {
        if !data.images.contains_key(id) || !data.masks.contains_key(id) {
            return Err(PipelineError::BadStageConfig(format!(
                "split references image {id} missing from the dataset"
            )));
        }
    }

    let multi_target = cfg.stage == 5 && cfg.lambda_view != 0.0;
    let views = if cfg.stage == 5 {
        let table = data.views.as_ref().ok_or(PipelineError::MissingViewLabels)?;
        table.validate()?;
        for id in &train_ids {
            if !table.image_planes.contains_key(id) {
                return Err(PipelineError::UnlabeledImage(*id));
            }
        }
        Some(table)
    } else {
        None
    };

    let mut model = match cfg.stage {
        1 => {
            let net = NetConfig {
                out_classes: 2,
                ..cfg.net
            };
            init_model(&net)?
        }
        2 => adapt_output_head(
            &model_in.expect("checked"),
            27,
            derive_seed(cfg.seed, 0xAD),
        )?,
        _ => model_in.expect("checked"),
    };

    // Targets and validation ground truth, fixed for the whole stage.
    let mut targets: BTreeMap<u32, PixelTargets> = BTreeMap::new();
    for (&id, mask) in &data.masks {
        let t = if binary {
            PixelTargets::binary_from_class_mask(mask)
        } else {
            PixelTargets::from_class_mask(mask, out_classes)?
        };
        targets.insert(id, t);
    }
    let val_gt: BTreeMap<u32, ClassMask> = val_ids
        .iter()
        .map(|&id| {
            let gt = if binary {
                binarize_gt(&data.masks[&id])
            } else {
                data.masks[&id].clone()
            };
            (id, gt)
        })
        .collect();

    // Stage-3 weights are computed once from the train part of the index.
    let frequency_weights = if cfg.sampler() == SamplerKind::ClassFrequencyWeighted {
        let train_set: BTreeSet<u32> = train_ids.iter().copied().collect();
        let train_index = data.index.restricted_to(&train_set);
        let table = class_frequency_scores(&train_index)?;
        Some(image_weights(&train_index, &table, cfg.weight_mode)?)
    } else {
        None
    };

    // Stage-4 difficulty state starts from segment-size variability.
    let mut curriculum = if cfg.sampler() == SamplerKind::Curriculum {
        let initial: BTreeMap<u32, f64> = train_ids
            .iter()
            .map(|&id| (id, initial_difficulty(&data.masks[&id])))
            .collect();
        Some(CurriculumState::new(initial, cfg.curriculum_beta))
    } else {
        None
    };

    let groups = model.config.group_count();
    let mut report = StageReport {
        stage: cfg.stage,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, 0x1000 + epoch as u64);
        let order: Vec<u32> = match cfg.sampler() {
            SamplerKind::Uniform => shuffled(&train_ids, epoch_seed),
            SamplerKind::ClassFrequencyWeighted => weighted_sample(
                frequency_weights.as_ref().expect("stage 3"),
                train_ids.len(),
                epoch_seed,
            )?,
            SamplerKind::Curriculum => {
                let weights = curriculum_probabilities(
                    curriculum.as_ref().expect("stage 4"),
                    epoch,
                    cfg.curriculum_warmup,
                );
                let positive: BTreeMap<u32, f64> =
                    weights.into_iter().filter(|&(_, w)| w > 0.0).collect();
                weighted_sample(&positive, train_ids.len(), epoch_seed)?
            }
        };

        let schedule = if cfg.stage == 1 {
            LrSchedule::uniform(cfg.base_lr, groups)
        } else if epoch < cfg.warm_epochs {
            LrSchedule::head_only(cfg.base_lr, groups)
        } else {
            LrSchedule::discriminative(cfg.base_lr, groups)
        };

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Optional train-time degradation, seeded per epoch/batch/slot.
            let augmented: Option<Vec<GrayImage>> = match cfg.degrade {
                None => None,
                Some((lo, hi, sigma)) => {
                    let imgs = chunk
                        .iter()
                        .enumerate()
                        .map(|(slot, &id)| {
                            let salt = ((epoch as u64) << 40)
                                | ((batch_no as u64) << 20)
                                | slot as u64;
                            degrade(
                                &data.images[&id],
                                (lo, hi),
                                sigma,
                                derive_seed(derive_seed(cfg.seed, 0x2000), salt),
                            )
                        })
                        .collect::<crate::imgproc::Result<Vec<_>>>()?;
                    Some(imgs)
                }
            };
            let batch: Vec<TrainSample<'_>> = chunk
                .iter()
                .enumerate()
                .map(|(slot, &id)| TrainSample {
                    image: augmented
                        .as_ref()
                        .map(|a| &a[slot])
                        .unwrap_or(&data.images[&id]),
                    targets: &targets[&id],
                    view_label: if multi_target {
                        views.map(|t| t.image_planes[&id] as usize)
                    } else {
                        None
                    },
                })
                .collect();
            loss_sum += train_step(&mut model, &batch, &cfg.loss, &schedule, cfg.lambda_view)?;
            steps += 1;
        }
        let train_loss = loss_sum / steps as f64;

        let val_items: Vec<(u32, &GrayImage, &ClassMask)> = val_ids
            .iter()
            .map(|&id| (id, &data.images[&id], &val_gt[&id]))
            .collect();
        let (_, val_mean_f1) = evaluate_model(&model, &val_items)?;

        // Curriculum difficulties track the model's per-image F1 on the
        // training set after each epoch.
        if let Some(state) = curriculum.as_mut() {
            let train_items: Vec<(u32, &GrayImage, &ClassMask)> = train_ids
                .iter()
                .map(|&id| (id, &data.images[&id], &data.masks[&id]))
                .collect();
            let (per_image, _) = evaluate_model(&model, &train_items)?;
            for (id, f1) in per_image {
                update_difficulty(state, id, f1);
            }
        }

        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_mean_f1,
        });
    }

    model.completed_stage = cfg.stage as u32;
    Ok((model, report))
}
