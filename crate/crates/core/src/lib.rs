//! End-to-end multivessel coronary angiogram segmentation pipeline.
//!
//! The crate covers the full desk-scale workflow: COCO-style annotation
//! parsing and mask rasterization ([`annio`]), deterministic image
//! transforms ([`imgproc`]), difficulty-aware dataset splitting and
//! imbalance-aware sampling ([`splitsample`]), combo-loss training of a
//! small encoder-decoder network ([`lossmetric`], [`nnet`]), five-stage
//! training orchestration with curriculum scheduling ([`pipeline`]),
//! probability-map ensembling ([`ensemble`]), morphological mask repair
//! ([`postprocess`]), and a procedural angiogram generator ([`synthgen`])
//! so the whole chain runs without clinical data.
//!
//! Every operation is deterministic given its seed: reruns produce
//! byte-identical masks, checkpoints, and reports.

pub mod annio;
pub mod ensemble;
pub mod imgproc;
pub mod lossmetric;
pub mod nnet;
pub mod pipeline;
pub mod postprocess;
pub mod seeds;
pub mod splitsample;
pub mod synthgen;
