//! Training-free attention weighting for full-reference image quality
//! metrics: statistical dependency between reference and distorted images is
//! estimated with a sliced maximal information coefficient and used to
//! re-weight local distortion maps.

pub mod backbone;
pub mod eval;
pub mod image;
pub mod maps;
pub mod mic;
pub mod scoring;
pub mod smic;

pub use backbone::{
    load_backbone, synthetic_backbone, Backbone, BackboneConfig, BackboneError, BackboneSource,
    FeatureStack, Preprocessing,
};
pub use eval::{
    fit_logistic_and_plcc, load_manifest, pearson, run_benchmark, srcc, BenchmarkManifest,
    BenchmarkReport, CorrelationReport, EvalError, LogisticFit, Polarity,
};
pub use image::{ImageError, ImagePlane};
pub use maps::{
    deep_distortion_map, extract_patch_grid, psnr_error_map, ssim_local_map, DistortionMap,
    MapError, MapKind,
};
pub use mic::{
    admissible_grid_shapes, approx_mic, exact_mic, mi_under_grid, GridPartition, MicError,
    MicOptions, MicResult, SamplePairs,
};
pub use scoring::{
    resize_bilinear, score_deep, score_pair, score_traditional, MetricKind, QualityScore,
    ScoreConfig, ScoreError, StageRange,
};
pub use smic::{
    attention_map_for_stage, project_patch, sample_projection_bank, smic_patch, AttentionMap,
    FeaturePatchPair, ProjectionBank, ProjectionMode, SmicError,
};
