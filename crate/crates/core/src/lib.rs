//! Post-processing toolkit for tiled mitotic-figure detection.
//!
//! The pipeline covers tile planning over whole-slide coordinates, ensemble
//! fusion of several detectors' outputs (score threshold, offset mapping,
//! pooling, greedy NMS), one-to-one evaluation against point annotations,
//! label-aware augmentations and a persona-based detector simulator for
//! studying ensemble behaviour without trained models.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default); see [`exec::Exec`].

pub mod augmentation;
pub mod evaluation;
pub mod exec;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod simulation;
pub mod spatial;
pub mod tiling;

pub use evaluation::{
    evaluate, evaluate_slides, f1_score, match_greedy, metrics_from_counts, Counts, MatchCriterion,
    MatchResult, MetricsReport,
};
pub use exec::Exec;
pub use fusion::{
    fuse, merge_model_outputs, nms, nms_reference, threshold_detections, CandidateSet, FusionConfig,
    TieRule,
};
pub use geometry::{
    center_distance, clip_box, iou, Annotation, AnnotationSet, BBox, Detection, Frame, SlideInfo,
};
pub use tiling::{plan_tiles, to_global, to_local, Tile, TilePlan};
