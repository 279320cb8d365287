//! Compression cost accounting and detection accuracy metrics.

mod bops;
mod metrics;

pub use bops::{
    cost_report, layer_bops, model_params_bits, model_params_bytes, Compression, CostReport, LayerCost,
};
pub use metrics::{
    average_precision, evaluate, iou, match_detections, mean_ap, BBox, ClassCounts, Detection,
    EvalReport, GroundTruth, MatchResult,
};
