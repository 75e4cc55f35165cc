//! Evaluation: box overlap, caption scores, the IoU-gated dense captioning
//! score and center-distance detection metrics.

pub mod caption;
pub mod dense;
pub mod detection;
pub mod geometry;
mod report;

pub use caption::{bleu4, cider, rouge_l, Cider, ROUGE_BETA};
pub use dense::{m_at_iou, match_dense, CaptionMetric, DenseItem, DenseScores};
pub use detection::{
    detection_ap, frequency_bucketed_map, mean_tp_errors, nds, tp_errors, ApConfig, ApResult,
    DetBox, FrequencyBucket, TpErrors,
};
pub use geometry::{bev_iou, iou_3d, BoxPolygon, IouKind, Point};
pub use report::{CaptionScores, MetricsReport, REPORT_THRESHOLDS};
