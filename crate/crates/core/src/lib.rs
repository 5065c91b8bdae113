//! Grid-overlay localization evaluation.
//!
//! Composites calibration grids onto images, queries a vision-language
//! backend for bounding boxes, parses the replies, scores them against
//! ground truth with IoU/GIoU, and sweeps grid parameters to find the
//! configuration that localizes best.

pub mod client;
pub mod dataset;
pub mod grid;
pub mod metrics;
pub mod parse;
pub mod raster;
pub mod report;
pub mod sweep;

pub use client::{Backend, BackendKind, ClientError, QueryRequest, QueryResponse};
pub use dataset::{DatasetError, DatasetIndex, EvalSubset};
pub use grid::{composite, GridConfig, GridError};
pub use metrics::{aggregate, giou, iou, AggregateSummary, BBox, BoxError, FailurePolicy, MetricPair};
pub use parse::{parse_prediction, ParseFailure, ParsedBox, ParserOptions};
pub use raster::{ImageBuffer, RasterError};
pub use report::{improvement, render_annotated, render_report_csv, render_report_table, side_by_side, AnnotationStyle, ImprovementStat, ReportError};
pub use sweep::{enumerate_configs, read_record_log, rescore, run_sweep, ConfigId, EvalRecord, LineColor, ReportRow, SweepError, SweepReport, SweepSpec};
