//! Box-overlay rendering, comparison panels, and report serialization.

use thiserror::Error;

use crate::metrics::{AggregateSummary, BBox};
use crate::raster::ImageBuffer;
use crate::sweep::{format_alpha, ConfigId, ReportRow, SweepReport};

const PADDING_GRAY: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("ground-truth and prediction colors must differ")]
    IndistinctColors,
    #[error("stroke width must be at least 1")]
    ZeroStroke,
    #[error("baseline {metric} mean is {reason}; improvement undefined")]
    UndefinedBaseline {
        metric: &'static str,
        reason: &'static str,
    },
    #[error("treated {metric} mean is undefined; improvement undefined")]
    UndefinedTreated { metric: &'static str },
}

/// Colors and stroke for annotated renders. Ground truth and prediction
/// must be visually distinguishable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotationStyle {
    gt_color: [u8; 3],
    pred_color: [u8; 3],
    stroke_width: u32,
    badge_size: u32,
}

impl AnnotationStyle {
    pub fn new(
        gt_color: [u8; 3],
        pred_color: [u8; 3],
        stroke_width: u32,
        badge_size: u32,
    ) -> Result<Self, ReportError> {
        if gt_color == pred_color {
            return Err(ReportError::IndistinctColors);
        }
        if stroke_width == 0 {
            return Err(ReportError::ZeroStroke);
        }
        Ok(Self {
            gt_color,
            pred_color,
            stroke_width,
            badge_size,
        })
    }

    pub fn gt_color(&self) -> [u8; 3] {
        self.gt_color
    }

    pub fn pred_color(&self) -> [u8; 3] {
        self.pred_color
    }

    pub fn stroke_width(&self) -> u32 {
        self.stroke_width
    }
}

impl Default for AnnotationStyle {
    /// Green ground truth, red prediction.
    fn default() -> Self {
        Self {
            gt_color: [0, 200, 0],
            pred_color: [220, 0, 0],
            stroke_width: 2,
            badge_size: 8,
        }
    }
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

fn clamp_range(lo: i64, hi: i64, extent: u32) -> (u32, u32) {
    let lo = lo.clamp(0, extent as i64) as u32;
    let hi = hi.clamp(0, extent as i64) as u32;
    (lo, hi.max(lo))
}

/// Strokes the rectangle's four edges, `stroke` pixels thick inward from
/// each integer-rounded edge, clipped to the image. The box interior spans
/// the half-open ranges [x1, x2) × [y1, y2).
fn stroke_rect(image: &mut ImageBuffer, bbox: &BBox, color: [u8; 3], stroke: u32) {
    let x1 = round_half_up(bbox.x1());
    let y1 = round_half_up(bbox.y1());
    let x2 = round_half_up(bbox.x2());
    let y2 = round_half_up(bbox.y2());
    let (x1, x2) = clamp_range(x1, x2, image.width());
    let (y1, y2) = clamp_range(y1, y2, image.height());
    if x1 == x2 || y1 == y2 {
        return;
    }

    let top_end = (y1 + stroke).min(y2);
    let bottom_start = y2.saturating_sub(stroke).max(y1);
    let left_end = (x1 + stroke).min(x2);
    let right_start = x2.saturating_sub(stroke).max(x1);

    for y in y1..y2 {
        let on_band = y < top_end || y >= bottom_start;
        for x in x1..x2 {
            if on_band || x < left_end || x >= right_start {
                image.set_pixel(x, y, color);
            }
        }
    }
}

fn fill_rect(image: &mut ImageBuffer, x1: u32, y1: u32, x2: u32, y2: u32, color: [u8; 3]) {
    for y in y1..y2.min(image.height()) {
        for x in x1..x2.min(image.width()) {
            image.set_pixel(x, y, color);
        }
    }
}

/// Draws the ground-truth box, then the prediction over it (so a coincident
/// prediction wins). A missing prediction renders a filled failure badge in
/// the top-left corner instead.
pub fn render_annotated(
    image: &ImageBuffer,
    gt: &BBox,
    pred: Option<&BBox>,
    style: &AnnotationStyle,
) -> ImageBuffer {
    let mut out = image.clone();
    stroke_rect(&mut out, gt, style.gt_color, style.stroke_width);
    match pred {
        Some(pred) => stroke_rect(&mut out, pred, style.pred_color, style.stroke_width),
        None => fill_rect(&mut out, 0, 0, style.badge_size, style.badge_size, style.pred_color),
    }
    out
}

/// Joins two images horizontally with a gutter. Heights may differ; the
/// shorter image is bottom-padded, and all filler is neutral gray.
pub fn side_by_side(left: &ImageBuffer, right: &ImageBuffer, gutter: u32) -> ImageBuffer {
    let width = left.width() + gutter + right.width();
    let height = left.height().max(right.height());
    let mut out = ImageBuffer::filled(width, height, PADDING_GRAY).expect("nonzero dims");
    for (image, x_off) in [(left, 0), (right, left.width() + gutter)] {
        for y in 0..image.height() {
            for x in 0..image.width() {
                out.set_pixel(x + x_off, y, image.pixel(x, y));
            }
        }
    }
    out
}

/// Output name for one annotated render: `{image_id}_{config_slug}.png`.
pub fn annotated_filename(image_id: u64, config: &ConfigId) -> String {
    format!("{image_id}_{}.png", config.slug())
}

/// Output name for one comparison panel: `{image_id}_compare.png`.
pub fn compare_filename(image_id: u64) -> String {
    format!("{image_id}_compare.png")
}

/// Relative change of one metric between two runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementStat {
    pub baseline: f64,
    pub treated: f64,
    /// (treated − baseline) / baseline × 100.
    pub percent: f64,
}

fn improvement_of(
    metric: &'static str,
    baseline: Option<f64>,
    treated: Option<f64>,
) -> Result<ImprovementStat, ReportError> {
    let baseline = baseline.ok_or(ReportError::UndefinedBaseline {
        metric,
        reason: "undefined",
    })?;
    if baseline == 0.0 {
        return Err(ReportError::UndefinedBaseline {
            metric,
            reason: "zero",
        });
    }
    let treated = treated.ok_or(ReportError::UndefinedTreated { metric })?;
    Ok(ImprovementStat {
        baseline,
        treated,
        percent: (treated - baseline) / baseline * 100.0,
    })
}

/// Relative IoU and GIoU change from a baseline summary to a treated one.
pub fn improvement(
    baseline: &AggregateSummary,
    treated: &AggregateSummary,
) -> Result<(ImprovementStat, ImprovementStat), ReportError> {
    Ok((
        improvement_of("iou", baseline.mean_iou, treated.mean_iou)?,
        improvement_of("giou", baseline.mean_giou, treated.mean_giou)?,
    ))
}

fn csv_mean(mean: Option<f64>) -> String {
    mean.map(|m| format!("{m:.6}")).unwrap_or_default()
}

/// Machine-readable report: one row per configuration in report order. The
/// baseline row leaves the size/color/alpha fields empty; undefined means
/// render as empty fields, never as zero.
pub fn render_report_csv(report: &SweepReport) -> String {
    let mut out = String::from("size,color,alpha,mean_iou,mean_giou,n_scored,n_failed\n");
    for row in &report.rows {
        let (size, color, alpha) = match row.config {
            ConfigId::Baseline => (String::new(), String::new(), String::new()),
            ConfigId::Grid {
                cells,
                color,
                alpha,
            } => (cells.to_string(), color.to_string(), format_alpha(alpha)),
        };
        let s = &row.summary;
        out.push_str(&format!(
            "{size},{color},{alpha},{},{},{},{}\n",
            csv_mean(s.mean_iou),
            csv_mean(s.mean_giou),
            s.n_scored,
            s.n_failed
        ));
    }
    out
}

fn table_mean(mean: Option<f64>) -> String {
    mean.map(|m| format!("{m:.2}")).unwrap_or_else(|| "n/a".into())
}

/// Grid row with the highest mean IoU, for the improvement footer.
fn best_grid_row(report: &SweepReport) -> Option<&ReportRow> {
    report
        .rows
        .iter()
        .filter(|r| !r.config.is_baseline() && r.summary.mean_iou.is_some())
        .max_by(|a, b| {
            a.summary
                .mean_iou
                .unwrap()
                .total_cmp(&b.summary.mean_iou.unwrap())
        })
}

/// Human-readable aligned table with "size - color - transparency" row
/// labels, plus an improvement footer comparing the best grid row against
/// the baseline when both are defined.
pub fn render_report_table(report: &SweepReport) -> String {
    let labels: Vec<String> = report.rows.iter().map(|r| r.config.to_string()).collect();
    let label_width = labels
        .iter()
        .map(|l| l.chars().count())
        .max()
        .unwrap_or(0)
        .max("Configuration".len());

    let mut out = format!(
        "{:<label_width$}  {:>6}  {:>6}  {:>7}  {:>7}\n",
        "Configuration", "IoU", "GIoU", "Scored", "Failed"
    );
    for (row, label) in report.rows.iter().zip(&labels) {
        let s = &row.summary;
        out.push_str(&format!(
            "{:<label_width$}  {:>6}  {:>6}  {:>7}  {:>7}\n",
            label,
            table_mean(s.mean_iou),
            table_mean(s.mean_giou),
            s.n_scored,
            s.n_failed
        ));
    }

    let baseline = report.row(&ConfigId::Baseline);
    let footer = baseline.zip(best_grid_row(report)).and_then(|(base, best)| {
        improvement(&base.summary, &best.summary)
            .ok()
            .map(|stats| (best, stats))
    });
    if let Some((best, (iou_stat, giou_stat))) = footer {
        out.push_str(&format!("\nBest grid configuration: {}\n", best.config));
        out.push_str(&format!(
            "IoU improvement over baseline: {:+.1}% (from {:.2} to {:.2})\n",
            iou_stat.percent, iou_stat.baseline, iou_stat.treated
        ));
        out.push_str(&format!(
            "GIoU improvement over baseline: {:+.1}% (from {:.2} to {:.2})\n",
            giou_stat.percent, giou_stat.baseline, giou_stat.treated
        ));
    }
    out
}
