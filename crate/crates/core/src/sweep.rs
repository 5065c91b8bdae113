//! Configuration-grid sweep: run composite → query → parse → score for
//! every (configuration × object) pair, stream a record log to disk, and
//! aggregate per-configuration summaries.
//!
//! Scoring is a pure function of the record log, so `rescore` rebuilds the
//! exact report from the log alone, with no dataset or backend access.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Backend, BackendKind, ClientError, PromptError, PromptTemplate, QueryRequest};
use crate::dataset::{coco_to_corners, resolve_image, DatasetError, DatasetIndex, EvalSubset};
use crate::grid::{composite, GridConfig, GridError, BLACK, WHITE};
use crate::metrics::{aggregate, metric_pair, AggregateSummary, BBox, FailurePolicy, MetricPair};
use crate::parse::{parse_prediction, ParseFailure, ParserOptions};
use crate::raster::ImageBuffer;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep spec has an empty {0} axis")]
    EmptyAxis(&'static str),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("failed writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record log {path} line {line}: {reason}")]
    RecordLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl SweepError {
    /// True when the failure is environmental (unreachable backend, broken
    /// cache, missing files) rather than a malformed request.
    pub fn is_infrastructure(&self) -> bool {
        match self {
            SweepError::Client(e) => e.is_fatal(),
            SweepError::Dataset(_) | SweepError::Io { .. } | SweepError::RecordLog { .. } => true,
            _ => false,
        }
    }
}

/// Grid line color axis. The ordering (black before white) fixes report
/// row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineColor {
    Black,
    White,
}

impl LineColor {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            LineColor::Black => BLACK,
            LineColor::White => WHITE,
        }
    }
}

impl std::fmt::Display for LineColor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LineColor::Black => "black",
            LineColor::White => "white",
        })
    }
}

impl std::str::FromStr for LineColor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "black" => Ok(LineColor::Black),
            "white" => Ok(LineColor::White),
            other => Err(format!("unknown line color '{other}' (expected black|white)")),
        }
    }
}

/// The full sweep axes plus scoring policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub sizes: Vec<u32>,
    pub colors: Vec<LineColor>,
    pub alphas: Vec<f64>,
    pub include_baseline: bool,
    pub line_width: u32,
    pub failure_policy: FailurePolicy,
}

impl Default for SweepSpec {
    /// The stock grid: 6 sizes × 2 colors × 5 transparency levels, plus the
    /// no-grid baseline.
    fn default() -> Self {
        Self {
            sizes: vec![3, 5, 7, 9, 20, 30],
            colors: vec![LineColor::Black, LineColor::White],
            alphas: vec![0.1, 0.3, 0.5, 0.7, 1.0],
            include_baseline: true,
            line_width: 1,
            failure_policy: FailurePolicy::Lenient,
        }
    }
}

/// One row of the configuration grid. Identity of a trial's treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConfigId {
    Baseline,
    Grid {
        cells: u32,
        color: LineColor,
        alpha: f64,
    },
}

pub(crate) fn format_alpha(alpha: f64) -> String {
    let s = alpha.to_string();
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

impl ConfigId {
    /// Sort key: baseline first, then size-major, color, alpha ascending.
    fn sort_key(&self) -> (u8, u32, LineColor, f64) {
        match *self {
            ConfigId::Baseline => (0, 0, LineColor::Black, 0.0),
            ConfigId::Grid {
                cells,
                color,
                alpha,
            } => (1, cells, color, alpha),
        }
    }

    /// Filesystem-safe name: "baseline", "9x9-black-0.3".
    pub fn slug(&self) -> String {
        match *self {
            ConfigId::Baseline => "baseline".to_owned(),
            ConfigId::Grid {
                cells,
                color,
                alpha,
            } => format!("{cells}x{cells}-{color}-{}", format_alpha(alpha)),
        }
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, ConfigId::Baseline)
    }

    pub fn grid_config(&self, line_width: u32) -> Result<Option<GridConfig>, GridError> {
        match *self {
            ConfigId::Baseline => Ok(None),
            ConfigId::Grid {
                cells,
                color,
                alpha,
            } => GridConfig::new(cells, color.rgb(), alpha, line_width).map(Some),
        }
    }
}

impl std::fmt::Display for ConfigId {
    /// Row label: "Original images+CoT" or "9×9 - black - 0.3".
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            ConfigId::Baseline => f.write_str("Original images+CoT"),
            ConfigId::Grid {
                cells,
                color,
                alpha,
            } => write!(f, "{cells}\u{d7}{cells} - {color} - {}", format_alpha(alpha)),
        }
    }
}

/// Canonical configuration list: validated, deduplicated, sorted baseline
/// first then size-major / color / alpha. Everything downstream (report
/// rows, record grouping) inherits this order.
pub fn enumerate_configs(spec: &SweepSpec) -> Result<Vec<ConfigId>, SweepError> {
    if spec.sizes.is_empty() {
        return Err(SweepError::EmptyAxis("sizes"));
    }
    if spec.colors.is_empty() {
        return Err(SweepError::EmptyAxis("colors"));
    }
    if spec.alphas.is_empty() {
        return Err(SweepError::EmptyAxis("alphas"));
    }

    let mut configs = Vec::new();
    if spec.include_baseline {
        configs.push(ConfigId::Baseline);
    }
    for &cells in &spec.sizes {
        for &color in &spec.colors {
            for &alpha in &spec.alphas {
                // constructing the grid config validates the combination
                GridConfig::new(cells, color.rgb(), alpha, spec.line_width)?;
                configs.push(ConfigId::Grid {
                    cells,
                    color,
                    alpha,
                });
            }
        }
    }
    configs.sort_by(|a, b| {
        let (ab, ac, acol, aal) = a.sort_key();
        let (bb, bc, bcol, bal) = b.sort_key();
        (ab, ac, acol)
            .cmp(&(bb, bc, bcol))
            .then(aal.total_cmp(&bal))
    });
    configs.dedup();
    Ok(configs)
}

/// How one trial ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TrialOutcome {
    Scored,
    ParseFailed { reason: ParseFailure },
    QueryFailed { error: String },
}

/// Everything observed about one (configuration, object) trial. Carries the
/// image dimensions so records can be re-parsed and re-scored standalone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config: ConfigId,
    pub image_id: u64,
    pub annotation_id: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub category: String,
    pub prompt: String,
    pub gt: BBox,
    pub response_text: Option<String>,
    pub outcome: TrialOutcome,
    pub predicted: Option<BBox>,
    pub iou: Option<f64>,
    pub giou: Option<f64>,
    pub latency_ms: Option<u64>,
    pub from_cache: Option<bool>,
}

impl EvalRecord {
    pub fn metric_pair(&self) -> Option<MetricPair> {
        match (self.iou, self.giou) {
            (Some(iou), Some(giou)) => Some(MetricPair { iou, giou }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub subset_seed: u64,
    pub subset_hash: String,
    pub backend_kind: BackendKind,
    pub backend_identity: String,
    pub failure_policy: FailurePolicy,
    pub parser: ParserOptions,
    pub n_entries: usize,
    pub n_configs: usize,
    pub parallelism: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: ConfigId,
    pub summary: AggregateSummary,
}

/// Ordered per-configuration summaries plus run provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub meta: RunMeta,
    pub rows: Vec<ReportRow>,
}

impl SweepReport {
    pub fn row(&self, config: &ConfigId) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.config == *config)
    }
}

/// First line of the record log; everything rescoring needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub subset_seed: u64,
    pub subset_hash: String,
    pub backend_kind: BackendKind,
    pub backend_identity: String,
    pub failure_policy: FailurePolicy,
    pub parser: ParserOptions,
    pub n_entries: usize,
    pub configs: Vec<ConfigId>,
    pub line_width: u32,
    pub started_unix_ms: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Record(EvalRecord),
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// The composited stimulus for a configuration; the baseline passes the
/// original image through untouched.
pub fn composited_for<'a>(
    config: &ConfigId,
    line_width: u32,
    image: &'a ImageBuffer,
) -> Result<Cow<'a, ImageBuffer>, GridError> {
    match config.grid_config(line_width)? {
        None => Ok(Cow::Borrowed(image)),
        Some(grid) => Ok(Cow::Owned(composite(image, &grid)?)),
    }
}

/// One trial's static inputs.
#[derive(Debug, Clone, Copy)]
pub struct TrialInput<'a> {
    pub config: &'a ConfigId,
    pub line_width: u32,
    pub image: &'a ImageBuffer,
    pub image_id: u64,
    pub annotation_id: u64,
    pub gt: BBox,
    pub category: &'a str,
}

/// Runs one (configuration, object) trial end to end. Model and parse
/// failures land in the record; only infrastructure problems surface as
/// errors.
pub fn run_trial<B: Backend + ?Sized>(
    input: &TrialInput,
    template: &PromptTemplate,
    parser: ParserOptions,
    backend: &B,
) -> Result<EvalRecord, SweepError> {
    let stimulus = composited_for(input.config, input.line_width, input.image)?;
    let prompt = template.render(input.category)?;
    let queried = backend.query(&QueryRequest {
        image: &stimulus,
        prompt: &prompt,
        gt_hint: Some(input.gt),
    });

    let mut record = EvalRecord {
        config: *input.config,
        image_id: input.image_id,
        annotation_id: input.annotation_id,
        image_width: input.image.width(),
        image_height: input.image.height(),
        category: input.category.to_owned(),
        prompt,
        gt: input.gt,
        response_text: None,
        outcome: TrialOutcome::Scored,
        predicted: None,
        iou: None,
        giou: None,
        latency_ms: None,
        from_cache: None,
    };

    let response = match queried {
        Ok(response) => response,
        Err(e) if e.is_fatal() => return Err(SweepError::Client(e)),
        Err(e) => {
            record.outcome = TrialOutcome::QueryFailed {
                error: e.to_string(),
            };
            return Ok(record);
        }
    };
    record.latency_ms = Some(response.latency_ms);
    record.from_cache = Some(response.from_cache);

    let dims = (input.image.width(), input.image.height());
    match parse_prediction(&response.text, dims, parser) {
        Ok(parsed) => {
            let pair = metric_pair(&parsed.bbox, &input.gt);
            record.outcome = TrialOutcome::Scored;
            record.predicted = Some(parsed.bbox);
            record.iou = Some(pair.iou);
            record.giou = Some(pair.giou);
        }
        Err(reason) => record.outcome = TrialOutcome::ParseFailed { reason },
    }
    record.response_text = Some(response.text);
    Ok(record)
}

/// Shared inputs for a sweep run.
pub struct SweepInputs<'a> {
    pub index: &'a DatasetIndex,
    pub subset: &'a EvalSubset,
    pub image_root: &'a Path,
    pub template: &'a PromptTemplate,
    pub parser: ParserOptions,
    /// Concurrent trials; clamped to at least 1.
    pub parallelism: usize,
}

struct Entry {
    image_id: u64,
    annotation_id: u64,
    gt: BBox,
    category: String,
}

/// Runs every configuration over every subset entry with bounded
/// parallelism, streaming records to `records_path` as they finish. On a
/// fatal error the partial log is flushed before the error propagates.
pub fn run_sweep<B: Backend + ?Sized>(
    spec: &SweepSpec,
    inputs: &SweepInputs,
    backend: &B,
    records_path: &Path,
) -> Result<SweepReport, SweepError> {
    let started_unix_ms = now_unix_ms();
    let configs = enumerate_configs(spec)?;
    inputs.subset.validate_against(inputs.index)?;

    let mut images: BTreeMap<u64, ImageBuffer> = BTreeMap::new();
    let mut entries: Vec<Entry> = Vec::with_capacity(inputs.subset.entries().len());
    for &(image_id, annotation_id) in inputs.subset.entries() {
        if !images.contains_key(&image_id) {
            images.insert(image_id, resolve_image(inputs.index, image_id, inputs.image_root)?);
        }
        let annotation = inputs.index.annotation(annotation_id).unwrap();
        let category = inputs
            .index
            .category_name(annotation.category_id)
            .unwrap()
            .to_owned();
        entries.push(Entry {
            image_id,
            annotation_id,
            gt: coco_to_corners(annotation.bbox)?,
            category,
        });
    }

    let io_err = |source| SweepError::Io {
        path: records_path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(records_path).map_err(io_err)?;
    let mut log = BufWriter::new(file);
    let header = LogHeader {
        subset_seed: inputs.subset.seed(),
        subset_hash: inputs.subset.source_hash().to_owned(),
        backend_kind: backend.kind(),
        backend_identity: backend.identity(),
        failure_policy: spec.failure_policy,
        parser: inputs.parser,
        n_entries: entries.len(),
        configs: configs.clone(),
        line_width: spec.line_width,
        started_unix_ms,
    };
    writeln!(
        log,
        "{}",
        serde_json::to_string(&LogLine::Header(header)).unwrap()
    )
    .map_err(io_err)?;
    log.flush().map_err(io_err)?;

    let total = configs.len() * entries.len();
    let parallelism = inputs.parallelism.max(1).min(total.max(1));
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let first_error: Mutex<Option<SweepError>> = Mutex::new(None);
    let (tx, rx) = mpsc::channel::<EvalRecord>();

    // per config: (image_id, annotation_id) → metrics, so aggregation
    // iterates in a fixed order regardless of completion order
    let mut acc: Vec<BTreeMap<(u64, u64), Option<MetricPair>>> =
        vec![BTreeMap::new(); configs.len()];

    std::thread::scope(|scope| {
        for _ in 0..parallelism {
            let tx = tx.clone();
            let (next, stop, first_error) = (&next, &stop, &first_error);
            let (configs, entries, images, inputs) = (&configs, &entries, &images, &inputs);
            scope.spawn(move || {
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= total || stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let config = &configs[i / entries.len()];
                    let entry = &entries[i % entries.len()];
                    let trial = TrialInput {
                        config,
                        line_width: spec.line_width,
                        image: &images[&entry.image_id],
                        image_id: entry.image_id,
                        annotation_id: entry.annotation_id,
                        gt: entry.gt,
                        category: &entry.category,
                    };
                    match run_trial(&trial, inputs.template, inputs.parser, backend) {
                        Ok(record) => {
                            if tx.send(record).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            let mut slot = first_error.lock().unwrap();
                            if slot.is_none() {
                                *slot = Some(e);
                            }
                            stop.store(true, Ordering::Relaxed);
                            break;
                        }
                    }
                }
            });
        }
        drop(tx);

        for record in rx {
            let config_idx = configs
                .iter()
                .position(|c| *c == record.config)
                .expect("record config came from the enumerated list");
            acc[config_idx].insert(
                (record.image_id, record.annotation_id),
                record.metric_pair(),
            );
            if let Err(e) = writeln!(log, "{}", serde_json::to_string(&LogLine::Record(record)).unwrap())
            {
                let mut slot = first_error.lock().unwrap();
                if slot.is_none() {
                    *slot = Some(io_err(e));
                }
                stop.store(true, Ordering::Relaxed);
            }
        }
    });

    log.flush().map_err(io_err)?;
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }

    let rows = configs
        .iter()
        .zip(&acc)
        .map(|(config, per_entry)| {
            let trials: Vec<Option<MetricPair>> = per_entry.values().copied().collect();
            ReportRow {
                config: *config,
                summary: aggregate(&trials, spec.failure_policy),
            }
        })
        .collect();

    Ok(SweepReport {
        meta: RunMeta {
            subset_seed: inputs.subset.seed(),
            subset_hash: inputs.subset.source_hash().to_owned(),
            backend_kind: backend.kind(),
            backend_identity: backend.identity(),
            failure_policy: spec.failure_policy,
            parser: inputs.parser,
            n_entries: entries.len(),
            n_configs: configs.len(),
            parallelism,
            started_unix_ms,
            finished_unix_ms: now_unix_ms(),
        },
        rows,
    })
}

/// Reads a record log back: header plus records in file order.
pub fn read_record_log(path: &Path) -> Result<(LogHeader, Vec<EvalRecord>), SweepError> {
    let file = std::fs::File::open(path).map_err(|source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, reason: String| SweepError::RecordLog {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut header = None;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| SweepError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine =
            serde_json::from_str(&line).map_err(|e| bad(idx + 1, e.to_string()))?;
        match parsed {
            LogLine::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
            LogLine::Header(_) => return Err(bad(idx + 1, "unexpected second header".into())),
            LogLine::Record(_) if header.is_none() => {
                return Err(bad(idx + 1, "record before header".into()));
            }
            LogLine::Record(r) => records.push(r),
        }
    }
    let header = header.ok_or_else(|| bad(0, "missing header".into()))?;
    Ok((header, records))
}

/// Rebuilds the report from a record log alone: every stored response is
/// re-parsed and re-scored, so the result reflects the raw data even if
/// the logged metrics were tampered with or the policy changed.
pub fn rescore(
    records_path: &Path,
    policy_override: Option<FailurePolicy>,
) -> Result<SweepReport, SweepError> {
    let started_unix_ms = now_unix_ms();
    let (header, records) = read_record_log(records_path)?;
    let policy = policy_override.unwrap_or(header.failure_policy);

    let slot_of: BTreeMap<String, usize> = header
        .configs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.slug(), i))
        .collect();
    let mut acc: Vec<BTreeMap<(u64, u64), Option<MetricPair>>> =
        vec![BTreeMap::new(); header.configs.len()];

    for record in &records {
        let config_idx = *slot_of.get(&record.config.slug()).ok_or_else(|| {
            SweepError::RecordLog {
                path: records_path.to_path_buf(),
                line: 0,
                reason: format!("record for config '{}' missing from header", record.config),
            }
        })?;
        let rescored = record.response_text.as_deref().and_then(|text| {
            let dims = (record.image_width, record.image_height);
            parse_prediction(text, dims, header.parser)
                .ok()
                .map(|p| metric_pair(&p.bbox, &record.gt))
        });
        if let (Some(fresh), Some(logged)) = (rescored, record.metric_pair()) {
            if (fresh.iou - logged.iou).abs() > 1e-9 || (fresh.giou - logged.giou).abs() > 1e-9 {
                log::warn!(
                    "record ({}, {}, {}) logged metrics drift from recomputation",
                    record.config,
                    record.image_id,
                    record.annotation_id
                );
            }
        }
        acc[config_idx].insert((record.image_id, record.annotation_id), rescored);
    }

    let rows = header
        .configs
        .iter()
        .zip(&acc)
        .map(|(config, per_entry)| {
            let trials: Vec<Option<MetricPair>> = per_entry.values().copied().collect();
            ReportRow {
                config: *config,
                summary: aggregate(&trials, policy),
            }
        })
        .collect();

    Ok(SweepReport {
        meta: RunMeta {
            subset_seed: header.subset_seed,
            subset_hash: header.subset_hash,
            backend_kind: header.backend_kind,
            backend_identity: header.backend_identity,
            failure_policy: policy,
            parser: header.parser,
            n_entries: header.n_entries,
            n_configs: header.configs.len(),
            parallelism: 1,
            started_unix_ms,
            finished_unix_ms: now_unix_ms(),
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{EchoBackend, PerturbBackend, QueryResponse};
    use crate::dataset::{load_annotations, sample_subset};
    use serde_json::json;
    use std::path::PathBuf;

    #[test]
    fn default_spec_enumerates_61_configs() {
        let configs = enumerate_configs(&SweepSpec::default()).unwrap();
        assert_eq!(configs.len(), 61);
        assert_eq!(configs[0], ConfigId::Baseline);
        assert_eq!(
            configs[1],
            ConfigId::Grid { cells: 3, color: LineColor::Black, alpha: 0.1 }
        );
        assert_eq!(
            configs[2],
            ConfigId::Grid { cells: 3, color: LineColor::Black, alpha: 0.3 }
        );
        assert_eq!(
            configs[6],
            ConfigId::Grid { cells: 3, color: LineColor::White, alpha: 0.1 }
        );
        assert_eq!(
            configs[11],
            ConfigId::Grid { cells: 5, color: LineColor::Black, alpha: 0.1 }
        );
        assert_eq!(
            configs[60],
            ConfigId::Grid { cells: 30, color: LineColor::White, alpha: 1.0 }
        );
    }

    #[test]
    fn singleton_spec_enumerates_one() {
        let spec = SweepSpec {
            sizes: vec![9],
            colors: vec![LineColor::Black],
            alphas: vec![0.3],
            include_baseline: false,
            ..SweepSpec::default()
        };
        assert_eq!(
            enumerate_configs(&spec).unwrap(),
            vec![ConfigId::Grid { cells: 9, color: LineColor::Black, alpha: 0.3 }]
        );
    }

    #[test]
    fn empty_axes_rejected() {
        let spec = SweepSpec { alphas: vec![], ..SweepSpec::default() };
        assert!(matches!(
            enumerate_configs(&spec),
            Err(SweepError::EmptyAxis("alphas"))
        ));
        let spec = SweepSpec { sizes: vec![], ..SweepSpec::default() };
        assert!(matches!(
            enumerate_configs(&spec),
            Err(SweepError::EmptyAxis("sizes"))
        ));
    }

    #[test]
    fn invalid_combinations_rejected() {
        let spec = SweepSpec { sizes: vec![1], ..SweepSpec::default() };
        assert!(matches!(enumerate_configs(&spec), Err(SweepError::Grid(_))));
        let spec = SweepSpec { alphas: vec![1.5], ..SweepSpec::default() };
        assert!(matches!(enumerate_configs(&spec), Err(SweepError::Grid(_))));
    }

    #[test]
    fn enumeration_canonicalizes_order_and_duplicates() {
        let spec = SweepSpec {
            sizes: vec![9, 3, 9],
            colors: vec![LineColor::White, LineColor::Black],
            alphas: vec![0.5, 0.1, 0.5],
            include_baseline: true,
            ..SweepSpec::default()
        };
        let configs = enumerate_configs(&spec).unwrap();
        assert_eq!(configs.len(), 1 + 2 * 2 * 2);
        let labels: Vec<String> = configs.iter().map(|c| c.to_string()).collect();
        assert_eq!(
            labels,
            vec![
                "Original images+CoT",
                "3\u{d7}3 - black - 0.1",
                "3\u{d7}3 - black - 0.5",
                "3\u{d7}3 - white - 0.1",
                "3\u{d7}3 - white - 0.5",
                "9\u{d7}9 - black - 0.1",
                "9\u{d7}9 - black - 0.5",
                "9\u{d7}9 - white - 0.1",
                "9\u{d7}9 - white - 0.5",
            ]
        );
    }

    #[test]
    fn labels_and_slugs() {
        let best = ConfigId::Grid { cells: 9, color: LineColor::Black, alpha: 0.3 };
        assert_eq!(best.to_string(), "9\u{d7}9 - black - 0.3");
        assert_eq!(best.slug(), "9x9-black-0.3");

        let opaque = ConfigId::Grid { cells: 30, color: LineColor::White, alpha: 1.0 };
        assert_eq!(opaque.to_string(), "30\u{d7}30 - white - 1.0");
        assert_eq!(opaque.slug(), "30x30-white-1.0");

        assert_eq!(ConfigId::Baseline.to_string(), "Original images+CoT");
        assert_eq!(ConfigId::Baseline.slug(), "baseline");
    }

    #[test]
    fn baseline_stimulus_is_the_original_image() {
        let mut image = ImageBuffer::filled(20, 12, [9, 9, 9]).unwrap();
        image.set_pixel(3, 4, [200, 100, 50]);
        let out = composited_for(&ConfigId::Baseline, 1, &image).unwrap();
        assert_eq!(out.as_ref(), &image);
        assert!(matches!(out, Cow::Borrowed(_)));

        let grid = ConfigId::Grid { cells: 3, color: LineColor::Black, alpha: 1.0 };
        let treated = composited_for(&grid, 1, &image).unwrap();
        assert_ne!(treated.as_ref(), &image);
    }

    /// Tiny on-disk dataset: `images` images, two annotations each.
    fn disk_fixture(dir: &Path, images: usize) -> (DatasetIndex, EvalSubset) {
        let mut image_objs = Vec::new();
        let mut ann_objs = Vec::new();
        for i in 1..=images as u64 {
            let (w, h) = (96 + (i as u32 % 3) * 16, 80 + (i as u32 % 2) * 16);
            image_objs.push(json!({
                "id": i, "file_name": format!("img{i}.png"), "width": w, "height": h
            }));
            ImageBuffer::filled(w, h, [(i * 17 % 256) as u8, 64, 128])
                .unwrap()
                .save_png(&dir.join(format!("img{i}.png")))
                .unwrap();
            ann_objs.push(json!({
                "id": i * 10, "image_id": i, "category_id": 1,
                "bbox": [8.0, 8.0, 40.0, 30.0], "area": 1200.0
            }));
            ann_objs.push(json!({
                "id": i * 10 + 1, "image_id": i, "category_id": 2,
                "bbox": [30.0, 20.0, 50.0, 40.0], "area": 2000.0
            }));
        }
        let coco = json!({
            "images": image_objs,
            "annotations": ann_objs,
            "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "dog"}]
        });
        let path = dir.join("instances.json");
        std::fs::write(&path, serde_json::to_vec(&coco).unwrap()).unwrap();
        let index = load_annotations(&path).unwrap();
        let subset = sample_subset(&index, images, 7).unwrap();
        (index, subset)
    }

    fn small_spec() -> SweepSpec {
        SweepSpec {
            sizes: vec![3, 9],
            colors: vec![LineColor::Black, LineColor::White],
            alphas: vec![0.3, 1.0],
            include_baseline: true,
            line_width: 1,
            failure_policy: FailurePolicy::Lenient,
        }
    }

    #[test]
    fn echo_sweep_scores_everything_at_one() {
        let dir = tempfile::tempdir().unwrap();
        let (index, subset) = disk_fixture(dir.path(), 3);
        let inputs = SweepInputs {
            index: &index,
            subset: &subset,
            image_root: dir.path(),
            template: &PromptTemplate::standard(),
            parser: ParserOptions::default(),
            parallelism: 4,
        };
        let records_path = dir.path().join("records.jsonl");
        let report = run_sweep(&small_spec(), &inputs, &EchoBackend, &records_path).unwrap();

        assert_eq!(report.rows.len(), 9);
        for row in &report.rows {
            assert_eq!(row.summary.n_scored, 6);
            assert_eq!(row.summary.n_failed, 0);
            assert!((row.summary.mean_iou.unwrap() - 1.0).abs() < 1e-12);
            assert!((row.summary.mean_giou.unwrap() - 1.0).abs() < 1e-12);
        }

        let (header, records) = read_record_log(&records_path).unwrap();
        assert_eq!(header.configs.len(), 9);
        assert_eq!(header.n_entries, 6);
        assert_eq!(records.len(), 9 * 6);
        assert!(records.iter().all(|r| r.outcome == TrialOutcome::Scored));
    }

    #[test]
    fn rescore_reproduces_report_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (index, subset) = disk_fixture(dir.path(), 3);
        let backend = PerturbBackend {
            offset: crate::client::Offset::Pixels([4.0, -3.0, 6.0, 2.0]),
            jitter: 5.0,
            failure_probability: 0.25,
            seed: 11,
        };
        let inputs = SweepInputs {
            index: &index,
            subset: &subset,
            image_root: dir.path(),
            template: &PromptTemplate::standard(),
            parser: ParserOptions::default(),
            parallelism: 3,
        };
        let records_path = dir.path().join("records.jsonl");
        let report = run_sweep(&small_spec(), &inputs, &backend, &records_path).unwrap();

        let rescored = rescore(&records_path, None).unwrap();
        assert_eq!(rescored.rows, report.rows);

        let strict = rescore(&records_path, Some(FailurePolicy::Strict)).unwrap();
        let any_failures = report.rows.iter().any(|r| r.summary.n_failed > 0);
        assert!(any_failures, "perturb with pfail=0.25 should fail some trials");
        assert_ne!(strict.rows, report.rows);
    }

    #[test]
    fn parallelism_does_not_move_results() {
        let dir = tempfile::tempdir().unwrap();
        let (index, subset) = disk_fixture(dir.path(), 4);
        let backend = PerturbBackend {
            offset: crate::client::Offset::Fraction([0.05, 0.05, -0.02, 0.1]),
            jitter: 3.0,
            failure_probability: 0.2,
            seed: 5,
        };
        let run = |parallelism: usize, records: &PathBuf| {
            let inputs = SweepInputs {
                index: &index,
                subset: &subset,
                image_root: dir.path(),
                template: &PromptTemplate::standard(),
                parser: ParserOptions::default(),
                parallelism,
            };
            run_sweep(&small_spec(), &inputs, &backend, records).unwrap()
        };
        let serial = run(1, &dir.path().join("r1.jsonl"));
        let parallel = run(8, &dir.path().join("r8.jsonl"));
        assert_eq!(serial.rows, parallel.rows);
    }

    struct JunkBackend;
    impl Backend for JunkBackend {
        fn identity(&self) -> String {
            "junk".into()
        }
        fn kind(&self) -> BackendKind {
            BackendKind::MockEcho
        }
        fn query(&self, _request: &QueryRequest) -> Result<QueryResponse, ClientError> {
            Ok(QueryResponse {
                text: "no idea".into(),
                latency_ms: 1,
                from_cache: false,
            })
        }
    }

    #[test]
    fn unparseable_responses_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let (index, subset) = disk_fixture(dir.path(), 2);
        let inputs = SweepInputs {
            index: &index,
            subset: &subset,
            image_root: dir.path(),
            template: &PromptTemplate::standard(),
            parser: ParserOptions::default(),
            parallelism: 2,
        };
        let spec = SweepSpec {
            failure_policy: FailurePolicy::Strict,
            ..small_spec()
        };
        let records_path = dir.path().join("records.jsonl");
        let report = run_sweep(&spec, &inputs, &JunkBackend, &records_path).unwrap();
        for row in &report.rows {
            assert_eq!(row.summary.n_scored, 0);
            assert_eq!(row.summary.n_failed, 4);
            // strict policy scores failures as iou 0, giou −1
            assert_eq!(row.summary.mean_iou, Some(0.0));
            assert_eq!(row.summary.mean_giou, Some(-1.0));
        }
        let (_, records) = read_record_log(&records_path).unwrap();
        assert!(records.iter().all(|r| matches!(
            r.outcome,
            TrialOutcome::ParseFailed { reason: ParseFailure::NoTupleFound }
        )));
    }

    struct FatalAfter {
        budget: AtomicUsize,
    }
    impl Backend for FatalAfter {
        fn identity(&self) -> String {
            "fatal-after".into()
        }
        fn kind(&self) -> BackendKind {
            BackendKind::CacheReplay
        }
        fn query(&self, request: &QueryRequest) -> Result<QueryResponse, ClientError> {
            if self.budget.fetch_sub(1, Ordering::SeqCst) == 0 {
                return Err(ClientError::CacheMiss {
                    digest: "0".repeat(64),
                });
            }
            EchoBackend.query(request)
        }
    }

    #[test]
    fn fatal_error_aborts_with_partial_log_flushed() {
        let dir = tempfile::tempdir().unwrap();
        let (index, subset) = disk_fixture(dir.path(), 3);
        let inputs = SweepInputs {
            index: &index,
            subset: &subset,
            image_root: dir.path(),
            template: &PromptTemplate::standard(),
            parser: ParserOptions::default(),
            parallelism: 2,
        };
        let backend = FatalAfter {
            budget: AtomicUsize::new(10),
        };
        let records_path = dir.path().join("records.jsonl");
        let err = run_sweep(&small_spec(), &inputs, &backend, &records_path).unwrap_err();
        assert!(matches!(err, SweepError::Client(ClientError::CacheMiss { .. })));
        assert!(err.is_infrastructure());

        let (header, records) = read_record_log(&records_path).unwrap();
        assert_eq!(header.n_entries, 6);
        assert!(!records.is_empty());
        assert!(records.len() < 9 * 6);
    }

    #[test]
    fn trial_input_echo_and_perturb_worked_values() {
        let image = ImageBuffer::filled(400, 300, [100, 100, 100]).unwrap();
        let gt = BBox::new(50.0, 50.0, 150.0, 150.0).unwrap();
        let config = ConfigId::Grid { cells: 9, color: LineColor::Black, alpha: 0.3 };
        let input = TrialInput {
            config: &config,
            line_width: 1,
            image: &image,
            image_id: 1,
            annotation_id: 2,
            gt,
            category: "person",
        };
        let template = PromptTemplate::standard();
        let parser = ParserOptions::default();

        let echoed = run_trial(&input, &template, parser, &EchoBackend).unwrap();
        assert_eq!(echoed.outcome, TrialOutcome::Scored);
        assert_eq!(echoed.iou, Some(1.0));
        assert_eq!(echoed.giou, Some(1.0));
        assert!(echoed.prompt.contains("person"));

        let perturbed = run_trial(
            &input,
            &template,
            parser,
            &PerturbBackend::fixed_pixels([10.0, 10.0, 10.0, 10.0]),
        )
        .unwrap();
        assert!((perturbed.iou.unwrap() - 8100.0 / 11900.0).abs() < 1e-9);
    }

    #[test]
    fn record_log_round_trips_through_serde() {
        let record = EvalRecord {
            config: ConfigId::Grid { cells: 9, color: LineColor::Black, alpha: 0.3 },
            image_id: 4,
            annotation_id: 9,
            image_width: 640,
            image_height: 480,
            category: "dog".into(),
            prompt: "p [x1, y1, x2, y2]".into(),
            gt: BBox::new(1.0, 2.0, 3.0, 4.0).unwrap(),
            response_text: Some("[1, 2, 3, 4]".into()),
            outcome: TrialOutcome::Scored,
            predicted: Some(BBox::new(1.0, 2.0, 3.0, 4.0).unwrap()),
            iou: Some(1.0),
            giou: Some(1.0),
            latency_ms: Some(12),
            from_cache: Some(true),
        };
        let line = serde_json::to_string(&LogLine::Record(record.clone())).unwrap();
        assert!(line.contains("\"kind\":\"record\""));
        match serde_json::from_str::<LogLine>(&line).unwrap() {
            LogLine::Record(back) => assert_eq!(back, record),
            _ => panic!("wrong kind"),
        }
    }
}
