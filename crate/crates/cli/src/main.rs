//! `gridprobe`: overlay calibration grids, score box predictions, sweep
//! grid configurations against a dataset, re-score persisted runs, and
//! render baseline-vs-grid comparison panels.
//!
//! Exit codes: 0 success, 1 usage error, 2 infrastructure failure,
//! 3 run completed but some trials failed.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gridprobe_core::client::PromptTemplate;
use gridprobe_core::dataset::{
    load_annotations, resolve_image, sample_subset, write_manifest, DatasetError, DatasetIndex,
};
use gridprobe_core::parse::extract_tuple;
use gridprobe_core::raster::ImageBuffer;
use gridprobe_core::report::{
    compare_filename, render_annotated, render_report_csv, render_report_table, side_by_side,
    AnnotationStyle,
};
use gridprobe_core::sweep::{
    composited_for, read_record_log, rescore, run_sweep, ConfigId, EvalRecord, LineColor,
    SweepError, SweepInputs, SweepReport,
};
use gridprobe_core::{composite, giou, iou, BBox, FailurePolicy, GridConfig};

use config::{build_backend, resolve, BackendChoice, FileConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Infrastructure(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Infrastructure(_) => 2,
        }
    }
}

fn sweep_error(e: SweepError) -> CliError {
    if e.is_infrastructure() {
        CliError::Infrastructure(e.to_string())
    } else {
        CliError::Usage(e.to_string())
    }
}

fn dataset_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::SampleTooLarge { .. } => CliError::Usage(e.to_string()),
        other => CliError::Infrastructure(other.to_string()),
    }
}

#[derive(Parser)]
#[command(name = "gridprobe", version, about = "Grid-overlay localization evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Composite a calibration grid onto one image
    Overlay(OverlayArgs),
    /// Score one predicted box against a ground-truth box
    Score(ScoreArgs),
    /// Run a grid-configuration sweep against a dataset
    Sweep(SweepFlags),
    /// Recompute a report from a persisted record log
    Rescore(RescoreArgs),
    /// Render baseline-vs-grid comparison panels from a record log
    Compare(CompareArgs),
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Overlay(args) => cmd_overlay(args),
        Command::Score(args) => cmd_score(args),
        Command::Sweep(flags) => cmd_sweep(flags),
        Command::Rescore(args) => cmd_rescore(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn parse_color(s: &str) -> Result<LineColor, String> {
    match s {
        "black" => Ok(LineColor::Black),
        "white" => Ok(LineColor::White),
        other => Err(format!("unknown color '{other}' (expected black|white)")),
    }
}

fn parse_policy(s: &str) -> Result<FailurePolicy, String> {
    s.parse()
}

#[derive(Args)]
struct OverlayArgs {
    /// Input image (PNG or JPEG)
    input: PathBuf,
    /// Output path (default: input name with a -grid.png suffix)
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Cells per side
    #[arg(long, default_value_t = 9)]
    cells: u32,
    #[arg(long, default_value = "black", value_parser = parse_color)]
    color: LineColor,
    /// Blend weight in [0, 1]; 0 leaves the image untouched
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    line_width: u32,
}

fn cmd_overlay(args: OverlayArgs) -> Result<i32, CliError> {
    let config = GridConfig::new(args.cells, args.color.rgb(), args.alpha, args.line_width)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let image = ImageBuffer::load(&args.input)
        .map_err(|e| CliError::Infrastructure(format!("reading {}: {e}", args.input.display())))?;
    let composited = composite(&image, &config).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = args.out.unwrap_or_else(|| {
        let stem = args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "overlay".into());
        args.input.with_file_name(format!("{stem}-grid.png"))
    });
    composited
        .save_png(&out)
        .map_err(|e| CliError::Infrastructure(format!("writing {}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(0)
}

#[derive(Args)]
struct ScoreArgs {
    /// Ground-truth box, e.g. "[0, 0, 10, 10]"
    #[arg(long)]
    gt: String,
    /// Predicted box in the same form
    #[arg(long)]
    pred: String,
}

fn parse_box_arg(label: &str, text: &str) -> Result<BBox, CliError> {
    let (raw, _) =
        extract_tuple(text).map_err(|e| CliError::Usage(format!("--{label}: {e}")))?;
    let [x1, y1, x2, y2] = raw;
    BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
        .map_err(|e| CliError::Usage(format!("--{label}: {e}")))
}

fn cmd_score(args: ScoreArgs) -> Result<i32, CliError> {
    let gt = parse_box_arg("gt", &args.gt)?;
    let pred = parse_box_arg("pred", &args.pred)?;
    println!("iou={:.6}", iou(&gt, &pred));
    println!("giou={:.6}", giou(&gt, &pred));
    Ok(0)
}

#[derive(Args)]
struct SweepFlags {
    /// TOML run configuration; the flags below override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// COCO-style annotation JSON
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Directory holding the referenced images
    #[arg(long)]
    images: Option<PathBuf>,
    /// Number of images to sample
    #[arg(long)]
    subset: Option<usize>,
    /// Sampling seed
    #[arg(long)]
    seed: Option<u64>,
    /// Grid sizes (cells per side), comma separated
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<u32>>,
    /// Grid colors, comma separated
    #[arg(long, value_delimiter = ',', value_parser = parse_color)]
    colors: Option<Vec<LineColor>>,
    /// Blend weights, comma separated
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Include the no-grid baseline row
    #[arg(long, overrides_with = "no_baseline")]
    baseline: bool,
    /// Skip the no-grid baseline row
    #[arg(long, overrides_with = "baseline")]
    no_baseline: bool,
    #[arg(long)]
    line_width: Option<u32>,
    /// lenient excludes failed trials from the means; strict scores them
    /// as worst case
    #[arg(long, value_parser = parse_policy)]
    failure_policy: Option<FailurePolicy>,
    /// Model backend
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// Response cache directory (write-through; replay source)
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent trials
    #[arg(long)]
    parallelism: Option<usize>,
    /// Render K best and K worst trial panels per grid configuration
    #[arg(long)]
    panels: Option<usize>,
    /// Accept x1=.. y1=.. keyed coordinates as a parse fallback
    #[arg(long)]
    keyed_fallback: bool,
}

fn apply_flags(file: &mut FileConfig, flags: &SweepFlags) {
    if let Some(v) = &flags.annotations {
        file.dataset.annotations = Some(v.clone());
    }
    if let Some(v) = &flags.images {
        file.dataset.images = Some(v.clone());
    }
    if let Some(v) = flags.subset {
        file.subset.size = Some(v);
    }
    if let Some(v) = flags.seed {
        file.subset.seed = Some(v);
    }
    if let Some(v) = &flags.sizes {
        file.sweep.sizes = Some(v.clone());
    }
    if let Some(v) = &flags.colors {
        file.sweep.colors = Some(v.clone());
    }
    if let Some(v) = &flags.alphas {
        file.sweep.alphas = Some(v.clone());
    }
    if flags.baseline {
        file.sweep.baseline = Some(true);
    }
    if flags.no_baseline {
        file.sweep.baseline = Some(false);
    }
    if let Some(v) = flags.line_width {
        file.sweep.line_width = Some(v);
    }
    if let Some(v) = flags.failure_policy {
        file.sweep.failure_policy = Some(v);
    }
    if let Some(v) = flags.backend {
        file.backend.kind = Some(v);
    }
    if let Some(v) = &flags.cache {
        file.backend.cache = Some(v.clone());
    }
    if let Some(v) = &flags.out {
        file.run.out = Some(v.clone());
    }
    if let Some(v) = flags.parallelism {
        file.run.parallelism = Some(v);
    }
    if let Some(v) = flags.panels {
        file.run.panels = Some(v);
    }
    if flags.keyed_fallback {
        file.run.keyed_fallback = Some(true);
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Infrastructure(format!("writing {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Infrastructure(format!("creating {}: {e}", path.display())))
}

/// Prints the table; optionally persists both renderings plus run metadata.
fn finish_report(report: &SweepReport, out: Option<&Path>) -> Result<(), CliError> {
    let table = render_report_table(report);
    if let Some(dir) = out {
        write_out(&dir.join("report.csv"), render_report_csv(report).as_bytes())?;
        write_out(&dir.join("report.txt"), table.as_bytes())?;
        let meta = serde_json::to_string_pretty(&report.meta).expect("meta serializes");
        write_out(&dir.join("run-meta.json"), format!("{meta}\n").as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn exit_for(report: &SweepReport) -> i32 {
    let failed: usize = report.rows.iter().map(|r| r.summary.n_failed).sum();
    if failed > 0 {
        eprintln!("{failed} trials failed; inspect the record log");
        3
    } else {
        0
    }
}

fn cmd_sweep(flags: SweepFlags) -> Result<i32, CliError> {
    let mut file = match &flags.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    apply_flags(&mut file, &flags);
    let resolved = resolve(file)?;

    ensure_dir(&resolved.out)?;
    let echo = toml::to_string_pretty(&resolved.echo).expect("config serializes");
    write_out(&resolved.out.join("resolved-config.toml"), echo.as_bytes())?;

    let index = load_annotations(&resolved.annotations).map_err(dataset_error)?;
    let subset =
        sample_subset(&index, resolved.subset_size, resolved.subset_seed).map_err(dataset_error)?;
    write_manifest(&subset, &resolved.out.join("subset.jsonl")).map_err(dataset_error)?;

    let backend = build_backend(&resolved.backend)?;
    let template = PromptTemplate::standard();
    let inputs = SweepInputs {
        index: &index,
        subset: &subset,
        image_root: &resolved.image_root,
        template: &template,
        parser: resolved.parser,
        parallelism: resolved.parallelism,
    };
    let records_path = resolved.out.join("records.jsonl");
    let report = run_sweep(&resolved.spec, &inputs, &backend, &records_path).map_err(|e| {
        let mapped = sweep_error(e);
        if matches!(mapped, CliError::Infrastructure(_)) {
            eprintln!("partial records flushed to {}", records_path.display());
        }
        mapped
    })?;

    finish_report(&report, Some(&resolved.out))?;
    if resolved.panels > 0 {
        render_panels(
            &report,
            &records_path,
            &index,
            &resolved.image_root,
            &resolved.out,
            resolved.panels,
            resolved.spec.line_width,
        )?;
    }
    Ok(exit_for(&report))
}

fn fetch_original<'a>(
    originals: &'a mut BTreeMap<u64, ImageBuffer>,
    index: &DatasetIndex,
    image_id: u64,
    image_root: &Path,
) -> Result<&'a ImageBuffer, CliError> {
    if !originals.contains_key(&image_id) {
        let image = resolve_image(index, image_id, image_root).map_err(dataset_error)?;
        originals.insert(image_id, image);
    }
    Ok(&originals[&image_id])
}

/// For each grid configuration, writes side-by-side panels of the K worst
/// and K best scored trials: original image with the baseline prediction
/// on the left, composited stimulus with this configuration's prediction
/// on the right.
fn render_panels(
    report: &SweepReport,
    records_path: &Path,
    index: &DatasetIndex,
    image_root: &Path,
    out: &Path,
    k: usize,
    line_width: u32,
) -> Result<(), CliError> {
    let (_, records) = read_record_log(records_path).map_err(sweep_error)?;
    let style = AnnotationStyle::default();
    let dir = out.join("panels");
    ensure_dir(&dir)?;

    let baseline_pred = |record: &EvalRecord| {
        records
            .iter()
            .find(|r| {
                r.config.is_baseline()
                    && r.image_id == record.image_id
                    && r.annotation_id == record.annotation_id
            })
            .and_then(|r| r.predicted)
    };

    let mut originals: BTreeMap<u64, ImageBuffer> = BTreeMap::new();
    let mut written = 0usize;
    for row in &report.rows {
        if row.config.is_baseline() {
            continue;
        }
        let mut scored: Vec<&EvalRecord> = records
            .iter()
            .filter(|r| r.config == row.config && r.iou.is_some())
            .collect();
        scored.sort_by(|a, b| a.iou.unwrap().total_cmp(&b.iou.unwrap()));

        let worst: Vec<&EvalRecord> = scored.iter().take(k).copied().collect();
        let best: Vec<&EvalRecord> = scored.iter().rev().take(k).copied().collect();
        for (tag, selection) in [("worst", worst), ("best", best)] {
            for (rank, record) in selection.into_iter().enumerate() {
                let original = fetch_original(&mut originals, index, record.image_id, image_root)?;
                let stimulus = composited_for(&record.config, line_width, original)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                let left =
                    render_annotated(original, &record.gt, baseline_pred(record).as_ref(), &style);
                let right =
                    render_annotated(&stimulus, &record.gt, record.predicted.as_ref(), &style);
                let panel = side_by_side(&left, &right, 8);
                let name = format!(
                    "{}_{tag}{}_{}-{}.png",
                    record.config.slug(),
                    rank + 1,
                    record.image_id,
                    record.annotation_id
                );
                let path = dir.join(name);
                panel.save_png(&path).map_err(|e| {
                    CliError::Infrastructure(format!("writing {}: {e}", path.display()))
                })?;
                written += 1;
            }
        }
    }
    println!("wrote {written} trial panels to {}", dir.display());
    Ok(())
}

#[derive(Args)]
struct RescoreArgs {
    /// Record log from a previous sweep
    #[arg(long)]
    records: PathBuf,
    /// Override the failure policy recorded in the log
    #[arg(long, value_parser = parse_policy)]
    failure_policy: Option<FailurePolicy>,
    /// Directory for report.csv / report.txt (prints to stdout regardless)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_rescore(args: RescoreArgs) -> Result<i32, CliError> {
    let report = rescore(&args.records, args.failure_policy).map_err(sweep_error)?;
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
    }
    finish_report(&report, args.out.as_deref())?;
    Ok(exit_for(&report))
}

#[derive(Args)]
struct CompareArgs {
    /// Record log from a previous sweep (must include a baseline row)
    #[arg(long)]
    records: PathBuf,
    /// Annotation JSON the run was sampled from
    #[arg(long)]
    annotations: PathBuf,
    /// Directory holding the referenced images
    #[arg(long)]
    images: PathBuf,
    /// Output directory for the panels
    #[arg(long)]
    out: PathBuf,
    /// Grid configuration slug (e.g. 9x9-black-0.3); defaults to the row
    /// with the best mean IoU
    #[arg(long)]
    config: Option<String>,
    /// Maximum number of images to render
    #[arg(long)]
    limit: Option<usize>,
}

fn cmd_compare(args: CompareArgs) -> Result<i32, CliError> {
    let (header, records) = read_record_log(&args.records).map_err(sweep_error)?;
    if !header.configs.iter().any(ConfigId::is_baseline) {
        return Err(CliError::Usage(
            "record log has no baseline row to compare against".into(),
        ));
    }
    let treated = match &args.config {
        Some(slug) => header
            .configs
            .iter()
            .find(|c| c.slug() == *slug)
            .copied()
            .ok_or_else(|| {
                CliError::Usage(format!("configuration '{slug}' is not in the record log"))
            })?,
        None => {
            let report = rescore(&args.records, None).map_err(sweep_error)?;
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
                .map(|r| r.config)
                .ok_or_else(|| {
                    CliError::Usage("record log has no scored grid configuration".into())
                })?
        }
    };
    if treated.is_baseline() {
        return Err(CliError::Usage(
            "pick a grid configuration to compare against the baseline".into(),
        ));
    }

    let index = load_annotations(&args.annotations).map_err(dataset_error)?;
    ensure_dir(&args.out)?;
    let style = AnnotationStyle::default();

    let mut baseline_by_key: BTreeMap<(u64, u64), &EvalRecord> = BTreeMap::new();
    let mut treated_by_image: BTreeMap<u64, Vec<&EvalRecord>> = BTreeMap::new();
    for record in &records {
        if record.config.is_baseline() {
            baseline_by_key.insert((record.image_id, record.annotation_id), record);
        } else if record.config == treated {
            treated_by_image.entry(record.image_id).or_default().push(record);
        }
    }

    let limit = args.limit.unwrap_or(usize::MAX);
    let mut written = 0usize;
    for (image_id, group) in treated_by_image {
        if written >= limit {
            break;
        }
        let original = resolve_image(&index, image_id, &args.images).map_err(dataset_error)?;
        let stimulus = composited_for(&treated, header.line_width, &original)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut left = original.clone();
        let mut right = stimulus.into_owned();
        for record in &group {
            let baseline_pred = baseline_by_key
                .get(&(record.image_id, record.annotation_id))
                .and_then(|b| b.predicted);
            left = render_annotated(&left, &record.gt, baseline_pred.as_ref(), &style);
            right = render_annotated(&right, &record.gt, record.predicted.as_ref(), &style);
        }
        let panel = side_by_side(&left, &right, 8);
        let path = args.out.join(compare_filename(image_id));
        panel
            .save_png(&path)
            .map_err(|e| CliError::Infrastructure(format!("writing {}: {e}", path.display())))?;
        written += 1;
    }

    println!(
        "wrote {written} comparison panels ({treated} vs baseline) to {}",
        args.out.display()
    );
    Ok(0)
}
