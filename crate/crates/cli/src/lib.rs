//! `spinometry` command implementations.
//!
//! Exit codes: 0 success, 1 some rows failed, 2 invalid invocation,
//! 3 I/O failure.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use spinometry::aggregator::{aggregate, load_detector_output, AggregateError};
use spinometry::dataset::{
    crop_lumbosacral, find_annotation_files, load_record, lumbosacral_sibling, lumbosacral_window,
    crop_to_window, make_split_with_test, save_record, AnnotationRecord, DatasetError, Source,
    DEFAULT_CROP_MARGIN,
};
use spinometry::eval::compare_sources;
use spinometry::geometry::{compute_parameters, Parameter, SpinopelvicParameters, View};
use spinometry::report::{
    cohort_label, evaluate_cohort, icc_csv, parse_thresholds, pck_csv,
    radar_csv, report_radar, error_table_csv, EvaluationReport, ReportError, ReportOptions,
};
use spinometry::store::LUMBOSACRAL_SUFFIX;
use spinometry::synth::{synth_cohort, SynthOptions};
use spinometry::Store;
use spinometry_service::{ServiceConfig, DEFAULT_BIND};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ROW_FAILURES: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const DATA_DIR_ENV: &str = "SPINOMETRY_DATA_DIR";

/// Files written by `evaluate`.
pub const REPORT_JSON: &str = "report.json";
pub const ERRORS_CSV: &str = "errors.csv";
pub const PCK_CSV: &str = "pck.csv";
pub const ICC_CSV: &str = "icc.csv";
pub const RADAR_CSV: &str = "radar.csv";

#[derive(Debug, Parser)]
#[command(name = "spinometry", version, about = "Spinopelvic measurement and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute parameters for annotation files or directories.
    Compute(ComputeArgs),
    /// Score predictions against ground truth and write the report files.
    Evaluate(EvaluateArgs),
    /// Median errors of two sources against the same ground truth.
    Compare(CompareArgs),
    /// Write lumbosacral crops next to whole-spine annotations.
    Crop(CropArgs),
    /// Run the review HTTP service.
    Serve(ServeArgs),
    /// Seeded train/validation split manifest.
    Split(SplitArgs),
    /// Write a seeded synthetic cohort in data-dir layout.
    Synth(SynthArgs),
    /// Merge L1/S1/global detector outputs into one keypoint set.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Doc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    WholeSpine,
    Lumbosacral,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> View {
        match v {
            ViewArg::WholeSpine => View::WholeSpine,
            ViewArg::Lumbosacral => View::Lumbosacral,
        }
    }
}

/// PCK thresholds parsed from one argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(pub Vec<f64>);

fn thresholds_arg(s: &str) -> Result<Thresholds, String> {
    parse_thresholds(s).map(Thresholds)
}

fn margin_arg(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(m) if m.is_finite() && m >= 0.0 => Ok(m),
        _ => Err(format!("margin {s:?} must be a non-negative number")),
    }
}

#[derive(Debug, Args)]
pub struct ComputeArgs {
    /// Annotation files, or directories searched for `*.ann`.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction directory (or rater id with --raters).
    pub pred: String,
    /// Ground-truth directory (or rater id with --raters).
    pub gt: String,
    /// Treat PRED and GT as rater ids inside the data dir.
    #[arg(long)]
    pub raters: bool,
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Output directory for the report files.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    /// PCK thresholds in mm: `a..b` or a comma list.
    #[arg(long, value_parser = thresholds_arg, default_value = "1..10")]
    pub thresholds: Thresholds,
    /// Recorded in the report metadata.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "cohort")]
    pub cohort_id: String,
    /// Omit the instrumentation strata.
    #[arg(long)]
    pub no_strata: bool,
    /// What to echo on stdout: the error table or the full report.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub source_a: PathBuf,
    pub source_b: PathBuf,
    pub gt: PathBuf,
    #[arg(long)]
    pub label_a: Option<String>,
    #[arg(long)]
    pub label_b: Option<String>,
    #[arg(long, value_enum, default_value = "whole-spine")]
    pub view: ViewArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    /// Annotation files, or directories searched for `*.ann`.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Fraction of the landmark box added on each side.
    #[arg(long, value_parser = margin_arg, default_value_t = DEFAULT_CROP_MARGIN)]
    pub margin: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_BIND)]
    pub bind: SocketAddr,
    /// Reject annotation writes.
    #[arg(long)]
    pub readonly: bool,
    /// Allowed browser origin for CORS (`*` for any).
    #[arg(long)]
    pub cors_origin: Option<String>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Annotation directory, data dir, or a file with one study id per line.
    pub source: PathBuf,
    /// File with fixed test-set study ids, one per line.
    #[arg(long)]
    pub test_ids: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    /// Prediction noise per coordinate, mm.
    #[arg(long, default_value_t = 0.8)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = margin_arg, default_value_t = DEFAULT_CROP_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.5)]
    pub instrumentation_rate: f64,
    #[arg(long, default_value = "GT")]
    pub gt_rater: String,
    #[arg(long, default_value = "MODEL")]
    pub pred_rater: String,
    /// Also write placeholder gradient PNGs under images/.
    #[arg(long)]
    pub images: bool,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub l1: PathBuf,
    #[arg(long)]
    pub s1: PathBuf,
    #[arg(long)]
    pub global: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "whole-spine")]
    pub view: ViewArg,
    /// Pixel spacing in px/mm; taken from --template when absent.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Annotation whose image and metadata the output record reuses.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long, default_value = "MODEL")]
    pub rater: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Failed(_) => EXIT_ROW_FAILURES,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Failed(m) => m,
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn dataset_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Failed(other.to_string()),
    }
}

/// Standard output and error for a command.
pub struct Console<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

impl Console<'_> {
    fn row_failure(&mut self, what: impl std::fmt::Display) {
        let _ = writeln!(self.err, "error: {what}");
    }
}

type Outcome = Result<usize, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I, console: &mut Console<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(console.err, "{}", e.render())
            } else {
                write!(console.out, "{}", e.render())
            };
            return code;
        }
    };
    run(cli.command, console)
}

pub fn run(command: Command, console: &mut Console<'_>) -> i32 {
    let result = match command {
        Command::Compute(a) => cmd_compute(&a, console),
        Command::Evaluate(a) => cmd_evaluate(&a, console),
        Command::Compare(a) => cmd_compare(&a, console),
        Command::Crop(a) => cmd_crop(&a, console),
        Command::Serve(a) => cmd_serve(&a, console),
        Command::Split(a) => cmd_split(&a, console),
        Command::Synth(a) => cmd_synth(&a, console),
        Command::Aggregate(a) => cmd_aggregate(&a, console),
    };
    match result {
        Ok(0) => EXIT_OK,
        Ok(n) => {
            let _ = writeln!(console.err, "{n} row(s) failed");
            EXIT_ROW_FAILURES
        }
        Err(e) => {
            let _ = writeln!(console.err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Files as given; directories expanded to their `*.ann` files.
fn expand(paths: &[PathBuf], skip_lumbosacral_siblings: bool) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let found = find_annotation_files(p).map_err(dataset_error)?;
            out.extend(found.into_iter().filter(|f| {
                !(skip_lumbosacral_siblings && f.to_string_lossy().ends_with(".ls.ann"))
            }));
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(io_error(p, "no such file or directory"));
        }
    }
    Ok(out)
}

/// Loads every annotation under `dir`; unreadable files are row failures.
fn load_dir(dir: &Path, console: &mut Console<'_>) -> Result<(Vec<AnnotationRecord>, usize), CliError> {
    if !dir.is_dir() {
        return Err(io_error(dir, "not a directory"));
    }
    let mut records = Vec::new();
    let mut failed = 0;
    for path in find_annotation_files(dir).map_err(dataset_error)? {
        match load_record(&path) {
            Ok(r) => records.push(r),
            Err(e) => {
                console.row_failure(e);
                failed += 1;
            }
        }
    }
    Ok((records, failed))
}

fn write_output(path: Option<&Path>, text: &str, console: &mut Console<'_>) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
            }
            fs::write(p, text).map_err(|e| io_error(p, e))
        }
        None => console.out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}

fn format_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.1}"))
}

#[derive(Debug, Serialize)]
struct ComputedRow {
    path: String,
    study_id: Option<String>,
    rater_id: Option<String>,
    view: Option<View>,
    parameters: Option<SpinopelvicParameters>,
    error: Option<String>,
}

pub fn cmd_compute(args: &ComputeArgs, console: &mut Console<'_>) -> Outcome {
    let mut rows = Vec::new();
    for path in expand(&args.paths, false)? {
        let mut row = ComputedRow {
            path: path.display().to_string(),
            study_id: None,
            rater_id: None,
            view: None,
            parameters: None,
            error: None,
        };
        match load_record(&path) {
            Ok(rec) => {
                row.study_id = Some(rec.study_id.clone());
                row.rater_id = Some(rec.rater_id.clone());
                row.view = Some(rec.view());
                match compute_parameters(&rec.keypoints) {
                    Ok(p) => row.parameters = Some(p),
                    Err(e) => row.error = Some(format!("{}: {e}", e.kind())),
                }
            }
            Err(e) => row.error = Some(format!("{}: {e}", e.kind())),
        }
        if let Some(e) = &row.error {
            console.row_failure(format!("{}: {e}", row.path));
        }
        rows.push(row);
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();

    let text = match args.format {
        Format::Doc => {
            let mut s = serde_json::to_string_pretty(&rows).expect("rows serialize");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut s = String::from("path,study_id,rater_id,view");
            for p in Parameter::ALL {
                s.push(',');
                s.push_str(p.as_str());
            }
            s.push_str(",error\n");
            for r in &rows {
                let cells: Vec<String> = [
                    r.path.clone(),
                    r.study_id.clone().unwrap_or_default(),
                    r.rater_id.clone().unwrap_or_default(),
                    r.view.map(|v| v.to_string()).unwrap_or_default(),
                ]
                .into_iter()
                .chain(Parameter::ALL.iter().map(|&p| format_value(r.parameters.and_then(|x| x.get(p)))))
                .chain([r.error.clone().unwrap_or_default()])
                .map(|c| csv_cell(&c))
                .collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            s
        }
    };
    write_output(args.out.as_deref(), &text, console)?;
    Ok(failed)
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `report.json` and the four CSV files into `dir`.
pub fn write_report_files(report: &EvaluationReport, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let files = [
        (REPORT_JSON, report.to_json()),
        (ERRORS_CSV, error_table_csv(report)),
        (PCK_CSV, pck_csv(report)),
        (ICC_CSV, icc_csv(report)),
        (RADAR_CSV, radar_csv(report_radar(report))),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

fn report_error(e: ReportError) -> CliError {
    CliError::Failed(e.to_string())
}

fn require_data_dir(dir: &Option<PathBuf>) -> Result<&Path, CliError> {
    dir.as_deref()
        .ok_or_else(|| CliError::Usage(format!("no data dir: pass --data-dir or set {DATA_DIR_ENV}")))
}

fn open_store(dir: &Path) -> Result<Store, CliError> {
    Store::open(dir).map_err(|e| CliError::Io(e.to_string()))
}

pub fn cmd_evaluate(args: &EvaluateArgs, console: &mut Console<'_>) -> Outcome {
    let (preds, gts, mut failed) = if args.raters {
        let store = open_store(require_data_dir(&args.data_dir)?)?;
        let load = |r: &str| store.cohort_with_lumbosacral(r).map_err(|e| CliError::Io(e.to_string()));
        (load(&args.pred)?, load(&args.gt)?, 0)
    } else {
        let (p, fp) = load_dir(Path::new(&args.pred), console)?;
        let (g, fg) = load_dir(Path::new(&args.gt), console)?;
        (p, g, fp + fg)
    };
    let opts = ReportOptions {
        cohort_id: args.cohort_id.clone(),
        thresholds_mm: args.thresholds.0.clone(),
        stratify_instrumentation: !args.no_strata,
        seed: args.seed,
        ..ReportOptions::default()
    };
    let report = evaluate_cohort(preds, gts, &opts).map_err(report_error)?;
    write_report_files(&report, &args.out)?;

    if !report.unmatched_study_ids.is_empty() {
        console.row_failure(format!("unmatched study ids: {}", report.unmatched_study_ids.join(", ")));
        failed += report.unmatched_study_ids.len();
    }
    for f in &report.failures {
        console.row_failure(format!("{} ({}, {}): {}", f.study_id, f.view, f.side, f.error));
    }
    failed += report.failures.len();
    let echo = match args.format {
        Format::Csv => error_table_csv(&report),
        Format::Doc => report.to_json(),
    };
    write_output(None, &echo, console)?;
    Ok(failed)
}

type Keyed = BTreeMap<(String, View), SpinopelvicParameters>;

fn keyed_parameters(records: &[AnnotationRecord], view: View, console: &mut Console<'_>) -> (Keyed, usize) {
    let mut out = BTreeMap::new();
    let mut failed = 0;
    for r in records.iter().filter(|r| r.view() == view) {
        match compute_parameters(&r.keypoints) {
            Ok(p) => {
                out.insert((r.study_id.clone(), view), p);
            }
            Err(e) => {
                console.row_failure(format!("{} ({}): {e}", r.study_id, r.rater_id));
                failed += 1;
            }
        }
    }
    (out, failed)
}

pub fn cmd_compare(args: &CompareArgs, console: &mut Console<'_>) -> Outcome {
    let view = View::from(args.view);
    let (a, fa) = load_dir(&args.source_a, console)?;
    let (b, fb) = load_dir(&args.source_b, console)?;
    let (g, fg) = load_dir(&args.gt, console)?;
    let label_a = args.label_a.clone().unwrap_or_else(|| cohort_label(&a, "A"));
    let label_b = args.label_b.clone().unwrap_or_else(|| cohort_label(&b, "B"));
    let (pa, ca) = keyed_parameters(&a, view, console);
    let (pb, cb) = keyed_parameters(&b, view, console);
    let (pg, cg) = keyed_parameters(&g, view, console);

    let all: BTreeSet<&(String, View)> = pa.keys().chain(pb.keys()).chain(pg.keys()).collect();
    let common: Vec<&(String, View)> = all
        .iter()
        .copied()
        .filter(|k| pa.contains_key(*k) && pb.contains_key(*k) && pg.contains_key(*k))
        .collect();
    let unmatched: Vec<String> = all
        .iter()
        .filter(|k| !common.contains(k))
        .map(|k| k.0.clone())
        .collect();
    if common.is_empty() {
        return Err(CliError::Failed("no study is present in all three cohorts".into()));
    }
    if !unmatched.is_empty() {
        console.row_failure(format!("unmatched study ids: {}", unmatched.join(", ")));
    }
    let pick = |m: &Keyed| common.iter().map(|k| m[*k]).collect::<Vec<_>>();
    let rows = compare_sources(&label_a, &pick(&pa), &label_b, &pick(&pb), &pick(&pg))
        .map_err(|e| CliError::Failed(e.to_string()))?;
    write_output(args.out.as_deref(), &radar_csv(&rows), console)?;
    Ok(fa + fb + fg + ca + cb + cg + unmatched.len())
}

pub fn cmd_crop(args: &CropArgs, console: &mut Console<'_>) -> Outcome {
    let mut failed = 0;
    for path in expand(&args.paths, true)? {
        let result = load_record(&path).and_then(|rec| {
            if rec.view() == View::Lumbosacral {
                return Err(DatasetError::InvariantViolation(vec![
                    "record is already lumbosacral; crop expects a whole-spine annotation".into(),
                ]));
            }
            let cropped = crop_lumbosacral(&rec, args.margin)?;
            let target = lumbosacral_sibling(&path);
            save_record(&cropped, &target)?;
            Ok(target)
        });
        match result {
            Ok(target) => {
                let _ = writeln!(console.out, "{}", target.display());
            }
            Err(e) => {
                console.row_failure(format!("{}: {e}", path.display()));
                failed += 1;
            }
        }
    }
    Ok(failed)
}

pub fn cmd_serve(args: &ServeArgs, console: &mut Console<'_>) -> Outcome {
    let data_dir = require_data_dir(&args.data_dir)?.to_path_buf();
    let config = ServiceConfig { data_dir, readonly: args.readonly, cors_origin: args.cors_origin.clone() };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let _ = writeln!(console.err, "listening on http://{}", args.bind);
    runtime
        .block_on(spinometry_service::serve(config, args.bind, spinometry_service::ctrl_c()))
        .map_err(|e| match e {
            spinometry_service::ServeError::Cors(_) => CliError::Usage(e.to_string()),
            other => CliError::Io(other.to_string()),
        })?;
    Ok(0)
}

fn read_id_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

pub fn cmd_split(args: &SplitArgs, console: &mut Console<'_>) -> Outcome {
    let (mut pool, failed) = if args.source.is_dir() {
        if args.source.join("studies").is_dir() {
            (open_store(&args.source)?.study_ids().map_err(|e| CliError::Io(e.to_string()))?, 0)
        } else {
            let (records, failed) = load_dir(&args.source, console)?;
            let ids: BTreeSet<String> = records.into_iter().map(|r| r.study_id).collect();
            (ids.into_iter().collect(), failed)
        }
    } else {
        (read_id_lines(&args.source)?, 0)
    };
    let test = match &args.test_ids {
        Some(p) => read_id_lines(p)?,
        None => Vec::new(),
    };
    let test_set: BTreeSet<&String> = test.iter().collect();
    pool.retain(|id| !test_set.contains(id));
    pool.dedup();
    let manifest = make_split_with_test(&pool, &test, args.train, args.seed).map_err(|e| match e {
        DatasetError::InvalidFraction(_) => CliError::Usage(e.to_string()),
        other => CliError::Failed(other.to_string()),
    })?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_output(args.out.as_deref(), &text, console)?;
    Ok(failed)
}

fn write_placeholder_png(path: &Path, width: u32, height: u32) -> Result<(), CliError> {
    let img = image::GrayImage::from_fn(width, height, |x, y| {
        image::Luma([((x / 8 + y / 8) % 64 * 3 + 40) as u8])
    });
    img.save(path).map_err(|e| io_error(path, e))
}

pub fn cmd_synth(args: &SynthArgs, console: &mut Console<'_>) -> Outcome {
    if !(args.sigma.is_finite() && args.sigma >= 0.0) {
        return Err(CliError::Usage(format!("sigma {} must be non-negative", args.sigma)));
    }
    if !(0.0..=1.0).contains(&args.instrumentation_rate) {
        return Err(CliError::Usage("instrumentation rate must be within [0, 1]".into()));
    }
    let opts = SynthOptions {
        n_studies: args.n,
        seed: args.seed,
        noise_sigma_mm: args.sigma,
        instrumentation_rate: args.instrumentation_rate,
        gt_rater: args.gt_rater.clone(),
        pred_rater: args.pred_rater.clone(),
        ..SynthOptions::default()
    };
    if !spinometry::dataset::is_valid_id(&opts.gt_rater) || !spinometry::dataset::is_valid_id(&opts.pred_rater) {
        return Err(CliError::Usage("rater ids must be [A-Za-z0-9._-]".into()));
    }
    let cohort = synth_cohort(&opts);
    for (gt, pred) in cohort.gt.iter().zip(&cohort.pred) {
        let dir = args.out.join("studies").join(&gt.study_id);
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let window = lumbosacral_window(gt, args.margin).map_err(dataset_error)?;
        let writes = [
            (gt.clone(), gt.rater_id.clone()),
            (pred.clone(), pred.rater_id.clone()),
            (crop_to_window(gt, &window), format!("{}{LUMBOSACRAL_SUFFIX}", gt.rater_id)),
            (crop_to_window(pred, &window), format!("{}{LUMBOSACRAL_SUFFIX}", pred.rater_id)),
        ];
        for (rec, name) in writes {
            save_record(&rec, dir.join(format!("{name}.ann"))).map_err(dataset_error)?;
        }
        if args.images {
            let images = args.out.join("images");
            fs::create_dir_all(&images).map_err(|e| io_error(&images, e))?;
            write_placeholder_png(&images.join(format!("{}.png", gt.study_id)), gt.image.width_px, gt.image.height_px)?;
        }
    }
    let _ = writeln!(console.out, "wrote {} studies to {}", cohort.gt.len(), args.out.display());
    Ok(0)
}

fn aggregate_error(e: AggregateError) -> CliError {
    match e {
        AggregateError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::Failed(other.to_string()),
    }
}

pub fn cmd_aggregate(args: &AggregateArgs, console: &mut Console<'_>) -> Outcome {
    let template = match &args.template {
        Some(p) => Some(load_record(p).map_err(dataset_error)?),
        None => None,
    };
    let spacing = match (args.spacing, &template) {
        (Some(s), _) => s,
        (None, Some(t)) => t.image.pixel_spacing_px_per_mm,
        (None, None) => return Err(CliError::Usage("pass --spacing or --template".into())),
    };
    let view = template.as_ref().map_or(View::from(args.view), |t| t.view());
    let l1 = load_detector_output(&args.l1).map_err(aggregate_error)?;
    let s1 = load_detector_output(&args.s1).map_err(aggregate_error)?;
    let global = match &args.global {
        Some(p) => Some(load_detector_output(p).map_err(aggregate_error)?),
        None => None,
    };
    let study_ids: BTreeSet<&str> =
        [Some(&l1), Some(&s1), global.as_ref()].into_iter().flatten().map(|o| o.study_id.as_str()).collect();
    if study_ids.len() != 1 {
        return Err(CliError::Failed(format!("detector outputs disagree on study id: {study_ids:?}")));
    }
    let keypoints = aggregate(Some(&l1), Some(&s1), global.as_ref(), spacing, view).map_err(aggregate_error)?;

    let text = match template {
        Some(t) => {
            if !study_ids.contains(t.study_id.as_str()) {
                return Err(CliError::Failed(format!("template is for study {}, detections are not", t.study_id)));
            }
            let rec = AnnotationRecord {
                rater_id: args.rater.clone(),
                source: Source::Model,
                keypoints,
                boxes: None,
                ..t
            };
            rec.validate().map_err(dataset_error)?;
            spinometry::dataset::encode_record(&rec, None)
        }
        None => {
            let mut s = serde_json::to_string_pretty(&keypoints).expect("keypoints serialize");
            s.push('\n');
            s
        }
    };
    write_output(Some(&args.out), &text, console)?;
    Ok(0)
}
