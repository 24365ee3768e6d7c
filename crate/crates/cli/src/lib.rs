//! `failprobe`: batch failure analysis, project management and board export.

pub mod analyze;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use failprobe_core::backends::{ModelDescriptor, ReplayFile};
use failprobe_core::catalog::{list_taxonomy, suggest_recoveries, SystemLevel};
use failprobe_core::classify::Thresholds;
use failprobe_core::explore::{augment_bytes, AugmentationKind, AugmentationSpec};
use failprobe_core::geometry::MatchWeights;
use failprobe_core::metrics::MetricAxis;
use failprobe_core::pipeline::{par, AnalysisConfig};
use failprobe_core::store::{ProjectStore, StoreError};

use crate::analyze::{AnalyzeJob, AnnotationFile, PredictionSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_INVALID_PROJECT: i32 = 6;

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  2  invalid command line
  3  input could not be parsed or failed validation
  4  detector backend failed
  5  file system error
  6  project failed the integrity check";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("project is invalid:\n{0}")]
    InvalidProject(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => EXIT_INPUT,
            Self::Backend(_) => EXIT_BACKEND,
            Self::Io(_) => EXIT_IO,
            Self::InvalidProject(_) => EXIT_INVALID_PROJECT,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } | StoreError::Busy(_) | StoreError::Exists(_) => Self::Io(e.to_string()),
            StoreError::Integrity(_) => Self::InvalidProject(e.to_string()),
            other => Self::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "failprobe", version, about = "Failure exploration and analysis for object-detection models", after_help = EXIT_CODES_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify failures for annotation and prediction files and print disaggregated metrics.
    #[command(after_help = EXIT_CODES_HELP)]
    Analyze(Box<AnalyzeArgs>),
    /// Create or check a project directory.
    #[command(subcommand)]
    Project(ProjectCommand),
    /// Write the synthesis board of a project as a structured document.
    #[command(after_help = EXIT_CODES_HELP)]
    ExportBoard {
        /// Project directory.
        project: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Browse the bundled failure-mode taxonomy and recovery mechanisms.
    #[command(subcommand)]
    Catalog(CatalogCommand),
    /// Apply one augmentation to an image file.
    #[command(after_help = EXIT_CODES_HELP)]
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// brightness, rotation, blur or crop.
        #[arg(long)]
        kind: AugmentationKind,
        /// Brightness factor, rotation degrees, blur radius or crop fraction.
        #[arg(long, allow_negative_numbers = true)]
        param: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProjectCommand {
    /// Create an empty project directory.
    Init {
        dir: PathBuf,
        #[arg(long, default_value = "project")]
        id: String,
    },
    /// Run the referential-integrity scan, including image blobs.
    #[command(after_help = EXIT_CODES_HELP)]
    Validate { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum CatalogCommand {
    /// List taxonomy entries, or recovery mechanisms with --recovery.
    List {
        /// sensing, observation or reaction.
        #[arg(long)]
        level: Option<SystemLevel>,
        #[arg(long, conflicts_with = "level")]
        recovery: bool,
        /// Print JSON instead of text rows.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args, Default)]
pub struct AnalyzeArgs {
    /// TOML file with defaults for any of these options; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest fragment with scenarios and annotations (JSON).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Replay file with stored predictions (JSON).
    #[arg(long, conflicts_with = "model")]
    pub predictions: Option<PathBuf>,
    /// Model descriptor (JSON) for a live run instead of --predictions.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Model id recorded in the report.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Class list (JSON) of the model; bundled COCO classes by default.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the text table; stdout when omitted.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Optional sidecar with run metadata (timestamp, version).
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// Metric axes to report; all three when omitted.
    #[arg(long = "axis")]
    pub axes: Vec<MetricAxis>,
    /// Weight of the class term in the matching cost (default 0.5)
    #[arg(long)]
    pub gamma_class: Option<f64>,
    /// Weight of the box term in the matching cost (default 0.5)
    #[arg(long)]
    pub gamma_box: Option<f64>,
    /// Weight of the l1 distance inside the box term (default 0.5)
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    /// Weight of the GIoU loss inside the box term (default 0.5)
    #[arg(long)]
    pub lambda_iou: Option<f64>,
    /// Scores below this get a CQS warning (default 0.95)
    #[arg(long)]
    pub confidence_floor: Option<f64>,
    /// Matched pairs with IoU below this get a CQB warning (default 0.7)
    #[arg(long)]
    pub iou_floor: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    annotations: Option<PathBuf>,
    predictions: Option<PathBuf>,
    model: Option<PathBuf>,
    model_id: Option<String>,
    classes: Option<PathBuf>,
    out: Option<PathBuf>,
    table: Option<PathBuf>,
    metadata: Option<PathBuf>,
    #[serde(default)]
    axes: Vec<MetricAxis>,
    #[serde(default)]
    weights: FileWeights,
    #[serde(default)]
    thresholds: FileThresholds,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileWeights {
    gamma_class: Option<f64>,
    gamma_box: Option<f64>,
    lambda_l1: Option<f64>,
    lambda_iou: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileThresholds {
    confidence_floor: Option<f64>,
    iou_floor: Option<f64>,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes via a temporary sibling so partial files never appear.
fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Resolved {
    job: AnalyzeJob,
    out: Option<PathBuf>,
    table: Option<PathBuf>,
    metadata: Option<PathBuf>,
}

fn resolve(args: AnalyzeArgs) -> Result<Resolved, CliError> {
    let (file, base) = match &args.config {
        Some(path) => {
            let cfg: FileConfig = toml::from_str(&read(path)?).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
            (cfg, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (FileConfig::default(), PathBuf::new()),
    };
    let rel = |p: Option<PathBuf>| p.map(|p| if p.is_absolute() { p } else { base.join(p) });
    let annotations_path = args
        .annotations
        .or_else(|| rel(file.annotations))
        .ok_or_else(|| CliError::Input("--annotations is required".into()))?;
    let predictions_path = args.predictions.or_else(|| rel(file.predictions.clone()));
    let model_path = args.model.or_else(|| rel(file.model.clone()));

    let weights = MatchWeights::new(
        args.gamma_class.or(file.weights.gamma_class).unwrap_or(0.5),
        args.gamma_box.or(file.weights.gamma_box).unwrap_or(0.5),
        args.lambda_l1.or(file.weights.lambda_l1).unwrap_or(0.5),
        args.lambda_iou.or(file.weights.lambda_iou).unwrap_or(0.5),
    )
    .map_err(|e| CliError::Input(e.to_string()))?;
    let defaults = Thresholds::default();
    let thresholds = Thresholds::new(
        args.confidence_floor
            .or(file.thresholds.confidence_floor)
            .unwrap_or(defaults.confidence_floor()),
        args.iou_floor.or(file.thresholds.iou_floor).unwrap_or(defaults.iou_floor()),
    )
    .map_err(|e| CliError::Input(e.to_string()))?;

    let annotations = AnnotationFile::parse(&read(&annotations_path)?)?;
    let annotations_dir = annotations_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let (predictions, descriptor_classes, descriptor_id) = match (predictions_path, model_path) {
        (Some(_), Some(_)) => return Err(CliError::Input("give either --predictions or --model, not both".into())),
        (None, None) => return Err(CliError::Input("one of --predictions or --model is required".into())),
        (Some(p), None) => {
            let file = ReplayFile::from_json(read(&p)?.as_bytes()).map_err(|e| CliError::Input(format!("predictions: {e}")))?;
            (PredictionSource::Replay(file), None, None)
        }
        (None, Some(m)) => {
            let descriptor: ModelDescriptor =
                serde_json::from_str(&read(&m)?).map_err(|e| CliError::Input(format!("model descriptor: {e}")))?;
            descriptor.validate().map_err(|e| CliError::Input(format!("model descriptor: {e}")))?;
            let classes = descriptor.class_list.clone();
            let id = descriptor.model_id.clone();
            let base_dir = m.parent().map(Path::to_path_buf).unwrap_or_default();
            (PredictionSource::Live { descriptor, base_dir }, Some(classes), Some(id))
        }
    };

    let classes = match args.classes.or_else(|| rel(file.classes)) {
        Some(path) => analyze::parse_classes(&read(&path)?)?,
        None => descriptor_classes.unwrap_or_else(analyze::default_classes),
    };
    let model_id = args
        .model_id
        .or(file.model_id)
        .or(descriptor_id)
        .unwrap_or_else(|| "coco80".to_string());
    let mut axes = if args.axes.is_empty() { file.axes } else { args.axes };
    if axes.is_empty() {
        axes = MetricAxis::ALL.to_vec();
    }
    axes.dedup();

    Ok(Resolved {
        job: AnalyzeJob {
            annotations,
            annotations_dir,
            predictions,
            model_id,
            classes,
            config: AnalysisConfig { weights, thresholds },
            axes,
        },
        out: args.out.or_else(|| rel(file.out)),
        table: args.table.or_else(|| rel(file.table)),
        metadata: args.metadata.or_else(|| rel(file.metadata)),
    })
}

fn run_analyze(args: AnalyzeArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let resolved = resolve(args)?;
    let outcome = analyze::run(&resolved.job)?;
    for n in &outcome.notices {
        let _ = writeln!(stderr, "note: {n}");
    }
    let table = analyze::render_table(&outcome.report);
    if let Some(out) = &resolved.out {
        write_file(out, outcome.report.to_json().as_bytes())?;
    }
    match &resolved.table {
        Some(path) => write_file(path, table.as_bytes())?,
        None => stdout.write_all(table.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?,
    }
    if let Some(path) = &resolved.metadata {
        let meta = serde_json::json!({
            "generated_at": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            "tool_version": env!("CARGO_PKG_VERSION"),
            "parallel": par::is_parallel(),
            "images": outcome.report.images.len(),
        });
        write_file(path, format!("{}\n", serde_json::to_string_pretty(&meta).expect("json")).as_bytes())?;
    }
    Ok(())
}

fn run_command(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    match cli.command {
        Command::Analyze(args) => run_analyze(*args, stdout, stderr),
        Command::Project(ProjectCommand::Init { dir, id }) => {
            ProjectStore::init(&dir, &id)?;
            writeln!(stdout, "initialized project {id} in {}", dir.display()).map_err(io)
        }
        Command::Project(ProjectCommand::Validate { dir }) => {
            let violations = ProjectStore::open(&dir)?.verify()?;
            if violations.is_empty() {
                writeln!(stdout, "ok: {} passes the integrity check", dir.display()).map_err(io)
            } else {
                Err(CliError::InvalidProject(violations.join("\n")))
            }
        }
        Command::ExportBoard { project, out } => {
            let doc = ProjectStore::open(&project)?.load()?.export_board().to_json();
            match out {
                Some(path) => write_file(&path, doc.as_bytes()),
                None => stdout.write_all(doc.as_bytes()).map_err(io),
            }
        }
        Command::Catalog(CatalogCommand::List { level, recovery, json }) => {
            if recovery {
                let items = suggest_recoveries();
                if json {
                    writeln!(stdout, "{}", serde_json::to_string_pretty(&items).expect("json")).map_err(io)?;
                } else {
                    for m in items {
                        writeln!(stdout, "{}\t{}", m.name, m.description).map_err(io)?;
                    }
                }
            } else {
                let items = list_taxonomy(level);
                if json {
                    writeln!(stdout, "{}", serde_json::to_string_pretty(&items).expect("json")).map_err(io)?;
                } else {
                    for t in items {
                        writeln!(stdout, "{}\t{}\t{}", t.system_level, t.name, t.description).map_err(io)?;
                    }
                }
            }
            Ok(())
        }
        Command::Augment { input, output, kind, param } => {
            let spec = AugmentationSpec::new(kind, param).map_err(|e| CliError::Input(e.to_string()))?;
            let bytes = fs::read(&input).map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
            let out = augment_bytes(&bytes, &spec).map_err(|e| CliError::Input(e.to_string()))?;
            write_file(&output, &out)
        }
    }
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run_command(cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
