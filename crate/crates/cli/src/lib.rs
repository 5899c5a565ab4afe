//! `qualcode` command line and HTTP server.

pub mod server;
pub mod workdir;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qualcode_core::codebook::{export_codebook, Approach, Codebook, ExportFormat};
use qualcode_core::corpus::{ingest_dataset, Dataset, DatasetMetadata};
use qualcode_core::evaluation::{final_report, metrics_report, AnnotationStore, PersistentStore};
use qualcode_core::fixtures;
use qualcode_core::gateway::{
    ChatBackend, FixtureStore, Gateway, LiveBackend, LiveConfig, MockBackend, RemoteEmbedder, ReplayBackend, Sampling,
    Transcript,
};
use qualcode_core::runner::{
    aggregate, chunk_dataset, run_approach, run_to_dir, sha256_hex, Artifact, ResponsesFile, RunConfig,
};
use qualcode_core::segmenter::{ChunkSet, SegmentationMethod};
use qualcode_core::topic::Embedder;

use crate::workdir::Workdir;

#[derive(Debug, Parser)]
#[command(name = "qualcode", version, about = "Inductive coding of conversation data with LLM coders")]
pub struct Cli {
    /// Directory holding dataset.json, codebooks/ and annotations/.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a CSV, TSV or JSON-lines export into a dataset file.
    Ingest(IngestArgs),
    /// Split a dataset into chunks.
    Segment(SegmentArgs),
    /// Run one approach or all of them.
    Run(RunArgs),
    /// Merge a responses file into a codebook.
    Aggregate(AggregateArgs),
    /// Render a codebook as a table or structured document.
    Export(ExportArgs),
    /// Code counts and final flag counts per approach.
    Report(ReportArgs),
    /// Serve the review API (and optionally the built review UI).
    Serve(ServeArgs),
    /// Reference data.
    Fixtures {
        #[command(subcommand)]
        command: FixturesCommand,
    },
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub path: PathBuf,
    #[arg(long)]
    pub base_year: Option<i32>,
    #[arg(long)]
    pub research_question: Option<String>,
    #[arg(long)]
    pub coding_notes: Option<String>,
    /// JSON metadata file; flags above override its fields.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Gap,
    Activity,
}

#[derive(Debug, Args, Clone)]
pub struct SegmentOpts {
    #[arg(long, value_enum, default_value = "gap")]
    pub method: MethodArg,
    #[arg(long = "min-gap-min", default_value_t = 180)]
    pub min_gap_min: i64,
    #[arg(long = "bandwidth-min", default_value_t = 60)]
    pub bandwidth_min: i64,
    #[arg(long = "min-chunk", default_value_t = 3)]
    pub min_chunk: usize,
    #[arg(long, default_value_t = 3)]
    pub context: usize,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub opts: SegmentOpts,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ApproachArg {
    All,
    Topic,
    Chunk,
    Item,
    Verb,
}

impl ApproachArg {
    pub fn approaches(self) -> Vec<Approach> {
        match self {
            ApproachArg::All => Approach::ALL.to_vec(),
            ApproachArg::Topic => vec![Approach::Topic],
            ApproachArg::Chunk => vec![Approach::Chunk],
            ApproachArg::Item => vec![Approach::Item],
            ApproachArg::Verb => vec![Approach::Verb],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Live,
    Replay,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderArg {
    Tfidf,
    Remote,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Approach as a positional argument; same as --approach.
    #[arg(value_enum)]
    pub which: Option<ApproachArg>,
    #[arg(long, value_enum)]
    pub approach: Option<ApproachArg>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Pre-computed chunks file; otherwise the dataset is segmented here.
    #[arg(long)]
    pub chunks: Option<PathBuf>,
    #[command(flatten)]
    pub segment: SegmentOpts,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write every exchange as a fixture into this directory.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Fixture directory for --backend replay.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Backend the replay fixtures were recorded from.
    #[arg(long, default_value = "live")]
    pub replay_source: String,
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,
    #[arg(long, value_enum, default_value = "on")]
    pub carry: OnOff,
    #[arg(long, default_value_t = qualcode_core::topic::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long = "top-k", default_value_t = qualcode_core::topic::DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = qualcode_core::topic::DEFAULT_OVERSIZE_RATIO)]
    pub oversize: f64,
    #[arg(long, value_enum, default_value = "tfidf")]
    pub embedder: EmbedderArg,
    /// Run directory, or a responses file (`*.json`) for a single approach.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Copy the codebooks into the workdir's codebooks/ after the run.
    #[arg(long)]
    pub install: bool,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    pub responses: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `.md` writes the table form, anything else the structured form.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub codebook: PathBuf,
    #[arg(long, default_value = "table")]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub approach: ApproachArg,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
    /// Fail instead of printing a draft.
    #[arg(long)]
    pub r#final: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum FixturesCommand {
    /// Install the reference dataset, codebooks, human labels and rater
    /// annotations into a directory usable as --workdir.
    Load {
        dir: PathBuf,
        /// Skip the rater annotations (fresh review).
        #[arg(long)]
        no_annotations: bool,
    },
}

/// Parses and runs; clap exits 2 on usage errors, runtime errors give 1.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(cli) {
        Ok(output) => {
            if !output.is_empty() {
                println!("{output}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Runs a parsed command and returns what it would print.
pub fn execute(cli: Cli) -> Result<String> {
    let wd = Workdir::new(&cli.workdir);
    match cli.command {
        Command::Ingest(a) => ingest(&wd, a),
        Command::Segment(a) => segment_cmd(&wd, a),
        Command::Run(a) => run(&wd, a),
        Command::Aggregate(a) => aggregate_cmd(&wd, a),
        Command::Export(a) => export(a),
        Command::Report(a) => report(&wd, a),
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(&wd, a.port, a.static_dir))?;
            Ok(String::new())
        }
        Command::Fixtures { command: FixturesCommand::Load { dir, no_annotations } } => load_fixtures(&dir, !no_annotations),
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(wd: &Workdir, path: Option<&Path>) -> Result<Dataset> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| wd.dataset_path());
    Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn ingest(wd: &Workdir, a: IngestArgs) -> Result<String> {
    let mut metadata = match &a.metadata {
        Some(p) => serde_json::from_str::<DatasetMetadata>(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => DatasetMetadata::default(),
    };
    if let Some(rq) = a.research_question {
        metadata.research_question = rq;
    }
    if let Some(notes) = a.coding_notes {
        metadata.coding_notes = notes;
    }
    let ingested = ingest_dataset(&a.path, a.base_year, metadata)?;
    for w in &ingested.warnings {
        tracing::warn!("{w}");
    }
    let out = a.out.unwrap_or_else(|| wd.dataset_path());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ingested.dataset.save(&out)?;
    Ok(format!("{} messages -> {}", ingested.dataset.len(), out.display()))
}

fn run_config(backend: &str, seed: Option<u64>, opts: &SegmentOpts) -> RunConfig {
    let mut config = RunConfig::new(backend, seed);
    config.segmentation.method = match opts.method {
        MethodArg::Gap => SegmentationMethod::GapThreshold,
        MethodArg::Activity => SegmentationMethod::SmoothedActivity,
    };
    config.segmentation.min_gap_minutes = opts.min_gap_min;
    config.segmentation.kernel_bandwidth_minutes = opts.bandwidth_min;
    config.segmentation.min_chunk_size = opts.min_chunk;
    config.context = opts.context;
    config
}

fn segment_cmd(wd: &Workdir, a: SegmentArgs) -> Result<String> {
    let ds = load_dataset(wd, a.dataset.as_deref())?;
    let set = chunk_dataset(&ds, &run_config("none", None, &a.opts))?;
    let out = a.out.unwrap_or_else(|| wd.root().join(qualcode_core::runner::CHUNKS_FILE));
    write_out(&out, &serde_json::to_string_pretty(&set)?)?;
    Ok(format!("{} chunks -> {}", set.chunks.len(), out.display()))
}

fn build_gateway(a: &RunArgs, transcript: Option<&Path>) -> Result<Gateway> {
    let backend: Arc<dyn ChatBackend> = match a.backend {
        BackendArg::Mock => Arc::new(MockBackend::new(a.seed.unwrap_or(0))),
        BackendArg::Live => Arc::new(LiveBackend::new(LiveConfig::from_env()?)?),
        BackendArg::Replay => {
            let dir = a.fixtures.as_ref().context("--backend replay needs --fixtures <dir>")?;
            Arc::new(ReplayBackend::new(FixtureStore::open(dir)?, a.replay_source.clone()))
        }
    };
    let sampling = Sampling { model: a.model.clone(), seed: a.seed, ..Sampling::default() };
    let mut gw = Gateway::new(backend, sampling);
    if let Some(path) = transcript {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        gw = gw.with_transcript(Arc::new(Transcript::to_file(path)?));
    }
    if let Some(dir) = &a.record {
        gw = gw.with_recorder(FixtureStore::open(dir)?);
    }
    Ok(gw)
}

fn backend_name(b: BackendArg) -> &'static str {
    match b {
        BackendArg::Live => "live",
        BackendArg::Replay => "replay",
        BackendArg::Mock => "mock",
    }
}

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

fn run(wd: &Workdir, a: RunArgs) -> Result<String> {
    let which = match (a.which, a.approach) {
        (Some(x), Some(y)) if x != y => bail!("conflicting approaches {x:?} and {y:?}"),
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => bail!("no approach given (use --approach all|topic|chunk|item|verb)"),
    };
    let approaches = which.approaches();
    let ds = load_dataset(wd, a.dataset.as_deref())?;
    let mut config = run_config(backend_name(a.backend), a.seed, &a.segment);
    config.carry = a.carry == OnOff::On;
    config.topic.distance_threshold = a.threshold;
    config.topic.top_k = a.top_k;
    config.topic.oversize_ratio = a.oversize;
    let embedder = match a.embedder {
        EmbedderArg::Tfidf => Embedder::Tfidf,
        EmbedderArg::Remote => {
            let e = RemoteEmbedder::new(LiveConfig::from_env()?)?;
            config.embedder = e.model().to_string();
            Embedder::Remote(e)
        }
    };

    let out = a.out.clone().unwrap_or_else(|| wd.root().join("run"));
    let single_file = approaches.len() == 1 && out.extension().is_some_and(|e| e == "json");
    if single_file {
        let gw = build_gateway(&a, None)?;
        let chunks = match &a.chunks {
            Some(p) => serde_json::from_str::<ChunkSet>(&fs::read_to_string(p)?)
                .with_context(|| format!("parsing {}", p.display()))?
                .chunks,
            None => chunk_dataset(&ds, &config)?.chunks,
        };
        let responses = run_approach(approaches[0], &ds, &chunks, &gw, &embedder, &config)?;
        responses.save(&out)?;
        let cb = aggregate(&responses, &ds);
        if a.install {
            write_out(&wd.codebook_path(cb.approach), &cb.to_json())?;
        }
        return Ok(format!("{}: {} codes; responses -> {}", cb.approach, cb.len(), out.display()));
    }
    if a.chunks.is_some() {
        bail!("--chunks applies to a single-approach run with a .json --out");
    }

    let transcript = out.join(TRANSCRIPT_FILE);
    let _ = fs::remove_file(&transcript);
    let gw = build_gateway(&a, Some(&transcript))?;
    let mut manifest = run_to_dir(&out, &ds, &approaches, &gw, &embedder, &config)?;
    let bytes = fs::read(&transcript).unwrap_or_default();
    manifest.artifacts.push(Artifact {
        kind: "transcript".into(),
        approach: None,
        path: TRANSCRIPT_FILE.into(),
        sha256: sha256_hex(&bytes),
    });
    manifest.save(&out)?;

    let mut lines = Vec::new();
    for approach in &approaches {
        let cb = Codebook::load(&out.join(qualcode_core::runner::codebook_path(*approach)))?;
        if a.install {
            write_out(&wd.codebook_path(*approach), &cb.to_json())?;
        }
        lines.push(format!("{}: {} codes", approach, cb.len()));
    }
    lines.push(format!("manifest -> {}", out.join(qualcode_core::runner::MANIFEST_FILE).display()));
    Ok(lines.join("\n"))
}

fn aggregate_cmd(wd: &Workdir, a: AggregateArgs) -> Result<String> {
    let responses = ResponsesFile::load(&a.responses)?;
    let ds = load_dataset(wd, a.dataset.as_deref())?;
    if qualcode_core::runner::dataset_digest(&ds) != responses.dataset_digest {
        bail!("responses were produced from a different dataset");
    }
    let cb = aggregate(&responses, &ds);
    let out = a.out.unwrap_or_else(|| wd.codebook_path(cb.approach));
    let format = if out.extension().is_some_and(|e| e == "md") { ExportFormat::Table } else { ExportFormat::Structured };
    write_out(&out, &export_codebook(&cb, format))?;
    Ok(format!("{}: {} codes -> {}", cb.approach, cb.len(), out.display()))
}

fn export(a: ExportArgs) -> Result<String> {
    let cb = Codebook::load(&a.codebook).with_context(|| format!("loading {}", a.codebook.display()))?;
    let format: ExportFormat = a.format.parse()?;
    let text = export_codebook(&cb, format);
    match a.out {
        Some(out) => {
            write_out(&out, &text)?;
            Ok(format!("{} codes -> {}", cb.len(), out.display()))
        }
        None => Ok(text),
    }
}

fn report(wd: &Workdir, a: ReportArgs) -> Result<String> {
    let all = wd.codebooks()?;
    let wanted = a.approach.approaches();
    let cbs: Vec<&Codebook> = wanted.iter().filter_map(|ap| all.get(ap)).collect();
    if cbs.is_empty() {
        bail!("no codebooks under {}", wd.root().join(workdir::CODEBOOKS_DIR).display());
    }
    let store = if wd.annotations_dir().exists() {
        PersistentStore::open(&wd.annotations_dir(), all.values())?.store().clone()
    } else {
        AnnotationStore::new().with_codebooks(all.values())
    };
    let report = if a.r#final { final_report(&cbs, &store)? } else { metrics_report(&cbs, &store) };
    Ok(match a.format {
        ReportFormat::Table => report.render_table(),
        ReportFormat::Json => serde_json::to_string_pretty(&report)?,
    })
}

/// Writes the reference data as a workdir. Returns rater tokens in the output.
pub fn load_fixtures(dir: &Path, with_annotations: bool) -> Result<String> {
    let wd = Workdir::new(dir);
    fs::create_dir_all(dir)?;
    let ds = fixtures::dataset()?;
    ds.save(&wd.dataset_path())?;
    let cbs = fixtures::codebooks(&ds)?;
    let mut lines = Vec::new();
    for cb in &cbs {
        write_out(&wd.codebook_path(cb.approach), &cb.to_json())?;
        lines.push(format!("{}: {} codes", cb.approach, cb.len()));
    }
    write_out(&wd.human_labels_path(), &serde_json::to_string_pretty(&fixtures::human_labels()?)?)?;
    let ann_dir = wd.annotations_dir();
    if ann_dir.exists() {
        fs::remove_dir_all(&ann_dir)?;
    }
    let mut store = PersistentStore::open(&ann_dir, cbs.iter())?;
    if with_annotations {
        for event in fixtures::annotation_events(store.store())? {
            store.apply(event)?;
        }
        store.snapshot()?;
        for rater in store.store().raters() {
            lines.push(format!("rater {rater} token {}", store.store().token(&rater).unwrap_or_default()));
        }
    }
    lines.push(format!("fixtures -> {}", dir.display()));
    Ok(lines.join("\n"))
}
