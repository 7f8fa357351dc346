//! Command-line front end: argument parsing, the TOML configuration file and
//! dispatch to the library modules.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, IsTerminal, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::assistant::{self, AnswerOptions, ChunkParams, Embedder, HashEmbedder, HttpEmbedder, IngestOptions, Memory, VectorStore};
use crate::chat::{ChatEndpoint, EchoEndpoint, HttpChatEndpoint};
use crate::deck::{self, CyclePlan, InputDeck};
use crate::microdose::{self, GainTable, LinearSpectrum, MicroOptions, QualityKernel, SiteGeometry, SumConvention};
use crate::plotsvg::{self, PlotFlags};
use crate::postproc::{self, DecryptOptions, FlukaData, TabRow, UtilityBackend, UtilityTable};
use crate::runner::{self, Engine, MockEngineSpec, RunConfig, ScoringCard};
use crate::stats;
use crate::workflow::{self, Approver, AutoApprove, Mode, OrchestratorOptions, ReviewGate, WorkflowConfig};

pub const EXIT_MODULE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error(transparent)]
    Deck(#[from] deck::DeckError),
    #[error(transparent)]
    Runner(#[from] runner::RunnerError),
    #[error(transparent)]
    Postproc(#[from] postproc::PostprocError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
    #[error(transparent)]
    Micro(#[from] microdose::MicroError),
    #[error(transparent)]
    Plot(#[from] plotsvg::PlotError),
    #[error(transparent)]
    Workflow(#[from] workflow::WorkflowError),
    #[error(transparent)]
    Assistant(#[from] assistant::AssistantError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            _ => EXIT_MODULE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mcforge", version, about = "Monte Carlo simulation workflow automation", arg_required_else_help = true)]
pub struct Cli {
    /// Emit the result record as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Mock,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    External,
}

impl From<BackendKind> for UtilityBackend {
    fn from(b: BackendKind) -> Self {
        match b {
            BackendKind::Mock => UtilityBackend::Mock,
            BackendKind::External => UtilityBackend::External,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Fill the template and write one input deck per cycle.
    Gen(GenArgs),
    /// Write job scripts and run them.
    Run(RunArgs),
    /// Convert binary outputs into text listings.
    Decrypt(DecryptArgs),
    /// Parse listings into a JSON data store.
    Store(StoreArgs),
    /// Uncertainty and energy statistics.
    #[command(subcommand)]
    Stats(StatsCmd),
    /// Microdosimetric spectra from an energy-deposition spectrum.
    Micro(MicroArgs),
    /// Plot every spectrum in a data store as SVG.
    Plot(PlotArgs),
    /// Run the whole pipeline.
    Workflow(WorkflowArgs),
    /// Question answering over a document collection.
    #[command(subcommand)]
    Assist(AssistCmd),
    #[command(hide = true)]
    MockEngine(MockEngineArgs),
    #[command(hide = true)]
    MockUtil(MockUtilArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Overrides the `seed` parameter.
    #[arg(long)]
    pub seed: Option<i64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Input decks; defaults to every `.inp` in the execution directory.
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub engine: Option<EngineKind>,
    #[arg(long)]
    pub executable: Option<String>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
    #[arg(long)]
    pub job_prefix: Option<String>,
    /// Execution directory.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecryptArgs {
    #[arg(long)]
    pub dir: Option<PathBuf>,
    /// Expected cycle files per unit; 0 skips the check.
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub output_base: Option<String>,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Listings; defaults to every `.lis` in `--dir`.
    pub files: Vec<PathBuf>,
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum StatsCmd {
    /// Primaries needed to reach a target uncertainty.
    Nps {
        #[arg(long)]
        current_u: f64,
        #[arg(long)]
        target_u: f64,
        #[arg(long)]
        nps: u64,
        #[arg(long, default_value_t = stats::DEFAULT_GRANULARITY)]
        granularity: u64,
    },
    /// Value-weighted average relative uncertainty of a spectrum.
    AvgUnc(SpectrumSource),
    /// Count-weighted mean bin energy of a spectrum.
    AvgEnergy(SpectrumSource),
}

#[derive(Debug, Args)]
pub struct SpectrumSource {
    /// A `_tab.lis` listing.
    #[arg(long, conflicts_with_all = ["store", "key"])]
    pub tab: Option<PathBuf>,
    /// A data store and the entry to read.
    #[arg(long, requires = "key")]
    pub store: Option<PathBuf>,
    #[arg(long, requires = "store")]
    pub key: Option<String>,
}

#[derive(Debug, Args)]
pub struct MicroArgs {
    #[command(flatten)]
    pub source: SpectrumSource,
    /// Site diameter, nm.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Mean chord length fraction.
    #[arg(long)]
    pub clf: Option<f64>,
    /// 1 applies the gain table.
    #[arg(long)]
    pub flag: Option<i32>,
    /// CSV of energy (GeV), gain pairs.
    #[arg(long)]
    pub gains: Option<PathBuf>,
    #[arg(long)]
    pub bins_per_decade: Option<usize>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub convention: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlagArgs {
    #[arg(long)]
    pub error_bars: bool,
    #[arg(long)]
    pub blocks: bool,
    #[arg(long)]
    pub loglog: bool,
    #[arg(long)]
    pub semilogx: bool,
    #[arg(long)]
    pub semilogy: bool,
}

impl FlagArgs {
    fn any(&self) -> bool {
        self.error_bars || self.blocks || self.loglog || self.semilogx || self.semilogy
    }

    fn flags(&self) -> PlotFlags {
        PlotFlags {
            plot_error_bars: self.error_bars,
            plot_blocks: self.blocks,
            log_scale: self.loglog,
            semilogx: self.semilogx,
            semilogy: self.semilogy,
        }
    }
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: FlagArgs,
}

#[derive(Debug, Args)]
pub struct WorkflowArgs {
    #[arg(long)]
    pub engine: Option<EngineKind>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub max_refinements: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the review pauses.
    #[arg(long)]
    pub auto_approve: bool,
    /// Let a chat model drive the pipeline through tool calls.
    #[arg(long)]
    pub llm: bool,
    #[arg(long)]
    pub llm_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
}

impl ValueEnum for Mode {
    fn value_variants<'a>() -> &'a [Self] {
        &[Mode::General, Mode::Microdosimetry]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Mode::General => "general",
            Mode::Microdosimetry => "microdosimetry",
        }))
    }
}

#[derive(Debug, Subcommand)]
pub enum AssistCmd {
    /// Add new documents to the vector store.
    Ingest {
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Ask a question; without `--question` an interactive session starts.
    Ask {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Answer with the prompt instead of calling a model.
        #[arg(long)]
        echo: bool,
        #[arg(long)]
        chat_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct MockEngineArgs {
    pub input: PathBuf,
    /// Mock spectrum parameters as JSON.
    #[arg(long)]
    pub spec: Option<String>,
}

#[derive(Debug, Args)]
pub struct MockUtilArgs {
    /// Scoring card keyword the utility handles, e.g. USRBDX.
    pub card: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub template: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub engine: Option<EngineKind>,
    pub executable: Option<String>,
    pub max_parallel: Option<usize>,
    pub job_script_prefix: Option<String>,
    pub mock: Option<MockEngineSpec>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecryptSection {
    pub backend: Option<BackendKind>,
    pub output_base: Option<String>,
    /// Utility name -> command line.
    #[serde(default)]
    pub utilities: BTreeMap<String, String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSection {
    pub prefix: Option<String>,
    pub cycles: Option<usize>,
    pub uncertainty_target: Option<f64>,
    pub monitor_unit: Option<u8>,
    pub mode: Option<Mode>,
    pub max_refinements: Option<usize>,
    pub nps_parameter: Option<String>,
    pub granularity: Option<u64>,
    pub auto_approve: Option<bool>,
    pub plot: Option<PlotFlags>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroSection {
    pub dt: Option<f64>,
    pub clf: Option<f64>,
    pub flag: Option<i32>,
    pub gains: Option<PathBuf>,
    pub bins_per_decade: Option<usize>,
    pub kernel: Option<QualityKernel>,
    pub convention: Option<SumConvention>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    pub url: Option<String>,
    pub model: Option<String>,
    pub step_budget: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssistantSection {
    pub docs: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub chunk_size: Option<usize>,
    pub overlap: Option<usize>,
    pub k: Option<usize>,
    pub pdf_command: Option<String>,
    /// `hash` or `http`.
    pub embedder: Option<String>,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
    pub embed_dim: Option<usize>,
    pub chat_url: Option<String>,
    pub chat_model: Option<String>,
}

/// The configuration file. Relative paths are resolved against its directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub decrypt: DecryptSection,
    #[serde(default)]
    pub workflow: WorkflowSection,
    #[serde(default)]
    pub micro: MicroSection,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub assistant: AssistantSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.template,
            &mut cfg.paths.params,
            &mut cfg.paths.output_dir,
            &mut cfg.micro.gains,
            &mut cfg.assistant.docs,
            &mut cfg.assistant.store,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn output_dir(&self) -> PathBuf {
        self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn utilities(&self) -> Result<UtilityTable, CliError> {
        let mut table = UtilityTable::default();
        for (name, cmd) in &self.decrypt.utilities {
            if !table.set_command(name, cmd.clone()) {
                return Err(CliError::Usage(format!("unknown utility `{name}` in [decrypt.utilities]")));
            }
        }
        Ok(table)
    }

    fn engine(&self, flag: Option<EngineKind>) -> Engine {
        match flag.or(self.run.engine).unwrap_or(EngineKind::Mock) {
            EngineKind::Mock => Engine::Mock(self.run.mock.clone().unwrap_or_default()),
            EngineKind::External => Engine::External,
        }
    }

    fn backend(&self, flag: Option<BackendKind>, engine: &Engine) -> UtilityBackend {
        match flag.or(self.decrypt.backend) {
            Some(b) => b.into(),
            None if matches!(engine, Engine::Mock(_)) => UtilityBackend::Mock,
            None => UtilityBackend::External,
        }
    }

    fn geometry(&self, dt: Option<f64>, clf: Option<f64>, flag: Option<i32>) -> Result<SiteGeometry, CliError> {
        Ok(SiteGeometry::new(
            dt.or(self.micro.dt).unwrap_or(50.0),
            clf.or(self.micro.clf).unwrap_or(2.0 / 3.0),
            flag.or(self.micro.flag).unwrap_or(0),
        )?)
    }

    fn gains(&self, flag: Option<&PathBuf>) -> Result<Option<GainTable>, CliError> {
        flag.or(self.micro.gains.as_ref()).map(|p| load_gains(p)).transpose()
    }
}

/// A two-column CSV (energy in GeV, gain); a non-numeric first row is a header.
pub fn load_gains(path: &Path) -> Result<GainTable, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("gain table {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Usage(format!("gain table {}: {e}", path.display())))?;
        let parsed: Option<(f64, f64)> = match (rec.get(0), rec.get(1)) {
            (Some(a), Some(b)) => a.parse().ok().zip(b.parse().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => points.push(p),
            None if i == 0 => continue,
            None => {
                return Err(CliError::Usage(format!(
                    "gain table {} line {}: expected two numbers",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(GainTable::new(points)?)
}

fn require<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config)")))
}

fn list_dir(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn tab_rows(src: &SpectrumSource) -> Result<Vec<TabRow>, CliError> {
    match (&src.tab, &src.store, &src.key) {
        (Some(tab), _, _) => {
            let text = fs::read_to_string(tab).map_err(io_err(tab))?;
            Ok(postproc::parse_tab(&text)?.rows)
        }
        (None, Some(store), Some(key)) => {
            let data = FlukaData::load(store)?;
            let entry = data
                .get(key)
                .ok_or_else(|| CliError::Usage(format!("{} has no entry `{key}`", store.display())))?;
            Ok(entry.rows().to_vec())
        }
        _ => Err(CliError::Usage("give --tab FILE or --store FILE --key NAME".into())),
    }
}

/// Result of one command: a JSON record and its human-readable form.
pub struct Output {
    pub record: Value,
    pub text: String,
}

fn out(record: Value, text: impl Into<String>) -> Output {
    Output {
        record,
        text: text.into(),
    }
}

fn paths_text(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n")
}

/// Prompts on the terminal; without one every gate is approved.
struct TerminalApprover;

impl Approver for TerminalApprover {
    fn approve(&mut self, gate: ReviewGate, bundle: &Path, items: &[PathBuf]) -> bool {
        if !io::stdin().is_terminal() {
            return true;
        }
        eprintln!("{gate}: {} item(s), see {}", items.len(), bundle.display());
        for item in items {
            eprintln!("  {}", item.display());
        }
        eprint!("continue? [y/N] ");
        let mut line = String::new();
        if io::stdin().lock().read_line(&mut line).is_err() {
            return false;
        }
        matches!(line.trim(), "y" | "Y" | "yes")
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn seed_from(params: &deck::ParameterSet, flag: Option<i64>) -> Result<i64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match params.get("seed") {
        Some(v) => v
            .trim()
            .parse::<f64>()
            .map(|x| x as i64)
            .map_err(|_| CliError::Usage(format!("seed parameter `{v}` is not a number"))),
        None => Ok(1),
    }
}

pub fn workflow_config(cfg: &Config, args: &WorkflowArgs) -> Result<WorkflowConfig, CliError> {
    let template = require(cfg.paths.template.clone(), "template path")?;
    let params = require(cfg.paths.params.clone(), "params path")?;
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.output_dir());
    let mut wf = WorkflowConfig::new(template, params, out_dir);
    let w = &cfg.workflow;
    if let Some(p) = &w.prefix {
        wf.prefix = p.clone();
    }
    wf.cycles = args.cycles.or(w.cycles).unwrap_or(wf.cycles);
    wf.uncertainty_target = args.target.or(w.uncertainty_target).unwrap_or(wf.uncertainty_target);
    wf.mode = args.mode.or(w.mode).unwrap_or(wf.mode);
    wf.monitor_unit = w
        .monitor_unit
        .unwrap_or(if wf.mode == Mode::Microdosimetry { 17 } else { wf.monitor_unit });
    wf.max_refinements = args.max_refinements.or(w.max_refinements).unwrap_or(wf.max_refinements);
    if let Some(n) = &w.nps_parameter {
        wf.nps_parameter = n.clone();
    }
    wf.granularity = w.granularity.unwrap_or(wf.granularity);
    if let Some(f) = w.plot {
        wf.plot_flags = f;
    }
    wf.engine = cfg.engine(args.engine);
    wf.utility_backend = cfg.backend(None, &wf.engine);
    wf.utilities = cfg.utilities()?;
    if let Some(b) = &cfg.decrypt.output_base {
        wf.output_base = b.clone();
    }
    if let Some(e) = &cfg.run.executable {
        wf.executable = e.clone();
    }
    if let Some(p) = &cfg.run.job_script_prefix {
        wf.job_script_prefix = p.clone();
    }
    wf.max_parallel = cfg.run.max_parallel;
    wf.geometry = cfg.geometry(None, None, None)?;
    wf.gains = cfg.gains(None)?;
    let m = &cfg.micro;
    wf.micro = MicroOptions {
        bins_per_decade: m.bins_per_decade.unwrap_or(microdose::DEFAULT_BINS_PER_DECADE),
        kernel: m.kernel.unwrap_or(QualityKernel::Icru40),
        convention: m.convention.unwrap_or_default(),
    };
    Ok(wf)
}

fn embedder_for(cfg: &AssistantSection) -> Result<Box<dyn Embedder>, CliError> {
    match cfg.embedder.as_deref().unwrap_or("hash") {
        "hash" => Ok(Box::new(HashEmbedder::default())),
        "http" => Ok(Box::new(HttpEmbedder::from_env(
            require(cfg.embed_url.clone(), "assistant.embed_url")?,
            cfg.embed_model.clone().unwrap_or_else(|| "text-embedding-3-small".into()),
            cfg.embed_dim.unwrap_or(1536),
        ))),
        other => Err(CliError::Usage(format!("unknown embedder `{other}` (hash or http)"))),
    }
}

fn execute(cli: &Cli) -> Result<Output, CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Cmd::Gen(a) => {
            let template_path = require(a.template.clone().or(cfg.paths.template.clone()), "--template")?;
            let params_path = require(a.params.clone().or(cfg.paths.params.clone()), "--params")?;
            let template = InputDeck::read(&template_path)?;
            let params = deck::load_parameters(&params_path)?;
            let plan = CyclePlan {
                prefix: a.prefix.clone().or(cfg.workflow.prefix.clone()).unwrap_or_else(|| "example".into()),
                count: a.cycles.or(cfg.workflow.cycles).unwrap_or(5),
                base_seed: seed_from(&params, a.seed)?,
                output_dir: a.out.clone().unwrap_or_else(|| cfg.output_dir()),
            };
            let files = deck::generate_cycles(&template, &params, &plan)?;
            let unused = deck::unused_parameters(&template, &params);
            let text = paths_text(&files);
            Ok(out(json!({ "files": files, "unused_parameters": unused }), text))
        }
        Cmd::Run(a) => {
            let dir = a.dir.clone().unwrap_or_else(|| cfg.output_dir());
            let inputs = if a.inputs.is_empty() { list_dir(&dir, "inp")? } else { a.inputs.clone() };
            if inputs.is_empty() {
                return Err(CliError::Usage(format!("no input decks given and none in {}", dir.display())));
            }
            let run_cfg = RunConfig {
                executable: a
                    .executable
                    .clone()
                    .or(cfg.run.executable.clone())
                    .unwrap_or_else(|| "rfluka -N0 -M1".into()),
                execution_dir: dir,
                job_script_prefix: a
                    .job_prefix
                    .clone()
                    .or(cfg.run.job_script_prefix.clone())
                    .unwrap_or_else(|| runner::DEFAULT_JOB_PREFIX.into()),
                max_parallel: a.max_parallel.or(cfg.run.max_parallel).unwrap_or(inputs.len()),
                engine: cfg.engine(a.engine),
            };
            let jobs = runner::emit_job_scripts(&inputs, &run_cfg)?;
            let summary = runner::execute_all(&jobs, &run_cfg)?;
            let ok = summary.succeeded();
            let text = format!(
                "{} job(s), {} succeeded, simulation time {}",
                summary.records.len(),
                summary.records.iter().filter(|r| r.status == runner::RunStatus::Succeeded).count(),
                summary.wall_time_text()
            );
            let record = json!({
                "records": summary.records,
                "total_wall_time": summary.wall_time_text(),
                "succeeded": ok,
            });
            if !ok {
                return Err(CliError::Runner(runner::RunnerError::InvalidSpec(format!(
                    "{text}; see the job logs"
                ))));
            }
            Ok(out(record, text))
        }
        Cmd::Decrypt(a) => {
            let dir = a.dir.clone().unwrap_or_else(|| cfg.output_dir());
            let engine = cfg.engine(None);
            let opts = DecryptOptions {
                output_base: a
                    .output_base
                    .clone()
                    .or(cfg.decrypt.output_base.clone())
                    .unwrap_or_else(|| postproc::DEFAULT_OUTPUT_BASE.into()),
                backend: cfg.backend(a.backend, &engine),
            };
            let listings = postproc::decrypt_all(&dir, &cfg.utilities()?, a.cycles.unwrap_or(0), &opts)?;
            Ok(out(json!({ "listings": listings }), paths_text(&listings)))
        }
        Cmd::Store(a) => {
            let dir = a.dir.clone().unwrap_or_else(|| cfg.output_dir());
            let files = if a.files.is_empty() { list_dir(&dir, "lis")? } else { a.files.clone() };
            let json_path = a.out.clone().unwrap_or_else(|| dir.join(postproc::STORE_FILE));
            let built = postproc::build_store(&files, &json_path)?;
            for w in &built.warnings {
                eprintln!("warning: {w}");
            }
            let text = format!("{} entries -> {}", built.data.files.len(), json_path.display());
            Ok(out(
                json!({ "store": json_path, "entries": built.data.files.keys().collect::<Vec<_>>(), "warnings": built.warnings }),
                text,
            ))
        }
        Cmd::Stats(s) => match s {
            StatsCmd::Nps {
                current_u,
                target_u,
                nps,
                granularity,
            } => {
                let est = stats::required_nps(*current_u, *target_u, *nps, *granularity)?;
                Ok(out(serde_json::to_value(est).expect("serializes"), est.required_nps.to_string()))
            }
            StatsCmd::AvgUnc(src) => {
                let report = stats::average_uncertainty(&tab_rows(src)?)?;
                Ok(out(serde_json::to_value(report).expect("serializes"), report.average_uncertainty.to_string()))
            }
            StatsCmd::AvgEnergy(src) => {
                let triples: Vec<(f64, f64, f64)> = tab_rows(src)?.iter().map(|r| (r.elow, r.ehigh, r.value)).collect();
                let e = stats::average_energy(&triples)?;
                Ok(out(json!({ "average_energy_gev": e }), e.to_string()))
            }
        },
        Cmd::Micro(a) => {
            let rows = tab_rows(&a.source)?;
            let geom = cfg.geometry(a.dt, a.clf, a.flag)?;
            let gains = cfg.gains(a.gains.as_ref())?;
            let bpd = a
                .bins_per_decade
                .or(cfg.micro.bins_per_decade)
                .unwrap_or(microdose::DEFAULT_BINS_PER_DECADE);
            let kernel = match &a.kernel {
                Some(k) => QualityKernel::from_id(k)?,
                None => cfg.micro.kernel.unwrap_or(QualityKernel::Icru40),
            };
            let convention = match a.convention.as_deref() {
                Some("weighted") => SumConvention::Weighted,
                Some("appendix-literal-sums") => SumConvention::AppendixLiteralSums,
                Some(other) => {
                    return Err(CliError::Usage(format!(
                        "unknown convention `{other}` (weighted or appendix-literal-sums)"
                    )))
                }
                None => cfg.micro.convention.unwrap_or_default(),
            };
            let out_dir = a.out.clone().unwrap_or_else(|| cfg.output_dir());
            fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
            let log = microdose::rebin_energy_spectrum(&LinearSpectrum::from_rows(&rows)?, &geom, gains.as_ref(), bpd)?;
            log.save(&out_dir.join(microdose::LOG_DATA_JSON))?;
            let spectra = microdose::compute_spectra(&log, kernel, convention)?;
            let files = microdose::emit_results(&spectra, &out_dir)?;
            let s = spectra.summary();
            let text = format!(
                "yF = {:.4} keV/um\nyD = {:.4} keV/um\nQ = {:.4} +/- {:.4}",
                s.y_f, s.y_d, s.q_avg, s.sigma_q
            );
            Ok(out(json!({ "summary": s, "files": files }), text))
        }
        Cmd::Plot(a) => {
            let dir = cfg.output_dir();
            let store = a.store.clone().unwrap_or_else(|| dir.join(postproc::STORE_FILE));
            let out_dir = a.out.clone().unwrap_or_else(|| store.parent().unwrap_or(Path::new(".")).to_path_buf());
            let flags = if a.flags.any() {
                a.flags.flags()
            } else {
                cfg.workflow.plot.unwrap_or_default()
            };
            let data = FlukaData::load(&store)?;
            let plots = plotsvg::plot_store(&data, flags, &out_dir)?;
            Ok(out(json!({ "plots": plots }), paths_text(&plots)))
        }
        Cmd::Workflow(a) => {
            let wf = workflow_config(&cfg, a)?;
            let auto = a.auto_approve || cfg.workflow.auto_approve.unwrap_or(false);
            let mut approver: Box<dyn Approver> = if auto { Box::new(AutoApprove) } else { Box::new(TerminalApprover) };
            let outcome = if a.llm {
                let url = require(a.llm_url.clone().or(cfg.llm.url.clone()), "--llm-url")?;
                let mut endpoint = HttpChatEndpoint::from_env(url);
                let mut opts = OrchestratorOptions::default();
                if let Some(m) = a.model.clone().or(cfg.llm.model.clone()) {
                    opts.model = m;
                }
                opts.step_budget = cfg.llm.step_budget.unwrap_or(opts.step_budget);
                workflow::orchestrate_llm(wf, &mut endpoint, approver.as_mut(), &opts)?
            } else {
                workflow::run_workflow(wf, approver.as_mut())?
            };
            let steps: Vec<String> = outcome.state.trace.iter().map(|e| e.step.to_string()).collect();
            let mut text = format!(
                "{} steps: {}\nrefinements: {}\n",
                steps.len(),
                steps.join(" -> "),
                outcome.state.refinement_count
            );
            if let Some(r) = outcome.state.last_report {
                text.push_str(&format!("average uncertainty: {} %\n", r.average_uncertainty));
            }
            if let Some(s) = &outcome.artifacts.store {
                text.push_str(&format!("store: {}", s.display()));
            }
            Ok(out(serde_json::to_value(&outcome).expect("serializes"), text))
        }
        Cmd::Assist(a) => assist(&cfg, a),
        Cmd::MockEngine(a) => {
            let spec: MockEngineSpec = match &a.spec {
                Some(s) => serde_json::from_str(s).map_err(|e| CliError::Usage(format!("--spec: {e}")))?,
                None => MockEngineSpec::default(),
            };
            let dir = std::env::current_dir().map_err(io_err(Path::new(".")))?;
            let files = runner::mock_run_input(&a.input, &spec, &dir)?;
            Ok(out(json!({ "files": files }), paths_text(&files)))
        }
        Cmd::MockUtil(a) => {
            let card = ScoringCard::from_keyword(&a.card.to_ascii_uppercase())
                .ok_or_else(|| CliError::Usage(format!("unknown scoring card `{}`", a.card)))?;
            let mut stdin = String::new();
            io::stdin().read_to_string(&mut stdin).map_err(io_err(Path::new("<stdin>")))?;
            let dir = std::env::current_dir().map_err(io_err(Path::new(".")))?;
            match postproc::mock_utility(card, &stdin, &dir) {
                Ok(stdout) => Ok(out(json!({ "card": card.keyword() }), stdout.trim_end().to_string())),
                Err(e) => Err(CliError::Usage(e.trim().to_string())),
            }
        }
    }
}

fn assist(cfg: &Config, cmd: &AssistCmd) -> Result<Output, CliError> {
    let a = &cfg.assistant;
    match cmd {
        AssistCmd::Ingest { docs, store } => {
            let docs = require(docs.clone().or(a.docs.clone()), "--docs")?;
            let store = require(store.clone().or(a.store.clone()), "--store")?;
            let mut embedder = embedder_for(a)?;
            let defaults = ChunkParams::default();
            let opts = IngestOptions {
                chunking: ChunkParams {
                    size: a.chunk_size.unwrap_or(defaults.size),
                    overlap: a.overlap.unwrap_or(defaults.overlap),
                },
                pdf_command: a.pdf_command.clone(),
            };
            let counts = assistant::ingest(&docs, &store, embedder.as_mut(), &opts)?;
            let text = format!("{} new document(s), {} new chunk(s)", counts.new_docs, counts.new_chunks);
            Ok(out(serde_json::to_value(counts).expect("serializes"), text))
        }
        AssistCmd::Ask {
            store,
            question,
            k,
            echo,
            chat_url,
            model,
        } => {
            let store_dir = require(store.clone().or(a.store.clone()), "--store")?;
            let vs = VectorStore::open(&store_dir)?;
            let mut embedder = embedder_for(a)?;
            let mut endpoint: Box<dyn ChatEndpoint> = if *echo {
                Box::new(EchoEndpoint::default())
            } else {
                Box::new(HttpChatEndpoint::from_env(require(
                    chat_url.clone().or(a.chat_url.clone()),
                    "--chat-url or --echo",
                )?))
            };
            let mut opts = AnswerOptions::default();
            opts.k = k.or(a.k).unwrap_or(opts.k);
            if let Some(m) = model.clone().or(a.chat_model.clone()) {
                opts.model = m;
            }
            let mut memory = Memory::default();
            match question {
                Some(q) => {
                    let ans = assistant::answer(q, &vs, embedder.as_mut(), endpoint.as_mut(), &mut memory, &opts)?;
                    let text = ans.text.clone();
                    Ok(out(serde_json::to_value(ans).expect("serializes"), text))
                }
                None => {
                    let stdin = io::stdin();
                    let mut answers = Vec::new();
                    loop {
                        eprint!("> ");
                        let mut line = String::new();
                        if stdin.lock().read_line(&mut line).map_err(io_err(Path::new("<stdin>")))? == 0 {
                            break;
                        }
                        let q = line.trim();
                        if q.is_empty() {
                            continue;
                        }
                        if matches!(q, "exit" | "quit") {
                            break;
                        }
                        let ans = assistant::answer(q, &vs, embedder.as_mut(), endpoint.as_mut(), &mut memory, &opts)?;
                        println!("{}\n", ans.text);
                        answers.push(ans);
                    }
                    Ok(out(json!({ "exchanges": memory.exchanges }), String::new()))
                }
            }
        }
    }
}

/// Parse `args` (including the program name), run and return the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(o) => {
            let mut stdout = io::stdout().lock();
            let _ = if cli.json {
                writeln!(stdout, "{}", o.record)
            } else if o.text.is_empty() {
                Ok(())
            } else {
                writeln!(stdout, "{}", o.text)
            };
            0
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            if cli.json {
                println!("{}", json!({ "error": msg, "exit_code": e.exit_code() }));
            }
            eprintln!("error: {msg}");
            e.exit_code()
        }
    }
}
