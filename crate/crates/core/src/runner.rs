//! Job scripts, bounded parallel execution and the mock simulation engine.
//!
//! The mock engine stands in for the transport code: it reads the START and
//! RANDOMIZ cards and the scoring cards of a deck and writes one binary
//! container per scoring unit, named the way a single-cycle run names them
//! (`example_01.inp` -> `example_01001_fort.46`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deck::{DeckError, InputDeck};
use crate::postproc::TabRow;

pub const DEFAULT_JOB_PREFIX: &str = "AutoFLUKA_job";
/// Seed used when a deck has no RANDOMIZ card.
pub const DEFAULT_SEED: u64 = 54_217_137;

const MAGIC: &[u8; 4] = b"MCFK";
const CONTAINER_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("cannot launch executable `{path}`: not found")]
    Spawn { path: String },
    #[error("deck has no START card with a primaries count")]
    MissingStartCard,
    #[error("max_parallel must be at least 1")]
    InvalidParallelism,
    #[error("mock engine spec invalid: {0}")]
    InvalidSpec(String),
    #[error("malformed container {context}: {reason}")]
    Container { context: String, reason: String },
    #[error(transparent)]
    Deck(#[from] DeckError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoringCard {
    Usrbdx,
    Usrtrack,
    Usrbin,
    Detect,
    Resnuclei,
    Usryield,
}

impl ScoringCard {
    pub const ALL: [ScoringCard; 6] = [
        ScoringCard::Usrbdx,
        ScoringCard::Usrtrack,
        ScoringCard::Usrbin,
        ScoringCard::Detect,
        ScoringCard::Resnuclei,
        ScoringCard::Usryield,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            ScoringCard::Usrbdx => "USRBDX",
            ScoringCard::Usrtrack => "USRTRACK",
            ScoringCard::Usrbin => "USRBIN",
            ScoringCard::Detect => "DETECT",
            ScoringCard::Resnuclei => "RESNUCLE",
            ScoringCard::Usryield => "USRYIELD",
        }
    }

    pub fn from_keyword(keyword: &str) -> Option<Self> {
        let upper = keyword.to_ascii_uppercase();
        // RESNUCLEi is commonly written with its trailing lowercase i.
        let upper = upper.strip_suffix('I').filter(|s| *s == "RESNUCLE").unwrap_or(&upper);
        Self::ALL.into_iter().find(|c| c.keyword() == upper)
    }

    fn code(self) -> u8 {
        Self::ALL.iter().position(|c| *c == self).unwrap() as u8
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ScoringCard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringUnit {
    pub unit: u8,
    pub card: ScoringCard,
    pub detector: String,
}

/// Output units declared by the deck's scoring cards. DETECT always writes to
/// unit 17; RESNUCLEi carries its unit in WHAT(2), the others in WHAT(3).
/// Continuation cards (SDUM `&`) are skipped.
pub fn scoring_units(deck: &InputDeck) -> Vec<ScoringUnit> {
    let mut units: Vec<ScoringUnit> = Vec::new();
    for card in deck.cards() {
        let Some(kind) = ScoringCard::from_keyword(&card.keyword) else {
            continue;
        };
        if card.sdum.as_deref() == Some("&") {
            continue;
        }
        let unit = match kind {
            ScoringCard::Detect => Some(17.0),
            ScoringCard::Resnuclei => card.what_f64(2),
            _ => card.what_f64(3),
        };
        let Some(unit) = unit.map(|u| u.abs().round()) else {
            continue;
        };
        if !(17.0..=99.0).contains(&unit) {
            continue;
        }
        let unit = unit as u8;
        if units.iter().any(|u| u.unit == unit) {
            continue;
        }
        units.push(ScoringUnit {
            unit,
            card: kind,
            detector: card.sdum.clone().unwrap_or_else(|| format!("det{unit}")),
        });
    }
    units
}

/// One scoring unit's result for one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct MockContainer {
    pub card: ScoringCard,
    pub unit: u8,
    pub primaries: u64,
    pub detector: String,
    pub rows: Vec<TabRow>,
}

impl MockContainer {
    /// `MCFK`, version byte, card code, unit, primaries (u64), detector name
    /// (u16 length + bytes), bin count (u32), then `(elow, ehigh, value, err%)`
    /// per bin as little-endian f64.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.detector.len() + 32 * self.rows.len());
        out.extend_from_slice(MAGIC);
        out.push(CONTAINER_VERSION);
        out.push(self.card.code());
        out.push(self.unit);
        out.extend_from_slice(&self.primaries.to_le_bytes());
        out.extend_from_slice(&(self.detector.len() as u16).to_le_bytes());
        out.extend_from_slice(self.detector.as_bytes());
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        for r in &self.rows {
            for v in [r.elow, r.ehigh, r.value, r.err_pct] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], context: &str) -> Result<Self, RunnerError> {
        let bad = |reason: &str| RunnerError::Container {
            context: context.to_string(),
            reason: reason.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u8().ok_or_else(|| bad("truncated header"))?;
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let card = cur
            .u8()
            .and_then(ScoringCard::from_code)
            .ok_or_else(|| bad("unknown card code"))?;
        let unit = cur.u8().ok_or_else(|| bad("truncated header"))?;
        let primaries = cur.u64().ok_or_else(|| bad("truncated header"))?;
        let name_len = cur.u16().ok_or_else(|| bad("truncated header"))? as usize;
        let detector = String::from_utf8(cur.take(name_len).ok_or_else(|| bad("truncated name"))?.to_vec())
            .map_err(|_| bad("detector name is not UTF-8"))?;
        let n = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = [0.0; 4];
            for slot in &mut v {
                *slot = cur.f64().ok_or_else(|| bad("truncated bin table"))?;
            }
            rows.push(TabRow::new(v[0], v[1], v[2], v[3]));
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(MockContainer {
            card,
            unit,
            primaries,
            detector,
            rows,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(slice)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Shape of the pseudo-spectrum produced by the mock engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockEngineSpec {
    /// Peak of the Gaussian spectral shape, GeV.
    pub peak_energy: f64,
    /// Standard deviation relative to the peak.
    pub relative_width: f64,
    pub bins: usize,
    /// Expected scored contributions per primary, spread over the bins.
    pub efficiency: f64,
}

impl Default for MockEngineSpec {
    fn default() -> Self {
        MockEngineSpec {
            peak_energy: 1.0e-3,
            relative_width: 0.3,
            bins: 100,
            efficiency: 1.0e-3,
        }
    }
}

impl MockEngineSpec {
    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.bins < 2 {
            return Err(RunnerError::InvalidSpec("bins must be at least 2".into()));
        }
        if !(self.relative_width > 0.0) {
            return Err(RunnerError::InvalidSpec("relative_width must be positive".into()));
        }
        if !(self.peak_energy > 0.0) || !(self.efficiency > 0.0) {
            return Err(RunnerError::InvalidSpec("peak_energy and efficiency must be positive".into()));
        }
        Ok(())
    }

    /// Bin edges spanning `peak * [max(1 - 4w, 0.01), 1 + 4w]`, linearly spaced.
    pub fn edges(&self) -> Vec<f64> {
        let lo = self.peak_energy * (1.0 - 4.0 * self.relative_width).max(0.01);
        let hi = self.peak_energy * (1.0 + 4.0 * self.relative_width);
        let step = (hi - lo) / self.bins as f64;
        (0..=self.bins).map(|k| lo + step * k as f64).collect()
    }

    /// Normalized Gaussian bin probabilities.
    pub fn shape(&self) -> Vec<f64> {
        let edges = self.edges();
        let sigma = self.relative_width * self.peak_energy;
        let raw: Vec<f64> = edges
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                (-0.5 * ((mid - self.peak_energy) / sigma).powi(2)).exp() * (w[1] - w[0])
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }

    /// Per-bin relative error in percent for a run of `nps` primaries.
    pub fn bin_errors(&self, nps: u64) -> Vec<f64> {
        self.shape()
            .into_iter()
            .map(|p| {
                let expected = nps as f64 * self.efficiency * p;
                if expected > 0.0 {
                    (100.0 / expected.sqrt()).min(100.0)
                } else {
                    100.0
                }
            })
            .collect()
    }

    /// Noise-free average uncertainty after merging `cycles` runs of
    /// `nps_per_cycle` primaries.
    pub fn predicted_average_uncertainty(&self, nps_per_cycle: u64, cycles: usize) -> f64 {
        let shape = self.shape();
        let errs = self.bin_errors(nps_per_cycle);
        let scale = (cycles.max(1) as f64).sqrt();
        shape.iter().zip(&errs).map(|(p, e)| p * e / scale).sum::<f64>() / shape.iter().sum::<f64>()
    }

    /// The efficiency that makes `predicted_average_uncertainty` equal
    /// `target_pct` (bisection in log-efficiency).
    pub fn with_average_uncertainty(&self, target_pct: f64, nps_per_cycle: u64, cycles: usize) -> Self {
        let mut lo = -30.0f64;
        let mut hi = 30.0f64;
        let at = |log_eff: f64| MockEngineSpec {
            efficiency: log_eff.exp(),
            ..self.clone()
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if at(mid).predicted_average_uncertainty(nps_per_cycle, cycles) > target_pct {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    }
}

fn deck_seed(deck: &InputDeck) -> u64 {
    deck.find_card("RANDOMIZ")
        .and_then(|c| c.what_f64(2))
        .map(|s| s.abs().round() as u64)
        .unwrap_or(DEFAULT_SEED)
}

fn deck_primaries(deck: &InputDeck) -> Result<u64, RunnerError> {
    deck.find_card("START")
        .and_then(|c| c.what_f64(1))
        .filter(|n| *n >= 1.0)
        .map(|n| n.round() as u64)
        .ok_or(RunnerError::MissingStartCard)
}

/// Simulate every scoring unit of `deck`; returns encoded containers by unit.
pub fn mock_simulate(deck: &InputDeck, spec: &MockEngineSpec) -> Result<BTreeMap<u8, Vec<u8>>, RunnerError> {
    spec.validate()?;
    let primaries = deck_primaries(deck)?;
    let seed = deck_seed(deck);
    let edges = spec.edges();
    let shape = spec.shape();
    let errors = spec.bin_errors(primaries);
    let mut out = BTreeMap::new();
    for su in scoring_units(deck) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ su.unit as u64);
        let rows = shape
            .iter()
            .zip(&errors)
            .enumerate()
            .map(|(j, (p, err))| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let value = spec.efficiency * p * (1.0 + z * err / 100.0).max(0.0);
                TabRow::new(edges[j], edges[j + 1], value, *err)
            })
            .collect();
        let container = MockContainer {
            card: su.card,
            unit: su.unit,
            primaries,
            detector: su.detector,
            rows,
        };
        out.insert(su.unit, container.encode());
    }
    Ok(out)
}

/// Output file name a single-cycle run of `input` writes for `unit`.
pub fn output_file_name(input: &Path, unit: u8) -> String {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    format!("{stem}001_fort.{unit:02}")
}

/// Run the mock engine on an input file, writing containers into `dir`.
pub fn mock_run_input(input: &Path, spec: &MockEngineSpec, dir: &Path) -> Result<Vec<PathBuf>, RunnerError> {
    let deck = InputDeck::read(input)?;
    let outputs = mock_simulate(&deck, spec)?;
    let mut written = Vec::new();
    for (unit, bytes) in outputs {
        let path = dir.join(output_file_name(input, unit));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Engine {
    External,
    Mock(MockEngineSpec),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Executable or command template; `{input}` and `{stem}` are replaced,
    /// otherwise the input path is appended.
    pub executable: String,
    pub execution_dir: PathBuf,
    pub job_script_prefix: String,
    pub max_parallel: usize,
    pub engine: Engine,
}

impl RunConfig {
    pub fn mock(execution_dir: impl Into<PathBuf>, spec: MockEngineSpec) -> Self {
        RunConfig {
            executable: "mock".into(),
            execution_dir: execution_dir.into(),
            job_script_prefix: DEFAULT_JOB_PREFIX.into(),
            max_parallel: 4,
            engine: Engine::Mock(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobScript {
    pub script: PathBuf,
    pub input: PathBuf,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn command_line(template: &str, input: &Path) -> String {
    let path = shell_quote(&input.to_string_lossy());
    let stem = shell_quote(input.file_stem().and_then(|s| s.to_str()).unwrap_or_default());
    if template.contains("{input}") || template.contains("{stem}") {
        template.replace("{input}", &path).replace("{stem}", &stem)
    } else {
        format!("{template} {path}")
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Write `<prefix><i>.sh` for each input (1-based) into the execution directory.
pub fn emit_job_scripts(inputs: &[PathBuf], cfg: &RunConfig) -> Result<Vec<JobScript>, RunnerError> {
    fs::create_dir_all(&cfg.execution_dir).map_err(io_err(&cfg.execution_dir))?;
    let exec_dir = absolute(&cfg.execution_dir);
    let mut scripts = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let input = absolute(input);
        let script = cfg.execution_dir.join(format!("{}{}.sh", cfg.job_script_prefix, i + 1));
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let body = match cfg.engine {
            Engine::External => format!(
                "#!/bin/sh\n# job {} for: {}\ncd {} || exit 1\n{}\n",
                i + 1,
                name,
                shell_quote(&exec_dir.to_string_lossy()),
                command_line(&cfg.executable, &input)
            ),
            Engine::Mock(_) => format!(
                "#!/bin/sh\n# job {} for: {}\n# mock engine: executed in-process by the runner\nexit 0\n",
                i + 1,
                name
            ),
        };
        fs::write(&script, body).map_err(io_err(&script))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).map_err(io_err(&script))?;
        }
        scripts.push(JobScript { script, input });
    }
    Ok(scripts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub input_file: PathBuf,
    pub job_script: PathBuf,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub status: RunStatus,
    pub exit_code: Option<i32>,
    pub stdout_log: PathBuf,
    pub stderr_log: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub records: Vec<RunRecord>,
    pub total_wall_time: Duration,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.records.iter().all(|r| r.status == RunStatus::Succeeded)
    }

    pub fn wall_time_text(&self) -> String {
        format_duration(self.total_wall_time)
    }
}

/// `HH:MM:SS.ffffff`
pub fn format_duration(d: Duration) -> String {
    let secs = d.as_secs();
    format!(
        "{:02}:{:02}:{:02}.{:06}",
        secs / 3600,
        (secs / 60) % 60,
        secs % 60,
        d.subsec_micros()
    )
}

fn executable_exists(template: &str) -> Option<String> {
    let program = template.split_whitespace().next()?.to_string();
    let found = if program.contains('/') {
        Path::new(&program).is_file()
    } else {
        std::env::var_os("PATH")
            .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(&program).is_file()))
            .unwrap_or(false)
    };
    (!found).then_some(program)
}

/// Run all jobs with at most `cfg.max_parallel` in flight. A failing job is
/// recorded and does not stop the others.
pub fn execute_all(jobs: &[JobScript], cfg: &RunConfig) -> Result<RunSummary, RunnerError> {
    if cfg.max_parallel == 0 {
        return Err(RunnerError::InvalidParallelism);
    }
    if cfg.engine == Engine::External {
        if let Some(path) = executable_exists(&cfg.executable) {
            return Err(RunnerError::Spawn { path });
        }
    }
    fs::create_dir_all(&cfg.execution_dir).map_err(io_err(&cfg.execution_dir))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord, RunnerError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.max_parallel.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let record = run_job(job, cfg);
                results.lock().unwrap()[i] = Some(record);
            });
        }
    });

    let records = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job index is visited"))
        .collect::<Result<Vec<_>, _>>()?;
    let total_wall_time = match (
        records.iter().map(|r| r.start).min(),
        records.iter().map(|r| r.end).max(),
    ) {
        (Some(start), Some(end)) => (end - start).to_std().unwrap_or_default(),
        _ => Duration::ZERO,
    };
    Ok(RunSummary {
        records,
        total_wall_time,
    })
}

fn run_job(job: &JobScript, cfg: &RunConfig) -> Result<RunRecord, RunnerError> {
    let stem = job
        .script
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "job".into());
    let stdout_log = cfg.execution_dir.join(format!("{stem}.out"));
    let stderr_log = cfg.execution_dir.join(format!("{stem}.err"));
    let start = Utc::now();
    let (status, exit_code) = match &cfg.engine {
        Engine::External => {
            let out = File::create(&stdout_log).map_err(io_err(&stdout_log))?;
            let err = File::create(&stderr_log).map_err(io_err(&stderr_log))?;
            let spawned = Command::new("sh")
                .arg(absolute(&job.script))
                .current_dir(&cfg.execution_dir)
                .stdin(Stdio::null())
                .stdout(out)
                .stderr(err)
                .status();
            match spawned {
                Ok(st) if st.success() => (RunStatus::Succeeded, st.code()),
                Ok(st) => {
                    append_line(&stderr_log, &format!("job exited with status {st}"))?;
                    (RunStatus::Failed, st.code())
                }
                Err(e) => {
                    append_line(&stderr_log, &format!("failed to start job: {e}"))?;
                    (RunStatus::Failed, None)
                }
            }
        }
        Engine::Mock(spec) => {
            let mut out = File::create(&stdout_log).map_err(io_err(&stdout_log))?;
            File::create(&stderr_log).map_err(io_err(&stderr_log))?;
            match mock_run_input(&job.input, spec, &cfg.execution_dir) {
                Ok(files) => {
                    for f in files {
                        writeln!(out, "wrote {}", f.display()).map_err(io_err(&stdout_log))?;
                    }
                    (RunStatus::Succeeded, Some(0))
                }
                Err(e) => {
                    append_line(&stderr_log, &format!("mock engine failed: {e}"))?;
                    (RunStatus::Failed, Some(1))
                }
            }
        }
    };
    Ok(RunRecord {
        input_file: job.input.clone(),
        job_script: job.script.clone(),
        start,
        end: Utc::now().max(start),
        status,
        exit_code,
        stdout_log,
        stderr_log,
    })
}

fn append_line(path: &Path, line: &str) -> Result<(), RunnerError> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}
