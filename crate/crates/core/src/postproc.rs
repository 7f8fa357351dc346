//! Utility dispatch for binary outputs, `.lis` parsing and the JSON data store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runner::{MockContainer, ScoringCard};
use crate::stats;

pub const DECRYPTION_LOG: &str = "decryption_logs";
pub const STORE_FILE: &str = "fluka_data.json";
pub const DEFAULT_OUTPUT_BASE: &str = "output";

static BINARY_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(.+)_fort\.(\d{2})$").unwrap());
static PRIMARIES: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)total\s+primaries\s+run\s*:\s*([0-9.eE+]+)").unwrap());
static TOTAL_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*([A-Za-z][A-Za-z0-9 _()/.\-]*?)\s*:\s*([-+0-9.eE]+)\s*\+/-\s*([-+0-9.eE]+)\s*%\s*$").unwrap()
});
static DETECTOR_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)detector[^"]*"([^"]+)""#).unwrap());

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("no `*_fort.xx` files (17 <= xx <= 99) in {0}")]
    NoBinaryFiles(PathBuf),
    #[error("every utility failed for unit {unit}:\n{}", format_failures(.failures))]
    AllUtilitiesFailed { unit: u8, failures: Vec<(String, String)> },
    #[error("sum file has no `Total primaries run` line")]
    MissingPrimaries,
    #[error("no numeric table found")]
    NoNumericTable,
    #[error("row at line {0} has fewer than 4 columns")]
    RaggedRow(usize),
    #[error("cannot tell whether {0} is a sum or tab listing")]
    UnknownListing(PathBuf),
    #[error("malformed store {path}: {reason}")]
    MalformedStore { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_failures(failures: &[(String, String)]) -> String {
    failures
        .iter()
        .map(|(name, stderr)| format!("  {name}: {}", stderr.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PostprocError + '_ {
    move |source| PostprocError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One tabulated bin: `(elow, ehigh, value, err%)`. Serialized as a 4-array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct TabRow {
    pub elow: f64,
    pub ehigh: f64,
    pub value: f64,
    pub err_pct: f64,
}

impl TabRow {
    pub fn new(elow: f64, ehigh: f64, value: f64, err_pct: f64) -> Self {
        TabRow {
            elow,
            ehigh,
            value,
            err_pct,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.elow + self.ehigh)
    }
}

impl From<[f64; 4]> for TabRow {
    fn from(v: [f64; 4]) -> Self {
        TabRow::new(v[0], v[1], v[2], v[3])
    }
}

impl From<TabRow> for [f64; 4] {
    fn from(r: TabRow) -> Self {
        [r.elow, r.ehigh, r.value, r.err_pct]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub err_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabSection {
    pub detector_name: String,
    pub rows: Vec<TabRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumSection {
    pub detector_name: String,
    pub total_primaries: u64,
    pub totals: BTreeMap<String, Measured>,
    /// Spectral rows printed after the totals, if any.
    pub rows: Vec<TabRow>,
}

fn detector_name(text: &str) -> String {
    text.lines()
        .filter(|l| !is_numeric_line(l))
        .find_map(|l| DETECTOR_LINE.captures(l).map(|c| c[1].trim().to_string()))
        .unwrap_or_else(|| "unknown".to_string())
}

fn numeric_tokens(line: &str) -> Option<Vec<f64>> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.is_empty() {
        return None;
    }
    tokens.iter().map(|t| t.parse::<f64>().ok()).collect()
}

fn is_numeric_line(line: &str) -> bool {
    numeric_tokens(line).is_some()
}

/// Rows from every fully numeric line; prose lines are skipped.
fn numeric_rows(text: &str) -> Result<Vec<TabRow>, PostprocError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some(values) = numeric_tokens(line) else {
            continue;
        };
        if values.len() < 4 {
            return Err(PostprocError::RaggedRow(i + 1));
        }
        rows.push(TabRow::new(values[0], values[1], values[2], values[3]));
    }
    rows.sort_by(|a, b| a.elow.total_cmp(&b.elow));
    Ok(rows)
}

pub fn parse_tab(text: &str) -> Result<TabSection, PostprocError> {
    let rows = numeric_rows(text)?;
    if rows.is_empty() {
        return Err(PostprocError::NoNumericTable);
    }
    Ok(TabSection {
        detector_name: detector_name(text),
        rows,
    })
}

pub fn parse_sum(text: &str) -> Result<SumSection, PostprocError> {
    let total_primaries = text
        .lines()
        .find_map(|l| PRIMARIES.captures(l))
        .and_then(|c| c[1].parse::<f64>().ok())
        .filter(|n| *n >= 1.0)
        .map(|n| n.round() as u64)
        .ok_or(PostprocError::MissingPrimaries)?;
    let mut totals = BTreeMap::new();
    for line in text.lines() {
        if let Some(c) = TOTAL_LINE.captures(line) {
            if let (Ok(value), Ok(err_pct)) = (c[2].parse(), c[3].parse()) {
                totals.insert(c[1].to_string(), Measured { value, err_pct });
            }
        }
    }
    Ok(SumSection {
        detector_name: detector_name(text),
        total_primaries,
        totals,
        rows: numeric_rows(text)?,
    })
}

/// Text of a tab listing as written by the mock utilities.
pub fn emit_tab(section: &TabSection) -> String {
    let mut out = String::new();
    let _ = writeln!(out, " # Detector n:   1 \"{}\"", section.detector_name);
    let _ = writeln!(out, " # N. of energy intervals {}", section.rows.len());
    let _ = writeln!(out, " # elow(GeV) ehigh(GeV) value(per GeV per primary) error(%)");
    for r in &section.rows {
        let _ = writeln!(out, " {:e} {:e} {:e} {:e}", r.elow, r.ehigh, r.value, r.err_pct);
    }
    out
}

pub fn emit_sum(section: &SumSection) -> String {
    let mut out = String::new();
    let _ = writeln!(out, " Detector n:   1 \"{}\"", section.detector_name);
    let _ = writeln!(out, " Total primaries run: {}", section.total_primaries);
    for (name, m) in &section.totals {
        let _ = writeln!(out, " {name}: {:e} +/- {:e} %", m.value, m.err_pct);
    }
    if !section.rows.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, " Differential distribution:");
        for r in &section.rows {
            let _ = writeln!(out, " {:e} {:e} {:e} {:e}", r.elow, r.ehigh, r.value, r.err_pct);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtilityEntry {
    pub name: String,
    /// Program followed by whitespace-separated arguments.
    pub command: String,
    pub card: ScoringCard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtilityTable {
    pub entries: Vec<UtilityEntry>,
}

impl Default for UtilityTable {
    fn default() -> Self {
        let pairs = [
            ("usxsuw", ScoringCard::Usrbdx),
            ("ustsuw", ScoringCard::Usrtrack),
            ("usbsuw", ScoringCard::Usrbin),
            ("detsuw", ScoringCard::Detect),
            ("usrsuw", ScoringCard::Resnuclei),
            ("usysuw", ScoringCard::Usryield),
        ];
        UtilityTable {
            entries: pairs
                .into_iter()
                .map(|(name, card)| UtilityEntry {
                    name: name.into(),
                    command: name.into(),
                    card,
                })
                .collect(),
        }
    }
}

impl UtilityTable {
    /// Point the named utility at another command. Returns false if unknown.
    pub fn set_command(&mut self, name: &str, command: impl Into<String>) -> bool {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => {
                e.command = command.into();
                true
            }
            None => false,
        }
    }

    /// Trial order for a unit; DETECT's utility goes first for unit 17.
    pub fn order_for(&self, unit: u8) -> Vec<&UtilityEntry> {
        let mut order: Vec<&UtilityEntry> = self.entries.iter().collect();
        if unit == 17 {
            order.sort_by_key(|e| e.card != ScoringCard::Detect);
        }
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UtilityBackend {
    /// Spawn each entry's command.
    #[default]
    External,
    /// Run `mock_utility` in-process for each entry's card.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecryptOptions {
    pub output_base: String,
    pub backend: UtilityBackend,
}

impl Default for DecryptOptions {
    fn default() -> Self {
        DecryptOptions {
            output_base: DEFAULT_OUTPUT_BASE.into(),
            backend: UtilityBackend::External,
        }
    }
}

struct Attempt {
    success: bool,
    stdout: String,
    stderr: String,
    status: String,
}

/// Binary outputs in `dir` grouped by unit.
pub fn binary_files(dir: &Path) -> Result<BTreeMap<u8, Vec<String>>, PostprocError> {
    let mut groups: BTreeMap<u8, Vec<String>> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(c) = BINARY_NAME.captures(&name) else {
            continue;
        };
        let unit: u8 = c[2].parse().unwrap();
        if (17..=99).contains(&unit) && entry.path().is_file() {
            groups.entry(unit).or_default().push(name);
        }
    }
    for files in groups.values_mut() {
        files.sort();
    }
    Ok(groups)
}

/// Feed each unit's cycle files to the utilities in trial order until one
/// exits 0 and leaves a non-empty listing. Every attempt is appended to
/// `decryption_logs` in `dir`.
pub fn decrypt_all(
    dir: &Path,
    table: &UtilityTable,
    cycles: usize,
    opts: &DecryptOptions,
) -> Result<Vec<PathBuf>, PostprocError> {
    let groups = binary_files(dir)?;
    if groups.is_empty() {
        return Err(PostprocError::NoBinaryFiles(dir.to_path_buf()));
    }
    let log_path = dir.join(DECRYPTION_LOG);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;

    let mut produced = Vec::new();
    for (unit, files) in groups {
        let output = format!("{}_fort_{unit:02}", opts.output_base);
        let listings = [
            dir.join(format!("{output}_sum.lis")),
            dir.join(format!("{output}_tab.lis")),
        ];
        let stdin = format!("{}\n\n{output}\n", files.join("\n"));
        if cycles > 0 && files.len() != cycles {
            writeln!(
                log,
                "note: unit {unit} has {} cycle files, expected {cycles}",
                files.len()
            )
            .map_err(io_err(&log_path))?;
        }
        let mut failures = Vec::new();
        let mut done = false;
        for entry in table.order_for(unit) {
            for l in &listings {
                let _ = fs::remove_file(l);
            }
            let mut attempt = match opts.backend {
                UtilityBackend::External => run_external(&entry.command, &stdin, dir),
                UtilityBackend::Mock => match mock_utility(entry.card, &stdin, dir) {
                    Ok(stdout) => Attempt {
                        success: true,
                        stdout,
                        stderr: String::new(),
                        status: "0".into(),
                    },
                    Err(stderr) => Attempt {
                        success: false,
                        stdout: String::new(),
                        stderr,
                        status: "1".into(),
                    },
                },
            };
            let nonempty = listings
                .iter()
                .any(|l| fs::metadata(l).map(|m| m.len() > 0).unwrap_or(false));
            if attempt.success && !nonempty {
                attempt.success = false;
                attempt.stderr.push_str("utility exited 0 but produced no listing\n");
            }
            write!(
                log,
                "===== unit {unit:02} | utility {} | command {} =====\n--- stdin ---\n{stdin}--- stdout ---\n{}\n--- stderr ---\n{}\n--- exit status: {} ({}) ---\n===== end =====\n",
                entry.name,
                entry.command,
                attempt.stdout.trim_end(),
                attempt.stderr.trim_end(),
                attempt.status,
                if attempt.success { "success" } else { "failure" },
            )
            .map_err(io_err(&log_path))?;
            if attempt.success {
                produced.extend(listings.iter().filter(|l| l.is_file()).cloned());
                done = true;
                break;
            }
            for l in &listings {
                let _ = fs::remove_file(l);
            }
            failures.push((entry.name.clone(), attempt.stderr));
        }
        if !done {
            return Err(PostprocError::AllUtilitiesFailed { unit, failures });
        }
    }
    Ok(produced)
}

fn run_external(command: &str, stdin: &str, dir: &Path) -> Attempt {
    let mut parts = command.split_whitespace();
    let Some(program) = parts.next() else {
        return Attempt {
            success: false,
            stdout: String::new(),
            stderr: "empty utility command".into(),
            status: "not started".into(),
        };
    };
    let child = Command::new(program)
        .args(parts)
        .current_dir(dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => {
            return Attempt {
                success: false,
                stdout: String::new(),
                stderr: format!("cannot start `{program}`: {e}"),
                status: "not started".into(),
            }
        }
    };
    if let Some(mut pipe) = child.stdin.take() {
        // A utility that exits early closes its stdin; that is not our error.
        let _ = pipe.write_all(stdin.as_bytes());
    }
    match child.wait_with_output() {
        Ok(out) => Attempt {
            success: out.status.success(),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            status: out.status.code().map_or_else(|| "signal".into(), |c| c.to_string()),
        },
        Err(e) => Attempt {
            success: false,
            stdout: String::new(),
            stderr: format!("waiting for `{program}` failed: {e}"),
            status: "unknown".into(),
        },
    }
}

/// Stand-in for the post-processing utility of `card`. Reads cycle file
/// names, a blank line and an output name from `stdin` (paths relative to
/// `dir`), merges the cycles and writes `<output>_sum.lis` and
/// `<output>_tab.lis`. Returns stdout text or the error text.
pub fn mock_utility(card: ScoringCard, stdin: &str, dir: &Path) -> Result<String, String> {
    let mut lines = stdin.lines().map(str::trim);
    let files: Vec<&str> = lines.by_ref().take_while(|l| !l.is_empty()).collect();
    let output = lines
        .find(|l| !l.is_empty())
        .ok_or("no output name after the file list")?;
    if files.is_empty() {
        return Err("no input files given".into());
    }
    let mut containers = Vec::with_capacity(files.len());
    for f in &files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let c = MockContainer::decode(&bytes, f).map_err(|e| e.to_string())?;
        if c.card != card {
            return Err(format!("{f} holds {} data, this utility reads {card}", c.card));
        }
        containers.push(c);
    }
    let first = &containers[0];
    for c in &containers[1..] {
        let same_bins = c.rows.len() == first.rows.len()
            && c.rows.iter().zip(&first.rows).all(|(a, b)| a.elow == b.elow && a.ehigh == b.ehigh);
        if !same_bins {
            return Err("cycle files have different binnings".into());
        }
    }
    let total_primaries: u64 = containers.iter().map(|c| c.primaries).sum();
    let rows: Vec<TabRow> = (0..first.rows.len())
        .map(|j| {
            let bins = containers.iter().map(|c| (c.primaries as f64, c.rows[j]));
            merge_bins(first.rows[j].elow, first.rows[j].ehigh, bins, total_primaries as f64)
        })
        .collect();
    let integral = merge_bins(0.0, 0.0, rows.iter().map(|r| (1.0, *r)), 1.0);
    let mut totals = BTreeMap::new();
    totals.insert(
        "Integral".to_string(),
        Measured {
            value: integral.value,
            err_pct: integral.err_pct,
        },
    );
    let tab = TabSection {
        detector_name: first.detector.clone(),
        rows: rows.clone(),
    };
    let sum = SumSection {
        detector_name: first.detector.clone(),
        total_primaries,
        totals,
        rows,
    };
    let sum_path = dir.join(format!("{output}_sum.lis"));
    let tab_path = dir.join(format!("{output}_tab.lis"));
    fs::write(&sum_path, emit_sum(&sum)).map_err(|e| format!("cannot write {}: {e}", sum_path.display()))?;
    fs::write(&tab_path, emit_tab(&tab)).map_err(|e| format!("cannot write {}: {e}", tab_path.display()))?;
    Ok(format!(
        "merged {} cycles of {card} unit {} ({total_primaries} primaries) into {output}\n",
        containers.len(),
        first.unit
    ))
}

/// Weighted mean of per-cycle bin values; absolute errors add in quadrature
/// with the same weights.
fn merge_bins(elow: f64, ehigh: f64, bins: impl Iterator<Item = (f64, TabRow)>, total_weight: f64) -> TabRow {
    let (mut value, mut var) = (0.0, 0.0);
    for (w, r) in bins {
        value += w * r.value;
        var += (w * r.value * r.err_pct / 100.0).powi(2);
    }
    let value = value / total_weight;
    let abs_err = var.sqrt() / total_weight;
    let err_pct = if value > 0.0 { 100.0 * abs_err / value } else { 100.0 };
    TabRow::new(elow, ehigh, value, err_pct)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Sum,
    Tab,
}

/// One file's entry in the data store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreEntry {
    #[serde(rename = "type")]
    pub kind: EntryKind,
    pub detector: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_primaries: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<TabRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub totals: Option<BTreeMap<String, Measured>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_uncertainty: Option<f64>,
}

impl StoreEntry {
    pub fn rows(&self) -> &[TabRow] {
        self.rows.as_deref().unwrap_or(&[])
    }
}

/// File name -> entry, in stable key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlukaData {
    pub files: BTreeMap<String, StoreEntry>,
}

impl FlukaData {
    pub fn get(&self, file: &str) -> Option<&StoreEntry> {
        self.files.get(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("store serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, PostprocError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PostprocError::MalformedStore {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Key of the tab listing for a unit.
    pub fn tab_key(base: &str, unit: u8) -> String {
        format!("{base}_fort_{unit:02}_tab.lis")
    }

    pub fn sum_key(base: &str, unit: u8) -> String {
        format!("{base}_fort_{unit:02}_sum.lis")
    }
}

pub fn entry_from_text(kind: EntryKind, text: &str) -> Result<StoreEntry, PostprocError> {
    Ok(match kind {
        EntryKind::Sum => {
            let s = parse_sum(text)?;
            StoreEntry {
                kind,
                detector: s.detector_name,
                total_primaries: Some(s.total_primaries),
                rows: (!s.rows.is_empty()).then_some(s.rows),
                totals: Some(s.totals),
                average_uncertainty: None,
            }
        }
        EntryKind::Tab => {
            let t = parse_tab(text)?;
            let avg = stats::average_uncertainty(&t.rows).ok().map(|r| r.average_uncertainty);
            StoreEntry {
                kind,
                detector: t.detector_name,
                total_primaries: None,
                rows: Some(t.rows),
                totals: None,
                average_uncertainty: avg,
            }
        }
    })
}

fn kind_of(path: &Path) -> Option<EntryKind> {
    let name = path.file_name()?.to_str()?;
    if name.ends_with("_sum.lis") {
        Some(EntryKind::Sum)
    } else if name.ends_with("_tab.lis") {
        Some(EntryKind::Tab)
    } else {
        None
    }
}

#[derive(Debug)]
pub struct StoreBuild {
    pub data: FlukaData,
    /// Files that could not be parsed; they are left out of the store.
    pub warnings: Vec<String>,
}

/// Parse every listing and write the store to `json_path`.
pub fn build_store(paths: &[PathBuf], json_path: &Path) -> Result<StoreBuild, PostprocError> {
    let mut data = FlukaData::default();
    let mut warnings = Vec::new();
    let unique: BTreeSet<&PathBuf> = paths.iter().collect();
    for path in unique {
        let Some(kind) = kind_of(path) else {
            warnings.push(PostprocError::UnknownListing(path.clone()).to_string());
            continue;
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                warnings.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        match entry_from_text(kind, &text) {
            Ok(entry) => {
                let key = path.file_name().unwrap().to_string_lossy().into_owned();
                data.files.insert(key, entry);
            }
            Err(e) => warnings.push(format!("{}: {e}", path.display())),
        }
    }
    if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(json_path, data.to_json()).map_err(io_err(json_path))?;
    Ok(StoreBuild { data, warnings })
}
