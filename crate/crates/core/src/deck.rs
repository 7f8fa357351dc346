//! Fixed-column input decks: parsing, rendering, templating and multi-seed
//! cycle generation.
//!
//! A card line is laid out in 10-column fields: the keyword occupies columns
//! 1-10, WHAT(1)..WHAT(6) occupy columns 11-70 (each right-aligned, so WHAT(1)
//! ends at column 20 and WHAT(2) starts at column 21) and SDUM sits in columns
//! 71-78. Lines that do not follow the fixed layout but are whitespace
//! separated (`BEAMPOS  -110  0.0  0.93  0.0`) are also accepted, which is how
//! templates with `{name}` placeholders are usually written.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

pub const FIELD_WIDTH: usize = 10;
pub const WHAT_COUNT: usize = 6;
pub const SDUM_COLUMN: usize = 70;
pub const SDUM_WIDTH: usize = 8;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());
static PARAM_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").unwrap());

#[derive(Debug, Error)]
pub enum DeckError {
    #[error("value `{value}` does not fit in a {width}-column field")]
    FieldOverflow { value: String, width: usize },
    #[error("placeholder `{{{0}}}` has no matching parameter")]
    UnboundPlaceholder(String),
    #[error("parameter file not found: {0}")]
    MissingFile(PathBuf),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("parameter file is empty: {0}")]
    EmptyCsv(PathBuf),
    #[error("invalid parameter name `{0}`")]
    InvalidName(String),
    #[error("malformed parameter file {path}: {reason}")]
    MalformedCsv { path: PathBuf, reason: String },
    #[error("template has no RANDOMIZ card carrying `{{seed}}` in WHAT(2)")]
    SeedNotRouted,
    #[error("cycle count must be at least 1")]
    ZeroCycles,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DeckError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DeckError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A single WHAT field. Numbers remember the text they were written with so
/// untouched values render the way the author typed them.
#[derive(Debug, Clone)]
pub enum WhatValue {
    Number { value: f64, text: String },
    Token(String),
}

impl PartialEq for WhatValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (WhatValue::Number { value: a, .. }, WhatValue::Number { value: b, .. }) => a == b,
            (WhatValue::Token(a), WhatValue::Token(b)) => a == b,
            _ => false,
        }
    }
}

impl WhatValue {
    pub fn parse(text: &str) -> Self {
        let text = text.trim();
        match parse_number(text) {
            Some(value) => WhatValue::Number {
                value,
                text: text.to_string(),
            },
            None => WhatValue::Token(text.to_string()),
        }
    }

    pub fn number(value: f64) -> Self {
        WhatValue::Number {
            value,
            text: format!("{value}"),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            WhatValue::Number { value, .. } => Some(*value),
            WhatValue::Token(_) => None,
        }
    }

    pub fn text(&self) -> &str {
        match self {
            WhatValue::Number { text, .. } => text,
            WhatValue::Token(t) => t,
        }
    }

    /// Text fitted to a 10-column field.
    pub fn fitted(&self) -> Result<String, DeckError> {
        match self {
            WhatValue::Number { value, text } => Ok(fit_number(*value, Some(text))),
            WhatValue::Token(t) if t.chars().count() <= FIELD_WIDTH => Ok(t.clone()),
            WhatValue::Token(t) => Err(DeckError::FieldOverflow {
                value: t.clone(),
                width: FIELD_WIDTH,
            }),
        }
    }
}

impl fmt::Display for WhatValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

fn parse_number(text: &str) -> Option<f64> {
    if text.is_empty()
        || !text.chars().any(|c| c.is_ascii_digit())
        || !text
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E' | 'd' | 'D'))
    {
        return None;
    }
    let normalized = text.replace(['d', 'D'], "e");
    normalized.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Format `value` in at most 10 characters: the preferred text if it fits and
/// is exact, then plain decimal, then exponent form keeping as many mantissa
/// digits as the field allows.
pub fn fit_number(value: f64, preferred: Option<&str>) -> String {
    if let Some(text) = preferred {
        if text.len() <= FIELD_WIDTH && parse_number(text) == Some(value) {
            return text.to_string();
        }
    }
    let plain = format!("{value}");
    if plain.len() <= FIELD_WIDTH {
        return plain;
    }
    let exp = format!("{value:e}");
    if exp.len() <= FIELD_WIDTH {
        return exp;
    }
    (0..=16usize)
        .rev()
        .map(|p| format!("{value:.p$e}"))
        .find(|s| s.len() <= FIELD_WIDTH)
        .unwrap_or(exp)
}

fn is_keyword(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && s.len() <= FIELD_WIDTH
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

#[derive(Debug, Clone)]
pub struct Card {
    pub keyword: String,
    pub whats: [Option<WhatValue>; WHAT_COUNT],
    pub sdum: Option<String>,
    /// Line text as read (or as last rendered).
    pub raw: String,
}

impl PartialEq for Card {
    fn eq(&self, other: &Self) -> bool {
        self.keyword == other.keyword && self.whats == other.whats && self.sdum == other.sdum
    }
}

impl Card {
    pub fn new(
        keyword: impl Into<String>,
        whats: [Option<WhatValue>; WHAT_COUNT],
        sdum: Option<String>,
    ) -> Self {
        Card {
            keyword: keyword.into(),
            whats,
            sdum,
            raw: String::new(),
        }
    }

    /// WHAT(n) with 1-based `n`, as in card documentation.
    pub fn what(&self, n: usize) -> Option<&WhatValue> {
        self.whats.get(n.checked_sub(1)?)?.as_ref()
    }

    pub fn what_f64(&self, n: usize) -> Option<f64> {
        self.what(n).and_then(WhatValue::as_f64)
    }

    pub fn render(&self) -> Result<String, DeckError> {
        if self.keyword.chars().count() > FIELD_WIDTH {
            return Err(DeckError::FieldOverflow {
                value: self.keyword.clone(),
                width: FIELD_WIDTH,
            });
        }
        let mut line = format!("{:<width$}", self.keyword, width = FIELD_WIDTH);
        for what in &self.whats {
            match what {
                Some(v) => line.push_str(&format!("{:>width$}", v.fitted()?, width = FIELD_WIDTH)),
                None => line.push_str(&" ".repeat(FIELD_WIDTH)),
            }
        }
        if let Some(sdum) = &self.sdum {
            if sdum.chars().count() > SDUM_WIDTH {
                return Err(DeckError::FieldOverflow {
                    value: sdum.clone(),
                    width: SDUM_WIDTH,
                });
            }
            line.push_str(sdum);
        }
        Ok(line.trim_end().to_string())
    }

    /// Parse a card line, trying the fixed layout first and whitespace
    /// separated tokens second.
    pub fn parse(line: &str) -> Result<Card, String> {
        let mut card = match parse_fixed(line) {
            Some(card) => card,
            None => parse_free(line)?,
        };
        card.raw = line.to_string();
        Ok(card)
    }
}

fn field(cols: &[char], start: usize, width: usize) -> String {
    cols.iter().skip(start).take(width).collect::<String>().trim().to_string()
}

fn parse_fixed(line: &str) -> Option<Card> {
    let cols: Vec<char> = line.trim_end().chars().collect();
    if cols.is_empty() || cols[0].is_whitespace() || cols.len() > SDUM_COLUMN + SDUM_WIDTH {
        return None;
    }
    // A token running across a field boundary means free format, unless the
    // field after the boundary is completely filled (two fields touching)
    // or it is the SDUM.
    for boundary in (1..=7).map(|k| k * FIELD_WIDTH) {
        if boundary < cols.len() && !cols[boundary - 1].is_whitespace() && !cols[boundary].is_whitespace()
        {
            let next = &cols[boundary..cols.len().min(boundary + FIELD_WIDTH)];
            let filled = next.iter().all(|c| !c.is_whitespace());
            let full = filled && (next.len() == FIELD_WIDTH || boundary == SDUM_COLUMN);
            if !full {
                return None;
            }
        }
    }
    let keyword = field(&cols, 0, FIELD_WIDTH);
    if !is_keyword(&keyword) {
        return None;
    }
    let mut whats: [Option<WhatValue>; WHAT_COUNT] = Default::default();
    for (i, slot) in whats.iter_mut().enumerate() {
        let text = field(&cols, FIELD_WIDTH * (i + 1), FIELD_WIDTH);
        if text.contains(char::is_whitespace) {
            return None;
        }
        if !text.is_empty() {
            *slot = Some(WhatValue::parse(&text));
        }
    }
    let sdum = field(&cols, SDUM_COLUMN, SDUM_WIDTH);
    if sdum.contains(char::is_whitespace) {
        return None;
    }
    Some(Card::new(keyword, whats, (!sdum.is_empty()).then_some(sdum)))
}

fn parse_free(line: &str) -> Result<Card, String> {
    let mut tokens = line.split_whitespace();
    let keyword = tokens.next().ok_or("empty line")?;
    if !is_keyword(keyword) {
        return Err(format!("`{keyword}` is not a card keyword"));
    }
    let rest: Vec<&str> = tokens.collect();
    if rest.len() > WHAT_COUNT + 1 {
        return Err(format!("{} fields after keyword, at most 7 allowed", rest.len()));
    }
    let mut whats: [Option<WhatValue>; WHAT_COUNT] = Default::default();
    for (slot, tok) in whats.iter_mut().zip(&rest) {
        *slot = Some(WhatValue::parse(tok));
    }
    let sdum = rest.get(WHAT_COUNT).map(|s| s.to_string());
    if sdum.as_ref().is_some_and(|s| s.chars().count() > SDUM_WIDTH) {
        return Err("SDUM longer than 8 characters".to_string());
    }
    Ok(Card::new(keyword, whats, sdum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    Card,
    Comment,
    FreeText,
    Blank,
    Directive,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeckLine {
    Card(Card),
    Comment(String),
    /// Title text, geometry bodies and anything that did not parse as a card.
    FreeText(String),
    Blank(String),
    Directive(String),
}

impl DeckLine {
    pub fn kind(&self) -> LineKind {
        match self {
            DeckLine::Card(_) => LineKind::Card,
            DeckLine::Comment(_) => LineKind::Comment,
            DeckLine::FreeText(_) => LineKind::FreeText,
            DeckLine::Blank(_) => LineKind::Blank,
            DeckLine::Directive(_) => LineKind::Directive,
        }
    }

    pub fn render(&self) -> Result<String, DeckError> {
        match self {
            DeckLine::Card(card) => card.render(),
            DeckLine::Comment(t) | DeckLine::FreeText(t) | DeckLine::Blank(t) | DeckLine::Directive(t) => {
                Ok(t.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct InputDeck {
    pub lines: Vec<DeckLine>,
    pub source_path: Option<PathBuf>,
    pub warnings: Vec<ParseWarning>,
    pub trailing_newline: bool,
}

impl PartialEq for InputDeck {
    fn eq(&self, other: &Self) -> bool {
        self.lines == other.lines
    }
}

impl InputDeck {
    pub fn read(path: &Path) -> Result<Self, DeckError> {
        let text = fs::read_to_string(path).map_err(|e| DeckError::io(path, e))?;
        let mut deck = parse_deck(&text);
        deck.source_path = Some(path.to_path_buf());
        Ok(deck)
    }

    pub fn cards(&self) -> impl Iterator<Item = &Card> {
        self.lines.iter().filter_map(|l| match l {
            DeckLine::Card(c) => Some(c),
            _ => None,
        })
    }

    pub fn find_card(&self, keyword: &str) -> Option<&Card> {
        self.cards().find(|c| c.keyword == keyword)
    }
}

pub fn parse_deck(text: &str) -> InputDeck {
    let mut deck = InputDeck {
        trailing_newline: text.ends_with('\n'),
        ..InputDeck::default()
    };
    let mut in_geometry = false;
    let mut expect_title = false;
    for (idx, line) in text.lines().enumerate() {
        let parsed = if line.trim().is_empty() {
            DeckLine::Blank(line.to_string())
        } else if line.starts_with('*') {
            DeckLine::Comment(line.to_string())
        } else if line.starts_with('@') || line.starts_with('#') {
            DeckLine::Directive(line.to_string())
        } else if expect_title {
            expect_title = false;
            DeckLine::FreeText(line.to_string())
        } else if in_geometry {
            match Card::parse(line) {
                Ok(card) if card.keyword == "GEOEND" => {
                    in_geometry = false;
                    DeckLine::Card(card)
                }
                _ => DeckLine::FreeText(line.to_string()),
            }
        } else {
            match Card::parse(line) {
                Ok(card) => {
                    match card.keyword.as_str() {
                        "GEOBEGIN" => in_geometry = true,
                        "TITLE" => expect_title = true,
                        _ => {}
                    }
                    DeckLine::Card(card)
                }
                Err(reason) => {
                    deck.warnings.push(ParseWarning {
                        line: idx + 1,
                        message: format!("kept as raw text: {reason}"),
                    });
                    DeckLine::FreeText(line.to_string())
                }
            }
        };
        deck.lines.push(parsed);
    }
    deck
}

pub fn render_deck(deck: &InputDeck) -> Result<String, DeckError> {
    let mut out = deck
        .lines
        .iter()
        .map(DeckLine::render)
        .collect::<Result<Vec<_>, _>>()?
        .join("\n");
    if deck.trailing_newline && !deck.lines.is_empty() {
        out.push('\n');
    }
    Ok(out)
}

/// Named scalar parameters in file order. Values stay as text until rendered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParameterSet {
    entries: Vec<(String, String)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: impl Into<String>) -> Result<(), DeckError> {
        if !PARAM_NAME.is_match(name) {
            return Err(DeckError::InvalidName(name.to_string()));
        }
        if self.get(name).is_some() {
            return Err(DeckError::DuplicateName(name.to_string()));
        }
        self.entries.push((name.to_string(), value.into()));
        Ok(())
    }

    /// Insert or overwrite, keeping the original position.
    pub fn set(&mut self, name: &str, value: impl Into<String>) -> Result<(), DeckError> {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => {
                entry.1 = value.into();
                Ok(())
            }
            None => self.insert(name, value),
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }
}

/// Read parameters from either a header row plus one value row, or one
/// `name,value` pair per row.
pub fn load_parameters(path: &Path) -> Result<ParameterSet, DeckError> {
    if !path.exists() {
        return Err(DeckError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| DeckError::io(path, e))?;
    let malformed = |reason: String| DeckError::MalformedCsv {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        rows.push(record.iter().map(str::to_string).collect::<Vec<_>>());
    }
    if rows.is_empty() {
        return Err(DeckError::EmptyCsv(path.to_path_buf()));
    }

    let mut params = ParameterSet::new();
    let pairs_layout = rows
        .iter()
        .all(|r| r.len() == 2 && PARAM_NAME.is_match(&r[0]));
    if pairs_layout {
        let skip_header = rows[0][0].eq_ignore_ascii_case("name") && rows[0][1].eq_ignore_ascii_case("value");
        for row in rows.iter().skip(usize::from(skip_header)) {
            params.insert(&row[0], row[1].clone())?;
        }
    } else {
        if rows.len() != 2 {
            return Err(malformed(format!(
                "expected a header row and one value row, found {} rows",
                rows.len()
            )));
        }
        if rows[0].len() != rows[1].len() {
            return Err(malformed("header and value rows differ in length".to_string()));
        }
        for (name, value) in rows[0].iter().zip(&rows[1]) {
            params.insert(name, value.clone())?;
        }
    }
    Ok(params)
}

fn replace_placeholders(text: &str, params: &ParameterSet) -> Result<String, DeckError> {
    if let Some(missing) = PLACEHOLDER
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .find(|name| params.get(name).is_none())
    {
        return Err(DeckError::UnboundPlaceholder(missing));
    }
    Ok(PLACEHOLDER
        .replace_all(text, |c: &regex::Captures| params.get(&c[1]).unwrap_or_default().to_string())
        .into_owned())
}

/// Placeholder names referenced by card fields and directive lines.
pub fn placeholders(deck: &InputDeck) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    let mut push = |text: &str| {
        for c in PLACEHOLDER.captures_iter(text) {
            if !names.iter().any(|n| n == &c[1]) {
                names.push(c[1].to_string());
            }
        }
    };
    for line in &deck.lines {
        match line {
            DeckLine::Card(card) => {
                card.whats.iter().flatten().for_each(|w| push(w.text()));
                if let Some(s) = &card.sdum {
                    push(s);
                }
            }
            DeckLine::Directive(text) => push(text),
            _ => {}
        }
    }
    names
}

pub fn unused_parameters(template: &InputDeck, params: &ParameterSet) -> Vec<String> {
    let used = placeholders(template);
    params
        .iter()
        .filter(|(n, _)| !used.iter().any(|u| u == n))
        .map(|(n, _)| n.to_string())
        .collect()
}

pub fn substitute(template: &InputDeck, params: &ParameterSet) -> Result<InputDeck, DeckError> {
    let mut lines = Vec::with_capacity(template.lines.len());
    for line in &template.lines {
        let next = match line {
            DeckLine::Card(card) => {
                let mut updated = card.clone();
                let mut touched = false;
                for what in updated.whats.iter_mut().flatten() {
                    if PLACEHOLDER.is_match(what.text()) {
                        *what = WhatValue::parse(&replace_placeholders(what.text(), params)?);
                        touched = true;
                    }
                }
                if let Some(sdum) = updated.sdum.as_mut() {
                    if PLACEHOLDER.is_match(sdum) {
                        *sdum = replace_placeholders(sdum, params)?;
                        touched = true;
                    }
                }
                if touched {
                    updated.raw = updated.render()?;
                }
                DeckLine::Card(updated)
            }
            DeckLine::Directive(text) if PLACEHOLDER.is_match(text) => {
                DeckLine::Directive(replace_placeholders(text, params)?)
            }
            other => other.clone(),
        };
        lines.push(next);
    }
    Ok(InputDeck {
        lines,
        source_path: template.source_path.clone(),
        warnings: template.warnings.clone(),
        trailing_newline: template.trailing_newline,
    })
}

#[derive(Debug, Clone)]
pub struct CyclePlan {
    pub prefix: String,
    pub count: usize,
    pub base_seed: i64,
    pub output_dir: PathBuf,
}

impl CyclePlan {
    pub fn file_name(&self, cycle: usize) -> String {
        format!("{}_{:02}.inp", self.prefix, cycle)
    }
}

fn seed_is_routed(template: &InputDeck) -> bool {
    template
        .cards()
        .filter(|c| c.keyword == "RANDOMIZ")
        .any(|c| c.what(2).is_some_and(|w| w.text().contains("{seed}")))
}

/// Write `plan.count` decks; cycle `i` (1-based) uses seed `base_seed + i - 1`.
pub fn generate_cycles(
    template: &InputDeck,
    params: &ParameterSet,
    plan: &CyclePlan,
) -> Result<Vec<PathBuf>, DeckError> {
    if plan.count == 0 {
        return Err(DeckError::ZeroCycles);
    }
    if !seed_is_routed(template) {
        return Err(DeckError::SeedNotRouted);
    }
    fs::create_dir_all(&plan.output_dir).map_err(|e| DeckError::io(&plan.output_dir, e))?;
    let mut written = Vec::with_capacity(plan.count);
    for cycle in 1..=plan.count {
        let mut cycle_params = params.clone();
        cycle_params.set("seed", (plan.base_seed + cycle as i64 - 1).to_string())?;
        let deck = substitute(template, &cycle_params)?;
        let path = plan.output_dir.join(plan.file_name(cycle));
        fs::write(&path, render_deck(&deck)?).map_err(|e| DeckError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
