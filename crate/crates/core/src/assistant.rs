//! Retrieval-augmented question answering over a directory of documents.
//!
//! Documents are split into overlapping character chunks (math spans are kept
//! whole), embedded, and kept in a small on-disk store: `manifest.json` maps
//! content hashes to ingestion records and `vectors.jsonl` holds one embedded
//! chunk per line.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chat::{self, ChatEndpoint, ChatError, ChatMessage, ChatRequest};

pub const EMBED_KEY_VAR: &str = "MCFORGE_EMBED_KEY";
pub const DEFAULT_CHUNK_SIZE: usize = 1000;
pub const DEFAULT_OVERLAP: usize = 200;
pub const HASH_DIM: usize = 256;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.jsonl";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum AssistantError {
    #[error("text extraction failed for {file}: {reason}")]
    ExtractionFailed { file: PathBuf, reason: String },
    #[error("embedding provider error: {0}")]
    ProviderError(String),
    #[error("the vector store is empty")]
    EmptyStore,
    #[error("invalid chunking: size {size}, overlap {overlap}")]
    InvalidChunking { size: usize, overlap: usize },
    #[error("store at {0} is locked by another ingestion")]
    Locked(PathBuf),
    #[error("store at {path} is corrupt: {reason}")]
    CorruptStore { path: PathBuf, reason: String },
    #[error("embedding dimension {got} does not match the store ({expected})")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ChatError> for AssistantError {
    fn from(e: ChatError) -> Self {
        AssistantError::ProviderError(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AssistantError + '_ {
    move |source| AssistantError::Io {
        path: path.to_path_buf(),
        source,
    }
}

static MATH: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?s)\$\$.+?\$\$|\$[^$\n]+?\$|\\\[.+?\\\]|\\\(.+?\\\)|\\begin\{(equation\*?|align\*?)\}.+?\\end\{(equation\*?|align\*?)\}",
    )
    .unwrap()
});

/// Byte spans of LaTeX-style math in `text`.
pub fn math_spans(text: &str) -> Vec<(usize, usize)> {
    MATH.find_iter(text).map(|m| (m.start(), m.end())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    /// Character offsets `[start, end)` in the source.
    pub char_span: (usize, usize),
    pub preserved_math: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl DocumentChunk {
    pub fn id(&self) -> String {
        format!("{}#{}", self.doc_id, self.chunk_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkParams {
    pub size: usize,
    pub overlap: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams {
            size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<(), AssistantError> {
        if self.size == 0 || self.overlap >= self.size {
            return Err(AssistantError::InvalidChunking {
                size: self.size,
                overlap: self.overlap,
            });
        }
        Ok(())
    }
}

/// Character spans of the chunks of a text of `len` characters. Windows step
/// by `size - overlap`; a final window that would lie entirely inside the
/// previous one is dropped.
pub fn chunk_spans(len: usize, params: ChunkParams) -> Vec<(usize, usize)> {
    let step = params.size - params.overlap;
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + params.size).min(len);
        spans.push((start, end));
        if end >= len {
            break;
        }
        start += step;
    }
    spans
}

/// Content hash used as the document id.
pub fn doc_id(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Split `text` into overlapping chunks. A math span no longer than the step
/// is never cut: a window whose end falls inside one is shortened to the span
/// start and the next window starts early enough to hold it whole.
pub fn chunk_document(text: &str, params: ChunkParams) -> Result<Vec<DocumentChunk>, AssistantError> {
    params.validate()?;
    let id = doc_id(text);
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let len = chars.len();
    let byte_at = |c: usize| chars.get(c).map_or(text.len(), |&(b, _)| b);
    let char_of = |b: usize| chars.partition_point(|&(x, _)| x < b);
    let math: Vec<(usize, usize)> = math_spans(text).into_iter().map(|(a, b)| (char_of(a), char_of(b))).collect();
    let step = params.size - params.overlap;

    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        let mut end = (start + params.size).min(len);
        if end < len {
            if let Some(&(ms, _)) = math.iter().find(|&&(ms, me)| ms < end && end < me && me - ms <= step) {
                if ms > start + params.overlap {
                    end = ms;
                }
            }
        }
        spans.push((start, end));
        if end >= len {
            break;
        }
        start = (end - params.overlap).max(start + 1);
    }

    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let preserved_math = math
                .iter()
                .filter(|&&(ms, me)| ms >= a && me <= b)
                .map(|&(ms, me)| text[byte_at(ms)..byte_at(me)].to_string())
                .collect();
            DocumentChunk {
                doc_id: id.clone(),
                chunk_index: i,
                text: text[byte_at(a)..byte_at(b)].to_string(),
                char_span: (a, b),
                preserved_math,
                source: None,
            }
        })
        .collect())
}

/// Rebuild a document from its chunks by dropping each chunk's overlap with
/// the previous one.
pub fn reconstruct(chunks: &[DocumentChunk]) -> String {
    let mut out = String::new();
    let mut covered = 0;
    for c in chunks {
        let (a, b) = c.char_span;
        if b <= covered {
            continue;
        }
        out.extend(c.text.chars().skip(covered.saturating_sub(a)));
        covered = b;
    }
    out
}

/// Produces fixed-dimension unit vectors for texts.
pub trait Embedder {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>, AssistantError>;
}

/// Hashed bag of words; deterministic and offline.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: HASH_DIM }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    }
}

impl HashEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let h = fnv1a(&word.to_lowercase());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        normalize(&mut v);
        v
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>, AssistantError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` service; key from `MCFORGE_EMBED_KEY`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub url: String,
    pub model: String,
    pub dim: usize,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl HttpEmbedder {
    pub fn from_env(url: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        HttpEmbedder {
            url: url.into(),
            model: model.into(),
            dim,
            api_key: std::env::var(EMBED_KEY_VAR).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>, AssistantError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = EmbeddingRequest {
            model: &self.model,
            input: texts,
        };
        let resp: EmbeddingResponse = chat::post_json(&self.url, self.api_key.as_deref(), &body)?;
        if resp.data.len() != texts.len() {
            return Err(AssistantError::ProviderError(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(AssistantError::DimensionMismatch {
                        expected: self.dim,
                        got: d.embedding.len(),
                    });
                }
                let mut v = d.embedding;
                normalize(&mut v);
                Ok(v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedChunk {
    pub chunk: DocumentChunk,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub source: String,
    pub chunks: usize,
    pub ingested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub embedder: Option<String>,
    pub dim: Option<usize>,
    pub chunk_size: usize,
    pub overlap: usize,
    pub documents: BTreeMap<String, IngestRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub entries: Vec<EmbeddedChunk>,
}

fn atomic_write(path: &Path, contents: &[u8]) -> Result<(), AssistantError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct StoreLock(PathBuf);

impl StoreLock {
    fn acquire(dir: &Path) -> Result<Self, AssistantError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AssistantError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl VectorStore {
    /// Open the store in `dir`, or an empty one if it does not exist yet.
    pub fn open(dir: &Path) -> Result<Self, AssistantError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let corrupt = |path: &Path, reason: String| AssistantError::CorruptStore {
            path: path.to_path_buf(),
            reason,
        };
        let manifest = match fs::read_to_string(&manifest_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| corrupt(&manifest_path, e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest {
                chunk_size: DEFAULT_CHUNK_SIZE,
                overlap: DEFAULT_OVERLAP,
                ..Manifest::default()
            },
            Err(e) => return Err(io_err(&manifest_path)(e)),
        };
        let vectors_path = dir.join(VECTORS_FILE);
        let mut entries = Vec::new();
        match fs::read_to_string(&vectors_path) {
            Ok(text) => {
                for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let e: EmbeddedChunk = serde_json::from_str(line)
                        .map_err(|e| corrupt(&vectors_path, format!("line {}: {e}", n + 1)))?;
                    entries.push(e);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&vectors_path)(e)),
        }
        Ok(VectorStore {
            path: dir.to_path_buf(),
            manifest,
            entries,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn save(&self) -> Result<(), AssistantError> {
        let mut vectors = String::new();
        for e in &self.entries {
            vectors.push_str(&serde_json::to_string(e).expect("chunk serializes"));
            vectors.push('\n');
        }
        atomic_write(&self.path.join(VECTORS_FILE), vectors.as_bytes())?;
        let mut manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        manifest.push('\n');
        atomic_write(&self.path.join(MANIFEST_FILE), manifest.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestCounts {
    pub new_docs: usize,
    pub new_chunks: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub chunking: ChunkParams,
    /// Command run as `<cmd> <file.pdf>`; its stdout is the text.
    pub pdf_command: Option<String>,
}

fn read_document(path: &Path, opts: &IngestOptions) -> Result<Option<String>, AssistantError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "txt" | "md" | "markdown" | "tex" => fs::read_to_string(path).map(Some).map_err(|e| {
            AssistantError::ExtractionFailed {
                file: path.to_path_buf(),
                reason: e.to_string(),
            }
        }),
        "pdf" => {
            let Some(cmd) = &opts.pdf_command else {
                return Ok(None);
            };
            let fail = |reason: String| AssistantError::ExtractionFailed {
                file: path.to_path_buf(),
                reason,
            };
            let mut parts = cmd.split_whitespace();
            let program = parts.next().ok_or_else(|| fail("empty extraction command".into()))?;
            let out = Command::new(program)
                .args(parts)
                .arg(path)
                .output()
                .map_err(|e| fail(e.to_string()))?;
            if !out.status.success() {
                return Err(fail(format!(
                    "{} exited with {}: {}",
                    program,
                    out.status,
                    String::from_utf8_lossy(&out.stderr).trim()
                )));
            }
            String::from_utf8(out.stdout).map(Some).map_err(|e| fail(e.to_string()))
        }
        _ => Ok(None),
    }
}

/// Chunk and embed the documents of `dir` whose content is not in the store
/// yet. Nothing is written when there is nothing new.
pub fn ingest(
    dir: &Path,
    store_dir: &Path,
    embedder: &mut dyn Embedder,
    opts: &IngestOptions,
) -> Result<IngestCounts, AssistantError> {
    fs::create_dir_all(store_dir).map_err(io_err(store_dir))?;
    let _lock = StoreLock::acquire(store_dir)?;
    let mut store = VectorStore::open(store_dir)?;
    if let Some(dim) = store.manifest.dim {
        if dim != embedder.dim() {
            return Err(AssistantError::DimensionMismatch {
                expected: dim,
                got: embedder.dim(),
            });
        }
    }

    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    let mut counts = IngestCounts::default();
    let mut seen: HashSet<String> = store.manifest.documents.keys().cloned().collect();
    for file in files {
        let Some(text) = read_document(&file, opts)? else {
            continue;
        };
        let id = doc_id(&text);
        if text.is_empty() || !seen.insert(id.clone()) {
            continue;
        }
        let source = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut chunks = chunk_document(&text, opts.chunking)?;
        chunks.iter_mut().for_each(|c| c.source = Some(source.clone()));
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = embedder.embed(&texts)?;
        counts.new_docs += 1;
        counts.new_chunks += chunks.len();
        store.manifest.documents.insert(
            id,
            IngestRecord {
                source,
                chunks: chunks.len(),
                ingested_at: Utc::now(),
            },
        );
        store
            .entries
            .extend(chunks.into_iter().zip(vectors).map(|(chunk, vector)| EmbeddedChunk { chunk, vector }));
    }

    if counts.new_docs > 0 {
        store.manifest.embedder = Some(embedder.id());
        store.manifest.dim = Some(embedder.dim());
        store.manifest.chunk_size = opts.chunking.size;
        store.manifest.overlap = opts.chunking.overlap;
        store.save()?;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub chunk: DocumentChunk,
    pub score: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top-k chunks by cosine similarity to the query.
pub fn retrieve(
    query: &str,
    store: &VectorStore,
    embedder: &mut dyn Embedder,
    k: usize,
) -> Result<Vec<Retrieved>, AssistantError> {
    if store.is_empty() {
        return Err(AssistantError::EmptyStore);
    }
    let q = embedder
        .embed(&[query.to_string()])?
        .pop()
        .ok_or_else(|| AssistantError::ProviderError("no embedding returned for the query".into()))?;
    let mut scored: Vec<Retrieved> = store
        .entries
        .iter()
        .map(|e| Retrieved {
            chunk: e.chunk.clone(),
            score: cosine(&q, &e.vector),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.chunk.doc_id.cmp(&b.chunk.doc_id))
            .then_with(|| a.chunk.chunk_index.cmp(&b.chunk.chunk_index))
    });
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub cited: Vec<String>,
}

pub const SYSTEM_PREAMBLE: &str = "You answer questions about Monte Carlo radiation transport using the \
context excerpts below. Cite excerpts by their [id]. Say so when the context does not contain the answer.";

pub struct AnswerOptions {
    pub model: String,
    pub k: usize,
}

impl Default for AnswerOptions {
    fn default() -> Self {
        AnswerOptions {
            model: "gpt-4o".into(),
            k: 4,
        }
    }
}

/// Retrieve context for `question`, ask the endpoint and remember the exchange.
pub fn answer(
    question: &str,
    store: &VectorStore,
    embedder: &mut dyn Embedder,
    endpoint: &mut dyn ChatEndpoint,
    memory: &mut Memory,
    opts: &AnswerOptions,
) -> Result<Answer, AssistantError> {
    let hits = retrieve(question, store, embedder, opts.k)?;
    let mut context = String::from("Context:\n");
    for h in &hits {
        context.push_str(&format!("[{}]\n{}\n\n", h.chunk.id(), h.chunk.text));
    }
    let mut messages = vec![ChatMessage::system(format!("{SYSTEM_PREAMBLE}\n\n{context}"))];
    for ex in &memory.exchanges {
        messages.push(ChatMessage::user(ex.question.clone()));
        messages.push(ChatMessage::assistant(ex.answer.clone()));
    }
    let cited: Vec<String> = hits.iter().map(|h| h.chunk.id()).collect();
    messages.push(ChatMessage::user(format!(
        "{question}\n\nRelevant excerpts: {}",
        cited.iter().map(|c| format!("[{c}]")).collect::<Vec<_>>().join(" ")
    )));
    let reply = endpoint.complete(&ChatRequest {
        model: opts.model.clone(),
        messages,
        tools: Vec::new(),
    })?;
    let text = reply.content_text().to_string();
    memory.exchanges.push(Exchange {
        question: question.to_string(),
        answer: text.clone(),
    });
    Ok(Answer { text, cited })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_follow_step() {
        let p = ChunkParams::default();
        assert_eq!(chunk_spans(2500, p), vec![(0, 1000), (800, 1800), (1600, 2500)]);
        assert_eq!(chunk_spans(1000, p), vec![(0, 1000)]);
        assert_eq!(chunk_spans(0, p), vec![(0, 0)]);
    }

    #[test]
    fn math_capture() {
        let t = r"inline $a+b$ and \[ x^2 \] and \(y\) and \begin{equation} E=mc^2 \end{equation}";
        assert_eq!(math_spans(t).len(), 4);
    }

    #[test]
    fn math_not_split() {
        let p = ChunkParams { size: 20, overlap: 5 };
        let text = format!("{}$x^2+y^2$ tail text here and more", "a".repeat(15));
        let chunks = chunk_document(&text, p).unwrap();
        assert!(chunks.iter().any(|c| c.preserved_math == vec!["$x^2+y^2$".to_string()]));
        assert_eq!(reconstruct(&chunks), text);
    }

    #[test]
    fn hash_embedding_is_unit() {
        let v = HashEmbedder::default().embed_one("Neutron fluence in water");
        let n: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
