//! Files and providers around benchmark generation: the default prompt
//! template and seed captions, prompt-pool files, and text-generation
//! providers (HTTP, recording, transcript replay).

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufRead, Write};
use std::time::Duration;

use crossalign_core::bench::{request_hash, BenchmarkPrompt, PromptTemplate, ProviderError, TextProvider};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TEMPLATE_JSON: &str = include_str!("../assets/prompt_template.json");
pub const DEFAULT_SEEDS: &str = include_str!("../assets/seeds.txt");
pub const RUBRICS_JSON: &str = include_str!("../assets/rubrics.json");

pub fn default_template() -> PromptTemplate {
    serde_json::from_str(DEFAULT_TEMPLATE_JSON).expect("bundled template is valid")
}

pub fn default_seeds() -> Vec<String> {
    DEFAULT_SEEDS.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

/// One prompt of a text or pool file, with the id used to look up object
/// counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLine {
    pub id: String,
    pub prompt: BenchmarkPrompt,
}

#[derive(Deserialize)]
struct PoolRow {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    round: u32,
    #[serde(default)]
    seed_ids: Vec<usize>,
}

/// Reads prompts from either a pool file (`{text, round, seed_ids}` per line)
/// or plain text (one caption per line). Lines without an `id` get their
/// 1-based line number.
pub fn read_prompts<R: BufRead>(reader: R) -> io::Result<Vec<PromptLine>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let default_id = (i + 1).to_string();
        let parsed = trimmed.starts_with('{').then(|| serde_json::from_str::<PoolRow>(trimmed).ok()).flatten();
        out.push(match parsed {
            Some(row) => PromptLine {
                id: row.id.unwrap_or(default_id),
                prompt: BenchmarkPrompt { text: row.text, round: row.round, seed_ids: row.seed_ids },
            },
            None => PromptLine { id: default_id, prompt: BenchmarkPrompt::seed(trimmed) },
        });
    }
    Ok(out)
}

pub fn write_pool<W: Write>(mut w: W, pool: &[BenchmarkPrompt]) -> io::Result<()> {
    for p in pool {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// `{id, count}` lines giving per-prompt object counts.
pub fn read_object_counts<R: BufRead>(reader: R) -> io::Result<HashMap<String, u32>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        count: u32,
    }
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.insert(row.id, row.count);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_hash: String,
    pub response_text: String,
}

/// Calls a provider endpoint: `POST {prompt}` answered by `{text}`.
#[derive(Debug)]
pub struct HttpProvider {
    url: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().new_agent();
        Self { url: url.into(), agent }
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

impl TextProvider for HttpProvider {
    fn generate(&mut self, prompt: &str) -> Result<String, ProviderError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(GenerateRequest { prompt })
            .map_err(|e| ProviderError(e.to_string()))?;
        let body: GenerateResponse = resp.body_mut().read_json().map_err(|e| ProviderError(e.to_string()))?;
        Ok(body.text)
    }
}

/// Wraps a provider and appends every successful exchange to a transcript.
#[derive(Debug)]
pub struct RecordingProvider<P, W> {
    inner: P,
    out: W,
}

impl<P: TextProvider, W: Write> RecordingProvider<P, W> {
    pub fn new(inner: P, out: W) -> Self {
        Self { inner, out }
    }

    pub fn into_inner(self) -> (P, W) {
        (self.inner, self.out)
    }
}

impl<P: TextProvider, W: Write> TextProvider for RecordingProvider<P, W> {
    fn generate(&mut self, prompt: &str) -> Result<String, ProviderError> {
        let text = self.inner.generate(prompt)?;
        let entry = TranscriptEntry { request_hash: request_hash(prompt), response_text: text.clone() };
        let mut line = serde_json::to_vec(&entry).map_err(|e| ProviderError(e.to_string()))?;
        line.push(b'\n');
        self.out.write_all(&line).and_then(|_| self.out.flush()).map_err(|e| ProviderError(e.to_string()))?;
        Ok(text)
    }
}

/// Answers from a recorded transcript. Repeated prompts consume their
/// recorded responses in order.
#[derive(Debug, Default)]
pub struct ReplayProvider {
    responses: HashMap<String, VecDeque<String>>,
}

impl ReplayProvider {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut responses: HashMap<String, VecDeque<String>> = HashMap::new();
        for e in entries {
            responses.entry(e.request_hash).or_default().push_back(e.response_text);
        }
        Self { responses }
    }

    pub fn read<R: BufRead>(reader: R) -> io::Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str::<TranscriptEntry>(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("transcript line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self::from_entries(entries))
    }
}

impl TextProvider for ReplayProvider {
    fn generate(&mut self, prompt: &str) -> Result<String, ProviderError> {
        let hash = request_hash(prompt);
        self.responses
            .get_mut(&hash)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| ProviderError(format!("no recorded response for request {hash}")))
    }
}

/// Sleeps `base * 2^attempt`, capped at 30 s.
pub fn exponential_backoff(base: Duration) -> impl FnMut(u32) {
    move |attempt| std::thread::sleep((base * 2u32.saturating_pow(attempt.min(16))).min(Duration::from_secs(30)))
}
