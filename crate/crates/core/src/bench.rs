//! Construction of cross-cultural challenge prompt sets.
//!
//! A text-generation provider is asked, round after round, for five new
//! captions in the style of five examples sampled from the growing pool.
//! Replies are parsed from `Example <k>: <caption>` lines, duplicates under
//! [`normalize_caption`] are dropped, and the finished pool can be
//! subsampled into a small benchmark.
//!
//! The prompt wording and the initial seeds are inputs ([`PromptTemplate`],
//! [`GenerationConfig::seeds`]); nothing here performs I/O.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::normalize_caption;

/// Captions requested per round and seeds shown per prompt.
pub const PER_ROUND: usize = 5;

pub const DEFAULT_ROUND_LIMIT: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BenchError {
    #[error("a prompt needs exactly {PER_ROUND} seeds, got {0}")]
    SeedArity(usize),
    #[error("the initial pool holds {0} distinct seeds; at least {PER_ROUND} are needed")]
    TooFewSeeds(usize),
    #[error("no `Example <k>: <caption>` line found in the response")]
    NoCaptionsParsed,
    #[error("cannot sample {requested} prompts from a pool of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("no prompts to summarize")]
    EmptyGroup,
}

/// Fixed wording of the generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Opening line introducing the list of mistake types.
    pub header: String,
    /// One paragraph per mistake type.
    pub taxonomy: Vec<String>,
    /// The request, followed directly by the seed examples.
    pub request: String,
    /// Output-format instruction preceding the `Example k: Caption<k>` lines.
    pub format_instruction: String,
}

impl PromptTemplate {
    /// Renders the prompt for exactly [`PER_ROUND`] seeds.
    pub fn render<S: AsRef<str>>(&self, seeds: &[S]) -> Result<String, BenchError> {
        if seeds.len() != PER_ROUND {
            return Err(BenchError::SeedArity(seeds.len()));
        }
        let mut out = String::new();
        out.push_str(self.header.trim_end());
        out.push_str("\n\n");
        for para in &self.taxonomy {
            out.push_str(para.trim());
            out.push('\n');
        }
        out.push('\n');
        out.push_str(self.request.trim_end());
        out.push('\n');
        out.push_str(&format_examples(seeds.iter().map(AsRef::as_ref)));
        out.push('\n');
        out.push_str(self.format_instruction.trim_end());
        out.push_str("\n\n");
        let placeholders: Vec<String> = (1..=PER_ROUND).map(|k| format!("Caption{k}")).collect();
        out.push_str(&format_examples(placeholders.iter().map(String::as_str)));
        Ok(out)
    }
}

/// Formats captions as `Example <k>: <caption>` lines, `k` from 1.
pub fn format_examples<'a, I: IntoIterator<Item = &'a str>>(captions: I) -> String {
    let mut out = String::new();
    for (i, c) in captions.into_iter().enumerate() {
        out.push_str(&format!("Example {}: {}\n", i + 1, c.trim()));
    }
    out
}

fn strip_decoration(s: &str) -> &str {
    s.trim().trim_matches(|c: char| c == '*' || c == '"' || c == '\u{201c}' || c == '\u{201d}' || c == '`').trim()
}

/// Parses `Example <k>: <caption>` from one line, tolerating leading noise
/// such as list markers or markdown emphasis.
fn parse_example_line(line: &str) -> Option<(usize, &str)> {
    let lower = line.to_ascii_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find("example") {
        let start = from + pos;
        let rest = &line[start + "example".len()..];
        let rest_trim = rest.trim_start();
        let digits = rest_trim.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            let k: usize = rest_trim[..digits].parse().ok()?;
            let after = rest_trim[digits..].trim_start_matches(['*', ' ']);
            if let Some(caption) = after.strip_prefix(':').or_else(|| after.strip_prefix('\u{ff1a}')) {
                let caption = strip_decoration(caption);
                if (1..=PER_ROUND).contains(&k) && !caption.is_empty() {
                    return Some((k, caption));
                }
            }
        }
        from = start + "example".len();
    }
    None
}

/// Extracts up to five captions from a provider reply, in order of
/// appearance. Repeated example numbers keep their first caption.
pub fn parse_generations(response: &str) -> Result<Vec<String>, BenchError> {
    let mut seen = [false; PER_ROUND];
    let mut out = Vec::new();
    for line in response.lines() {
        if let Some((k, caption)) = parse_example_line(line) {
            if !seen[k - 1] {
                seen[k - 1] = true;
                out.push(caption.to_string());
            }
        }
    }
    if out.is_empty() {
        Err(BenchError::NoCaptionsParsed)
    } else {
        Ok(out)
    }
}

/// A pooled caption with its generation provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkPrompt {
    pub text: String,
    /// Generation round, 0 for initial seeds.
    pub round: u32,
    /// Pool indices of the seeds shown in the prompt that produced this one.
    #[serde(default)]
    pub seed_ids: Vec<usize>,
}

impl BenchmarkPrompt {
    pub fn seed(text: impl Into<String>) -> Self {
        Self { text: text.into(), round: 0, seed_ids: Vec::new() }
    }

    pub fn normalized(&self) -> String {
        normalize_caption(&self.text)
    }
}

impl AsRef<str> for BenchmarkPrompt {
    fn as_ref(&self) -> &str {
        &self.text
    }
}

/// Keeps the first occurrence of every caption under [`normalize_caption`].
pub fn dedup<T: AsRef<str> + Clone>(pool: &[T]) -> Vec<T> {
    let mut seen = BTreeSet::new();
    pool.iter().filter(|p| seen.insert(normalize_caption(p.as_ref()))).cloned().collect()
}

/// Uniform sample of `n` items without replacement, kept in pool order.
pub fn subsample<T: Clone>(pool: &[T], n: usize, seed: u64) -> Result<Vec<T>, BenchError> {
    if n > pool.len() {
        return Err(BenchError::SampleTooLarge { requested: n, available: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Hex SHA-256 of a prompt; the key of replay transcripts.
pub fn request_hash(prompt: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ProviderError(pub String);

/// A text-generation backend: one prompt in, one completion out.
pub trait TextProvider {
    fn generate(&mut self, prompt: &str) -> Result<String, ProviderError>;
}

impl<P: TextProvider + ?Sized> TextProvider for &mut P {
    fn generate(&mut self, prompt: &str) -> Result<String, ProviderError> {
        (**self).generate(prompt)
    }
}

impl<P: TextProvider + ?Sized> TextProvider for alloc::boxed::Box<P> {
    fn generate(&mut self, prompt: &str) -> Result<String, ProviderError> {
        (**self).generate(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub template: PromptTemplate,
    /// Initial pool.
    pub seeds: Vec<String>,
    /// Stop once the pool holds this many prompts (seeds included).
    pub target_count: usize,
    pub rng_seed: u64,
    pub round_limit: u32,
    /// Provider calls per round before the round is recorded as failed.
    pub max_attempts: u32,
}

impl GenerationConfig {
    pub fn new(template: PromptTemplate, seeds: Vec<String>, target_count: usize, rng_seed: u64) -> Self {
        Self { template, seeds, target_count, rng_seed, round_limit: DEFAULT_ROUND_LIMIT, max_attempts: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundFailure {
    pub round: u32,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolStatus {
    Complete,
    /// The round limit ran out before the target was reached.
    PartialPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub pool: Vec<BenchmarkPrompt>,
    pub rounds: u32,
    pub failures: Vec<RoundFailure>,
    pub status: PoolStatus,
}

/// Grows the seed pool until it holds `target_count` distinct prompts or the
/// round limit is exhausted.
///
/// `backoff` is called with the failed attempt number between provider
/// retries; pass a no-op in tests.
pub fn iterate_generation<P: TextProvider + ?Sized>(
    provider: &mut P,
    config: &GenerationConfig,
    backoff: &mut dyn FnMut(u32),
) -> Result<GenerationOutcome, BenchError> {
    let mut pool: Vec<BenchmarkPrompt> = dedup(&config.seeds).into_iter().map(BenchmarkPrompt::seed).collect();
    let mut seen: BTreeSet<String> = pool.iter().map(BenchmarkPrompt::normalized).collect();
    let mut failures = Vec::new();
    let mut rounds = 0;
    if pool.len() < config.target_count && pool.len() < PER_ROUND {
        return Err(BenchError::TooFewSeeds(pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    while pool.len() < config.target_count && rounds < config.round_limit {
        rounds += 1;
        let seed_ids = index::sample(&mut rng, pool.len(), PER_ROUND).into_vec();
        let seeds: Vec<&str> = seed_ids.iter().map(|&i| pool[i].text.as_str()).collect();
        let prompt = config.template.render(&seeds)?;

        let mut reply = Err(ProviderError("no attempt made".into()));
        for attempt in 0..config.max_attempts.max(1) {
            reply = provider.generate(&prompt);
            if reply.is_ok() {
                break;
            }
            if attempt + 1 < config.max_attempts {
                backoff(attempt);
            }
        }
        let captions = match reply.map_err(|e| e.0).and_then(|r| parse_generations(&r).map_err(|e| e.to_string())) {
            Ok(c) => c,
            Err(error) => {
                failures.push(RoundFailure { round: rounds, error });
                continue;
            }
        };
        for text in captions {
            if pool.len() >= config.target_count {
                break;
            }
            if seen.insert(normalize_caption(&text)) {
                pool.push(BenchmarkPrompt { text, round: rounds, seed_ids: seed_ids.clone() });
            }
        }
    }

    let status = if pool.len() >= config.target_count { PoolStatus::Complete } else { PoolStatus::PartialPool };
    Ok(GenerationOutcome { pool, rounds, failures, status })
}

const FUNCTION_WORDS: &[&str] = &[
    "a", "about", "above", "across", "against", "along", "also", "amid", "among", "an", "and", "are", "around", "as",
    "at", "be", "been", "behind", "being", "below", "beneath", "beside", "between", "both", "but", "by", "down",
    "during", "each", "either", "every", "for", "from", "had", "has", "have", "he", "her", "here", "his", "in",
    "inside", "into", "is", "it", "its", "near", "neither", "no", "nor", "not", "of", "off", "on", "onto", "or",
    "out", "outside", "over", "she", "some", "that", "the", "their", "them", "there", "these", "they", "this",
    "those", "through", "to", "toward", "towards", "under", "up", "upon", "very", "was", "were", "when", "where",
    "which", "while", "who", "whose", "with", "within", "without",
];

fn is_verb_like(word: &str) -> bool {
    word.len() > 4 && (word.ends_with("ing") || word.ends_with("ed"))
}

/// Rough object count: maximal runs of content words.
///
/// Function words and clause punctuation end a run; a word ending in `-ing`
/// or `-ed` counts as a verb unless another content word follows it.
pub fn heuristic_object_count(text: &str) -> usize {
    let tokens: Vec<(String, bool)> = text
        .split_whitespace()
        .map(|raw| {
            let ends_clause = raw.ends_with([',', ';', ':', '.', '!', '?']);
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            (word, ends_clause)
        })
        .collect();
    let is_content = |i: usize| {
        let w = &tokens[i].0;
        !w.is_empty() && !FUNCTION_WORDS.contains(&w.as_str())
    };
    let mut count = 0;
    let mut in_run = false;
    for i in 0..tokens.len() {
        let content = is_content(i)
            && !(is_verb_like(&tokens[i].0) && (tokens[i].1 || i + 1 == tokens.len() || !is_content(i + 1)));
        if content && !in_run {
            count += 1;
        }
        in_run = content && !tokens[i].1;
    }
    count
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub mean_words: f64,
    pub mean_objects: f64,
    /// True when any object count came from [`heuristic_object_count`].
    pub objects_heuristic: bool,
}

/// Size, mean word count and mean object count of a prompt set.
///
/// `object_counts[i]`, when present, overrides the heuristic for prompt `i`.
pub fn corpus_stats<S: AsRef<str>>(prompts: &[S], object_counts: &[Option<u32>]) -> Result<CorpusStats, BenchError> {
    if prompts.is_empty() {
        return Err(BenchError::EmptyGroup);
    }
    let mut words = 0usize;
    let mut objects = 0usize;
    let mut heuristic = false;
    for (i, p) in prompts.iter().enumerate() {
        words += word_count(p.as_ref());
        objects += match object_counts.get(i).copied().flatten() {
            Some(c) => c as usize,
            None => {
                heuristic = true;
                heuristic_object_count(p.as_ref())
            }
        };
    }
    let n = prompts.len() as f64;
    Ok(CorpusStats {
        count: prompts.len(),
        mean_words: words as f64 / n,
        mean_objects: objects as f64 / n,
        objects_heuristic: heuristic,
    })
}
