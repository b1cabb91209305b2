//! Parallel scoring with per-worker top-K, and emission of the filtered
//! manifest and its summary line.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, Write};

use crossalign_core::align::{ImageTextMode, UnitError};
use crossalign_core::filter::{rank_unit, FilterOptions, FilterStrategy, RankedEntry, ScoreQuantiles, TopK};
use crossalign_core::ScoringUnit;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub fn thread_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Result of ranking: the kept entries plus per-unit failures, sorted by id.
#[derive(Debug)]
pub struct Ranked {
    pub top: TopK,
    pub errors: Vec<UnitError>,
    pub scored: usize,
}

impl Ranked {
    fn empty(k: usize) -> Self {
        Self { top: TopK::new(k), errors: Vec::new(), scored: 0 }
    }

    fn absorb(&mut self, item: Result<Option<RankedEntry>, UnitError>) {
        match item {
            Ok(Some(e)) => {
                self.scored += 1;
                self.top.push(e);
            }
            Ok(None) => {}
            Err(e) => self.errors.push(e),
        }
    }

    fn merge(mut self, other: Ranked) -> Ranked {
        self.top.merge(other.top);
        self.errors.extend(other.errors);
        self.scored += other.scored;
        self
    }

    pub fn merge_batch(self, other: Ranked) -> Ranked {
        let mut merged = self.merge(other);
        merged.errors.sort_by(|a, b| a.id.cmp(&b.id));
        merged
    }
}

/// Ranks `n` items produced on demand by `entry(i)` across the pool's workers.
/// The outcome does not depend on how the range is split.
pub fn par_rank_range<F>(pool: &rayon::ThreadPool, n: usize, k: usize, entry: F) -> Ranked
where
    F: Fn(usize) -> Result<Option<RankedEntry>, UnitError> + Sync,
{
    let mut out = pool.install(|| {
        (0..n)
            .into_par_iter()
            .fold(
                || Ranked::empty(k),
                |mut acc, i| {
                    acc.absorb(entry(i));
                    acc
                },
            )
            .reduce(|| Ranked::empty(k), Ranked::merge)
    });
    out.errors.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

pub fn par_rank_units(
    pool: &rayon::ThreadPool,
    units: &[ScoringUnit],
    strategy: FilterStrategy,
    mode: ImageTextMode,
    options: FilterOptions,
    k: usize,
) -> Ranked {
    par_rank_range(pool, units.len(), k, |i| rank_unit(&units[i], strategy, mode, options))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub strategy: String,
    pub k: usize,
    pub selected: usize,
    pub dropped: usize,
    pub min: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Deserialize)]
struct IdOnly {
    id: String,
}

/// Writes the manifest lines of `top`, in rank order, copying each original
/// line byte for byte. Ids absent from the manifest are counted as dropped.
pub fn emit_manifest<R: BufRead, W: Write>(
    top: &[RankedEntry],
    strategy: &str,
    k: usize,
    manifest: R,
    mut out: W,
) -> io::Result<SelectionSummary> {
    let wanted: HashSet<&str> = top.iter().map(|e| e.id.as_str()).collect();
    let mut lines: HashMap<String, String> = HashMap::with_capacity(wanted.len());
    for line in manifest.lines() {
        let line = line?;
        let Ok(IdOnly { id }) = serde_json::from_str::<IdOnly>(&line) else { continue };
        if wanted.contains(id.as_str()) && !lines.contains_key(&id) {
            lines.insert(id, line);
        }
    }
    let mut scores = Vec::with_capacity(top.len());
    let mut dropped = 0;
    for e in top {
        match lines.get(&e.id) {
            Some(line) => {
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
                scores.push(e.score);
            }
            None => dropped += 1,
        }
    }
    out.flush()?;
    let q = ScoreQuantiles::from_scores(&scores);
    Ok(SelectionSummary {
        strategy: strategy.into(),
        k,
        selected: scores.len(),
        dropped,
        min: q.map(|q| q.min),
        median: q.map(|q| q.median),
        max: q.map(|q| q.max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossalign_core::filter::rank_topk;
    use std::io::Cursor;

    fn e(id: &str, score: f64) -> RankedEntry {
        RankedEntry { id: id.into(), score, breakdown: None }
    }

    fn manifest(ids: &[&str]) -> String {
        ids.iter()
            .map(|id| format!(r#"{{"id":"{id}", "image_ref":"{id}.jpg","caption_src":"s","caption_tgt":"t"}}"#))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn emits_original_lines() {
        let text = manifest(&["a", "b", "c"]);
        let mut out = Vec::new();
        let s = emit_manifest(&[e("b", 1.0)], "ours", 1, Cursor::new(&text), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{}\n", text.lines().nth(1).unwrap()));
        assert_eq!((s.selected, s.dropped), (1, 0));
    }

    #[test]
    fn missing_ids_are_dropped() {
        let mut out = Vec::new();
        let s = emit_manifest(&[e("zz", 1.0)], "ours", 1, Cursor::new(manifest(&["a"])), &mut out).unwrap();
        assert!(out.is_empty());
        assert_eq!((s.selected, s.dropped, s.min), (0, 1, None));
    }

    #[test]
    fn summary_counts_and_quantiles() {
        let ids: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let entries: Vec<_> = ids.iter().enumerate().map(|(i, id)| e(id, i as f64)).collect();
        let top = rank_topk(entries, 3);
        let mut out = Vec::new();
        let s = emit_manifest(&top, "text-only", 3, Cursor::new(manifest(&refs)), &mut out).unwrap();
        assert_eq!((s.selected, s.dropped), (3, 0));
        assert_eq!((s.min, s.median, s.max), (Some(7.0), Some(8.0), Some(9.0)));
        let order: Vec<_> = String::from_utf8(out).unwrap().lines().map(|l| l[7..9].to_string()).collect();
        assert_eq!(order, ["u9", "u8", "u7"]);
    }

    #[test]
    fn parallel_rank_matches_serial() {
        let pool = thread_pool(4);
        let score = |i: usize| ((i * 7919) % 1000) as f64 / 10.0;
        let got = par_rank_range(&pool, 10_000, 25, |i| Ok(Some(e(&format!("{i:05}"), score(i)))));
        let want = rank_topk((0..10_000).map(|i| e(&format!("{i:05}"), score(i))), 25);
        assert_eq!(got.top.into_sorted_vec(), want);
        assert_eq!(got.scored, 10_000);
    }
}
