//! Filtering strategies and deterministic top-K selection.

use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use alloc::collections::BinaryHeap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::align::{score_components, combine, AlignmentBreakdown, ImageTextMode, ScoringUnit, UnitError, Weights};

/// A named selection policy.
///
/// `TextOnly` and `ImageOnly` reproduce the single-encoder baselines
/// (LaBSE-style text similarity, CLIP-style image similarity);
/// `ObjectAblated` drops the object-text term from the full metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterStrategy {
    Ours,
    TextOnly,
    ImageOnly,
    ObjectAblated,
    Random { seed: u64 },
}

impl FilterStrategy {
    pub const NAMES: [&'static str; 5] = ["ours", "text-only", "image-only", "object-ablated", "random"];

    /// Parses a strategy name; `seed` is only used by `random`.
    pub fn parse(name: &str, seed: u64) -> Result<Self, UnknownStrategy> {
        match name {
            "ours" => Ok(Self::Ours),
            "text-only" => Ok(Self::TextOnly),
            "image-only" => Ok(Self::ImageOnly),
            "object-ablated" => Ok(Self::ObjectAblated),
            "random" => Ok(Self::Random { seed }),
            other => Err(UnknownStrategy(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::TextOnly => "text-only",
            Self::ImageOnly => "image-only",
            Self::ObjectAblated => "object-ablated",
            Self::Random { .. } => "random",
        }
    }

    /// Component weights, or `None` for `random`, which ignores scores.
    pub fn weights(&self) -> Option<Weights> {
        match self {
            Self::Ours => Some(Weights::new(1.0, 1.0, 1.0)),
            Self::TextOnly => Some(Weights::new(1.0, 0.0, 0.0)),
            Self::ImageOnly => Some(Weights::new(0.0, 1.0, 0.0)),
            Self::ObjectAblated => Some(Weights::new(1.0, 1.0, 0.0)),
            Self::Random { .. } => None,
        }
    }
}

impl fmt::Display for FilterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterStrategy {
    type Err = UnknownStrategy;

    /// `random` parses with seed 0; use [`FilterStrategy::parse`] to pick one.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy {0:?} (expected one of ours, text-only, image-only, object-ablated, random)")]
pub struct UnknownStrategy(pub String);

/// Pseudo-random key in `[0, 1)` that depends only on `(seed, id)`.
pub fn random_key(seed: u64, id: &str) -> f64 {
    // FNV-1a over the id, then the splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in id.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<AlignmentBreakdown>,
}

impl RankedEntry {
    /// Ordering key: score descending, then id ascending. `Less` means `self`
    /// ranks ahead of `other`.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(&other.id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterOptions {
    /// Exclude units without detected objects instead of scoring their object
    /// term as zero.
    pub drop_undefined_objects: bool,
}

/// Ranks one already-scored record under `strategy`. Returns `None` when the
/// options exclude it.
pub fn entry_for(
    id: &str,
    breakdown: &AlignmentBreakdown,
    strategy: FilterStrategy,
    options: FilterOptions,
) -> Result<Option<RankedEntry>, UnitError> {
    if options.drop_undefined_objects && !breakdown.a_ot_defined {
        return Ok(None);
    }
    let (score, breakdown) = match strategy.weights() {
        Some(w) => {
            let b = breakdown.reweight(w).map_err(|source| UnitError { id: id.into(), source })?;
            (b.combined, b)
        }
        None => (random_key(seed_of(strategy), id), *breakdown),
    };
    Ok(Some(RankedEntry { id: id.into(), score, breakdown: Some(breakdown) }))
}

fn seed_of(strategy: FilterStrategy) -> u64 {
    match strategy {
        FilterStrategy::Random { seed } => seed,
        _ => 0,
    }
}

/// Scores a single unit under `strategy`. `random` skips alignment scoring.
pub fn rank_unit(
    unit: &ScoringUnit,
    strategy: FilterStrategy,
    mode: ImageTextMode,
    options: FilterOptions,
) -> Result<Option<RankedEntry>, UnitError> {
    let err = |source| UnitError { id: unit.record.id.clone(), source };
    match strategy.weights() {
        Some(w) => {
            let c = score_components(unit, mode).map_err(err)?;
            if options.drop_undefined_objects && c.a_ot.is_none() {
                return Ok(None);
            }
            let b = combine(c, w).map_err(err)?;
            Ok(Some(RankedEntry { id: unit.record.id.clone(), score: b.combined, breakdown: Some(b) }))
        }
        None => {
            if options.drop_undefined_objects && unit.obj.is_empty() {
                return Ok(None);
            }
            let score = random_key(seed_of(strategy), &unit.record.id);
            Ok(Some(RankedEntry { id: unit.record.id.clone(), score, breakdown: None }))
        }
    }
}

/// Scores every unit under `strategy`, in input order.
pub fn apply_strategy(
    units: &[ScoringUnit],
    strategy: FilterStrategy,
    mode: ImageTextMode,
    options: FilterOptions,
) -> Result<Vec<RankedEntry>, UnitError> {
    let mut out = Vec::with_capacity(units.len());
    for unit in units {
        if let Some(e) = rank_unit(unit, strategy, mode, options)? {
            out.push(e);
        }
    }
    Ok(out)
}

struct Worst(RankedEntry);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    // max-heap: the worst-ranked entry sits on top
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

/// Bounded top-K collector holding at most `k` entries.
///
/// Results equal sorting everything by [`RankedEntry::rank_cmp`] and
/// truncating, independent of insertion order, so per-worker collectors can
/// be merged in any order.
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Worst>,
}

impl fmt::Debug for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TopK").field("k", &self.k).field("len", &self.heap.len()).finish()
    }
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k.min(1 << 20) + 1) }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn push(&mut self, entry: RankedEntry) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Worst(entry));
            return;
        }
        if let Some(mut top) = self.heap.peek_mut() {
            if entry.rank_cmp(&top.0) == Ordering::Less {
                *top = Worst(entry);
            }
        }
    }

    pub fn merge(&mut self, other: TopK) {
        for Worst(e) in other.heap {
            self.push(e);
        }
    }

    /// Entries best-first.
    pub fn into_sorted_vec(self) -> Vec<RankedEntry> {
        self.heap.into_sorted_vec().into_iter().map(|Worst(e)| e).collect()
    }
}

impl Extend<RankedEntry> for TopK {
    fn extend<I: IntoIterator<Item = RankedEntry>>(&mut self, iter: I) {
        for e in iter {
            self.push(e);
        }
    }
}

/// The `k` best entries, best first. `k` larger than the input returns
/// everything.
pub fn rank_topk<I: IntoIterator<Item = RankedEntry>>(entries: I, k: usize) -> Vec<RankedEntry> {
    let mut top = TopK::new(k);
    top.extend(entries);
    top.into_sorted_vec()
}

/// Min, median and max of a score set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreQuantiles {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ScoreQuantiles {
    pub fn from_scores(scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        Some(Self { min: sorted[0], median, max: sorted[n - 1] })
    }
}
