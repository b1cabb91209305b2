//! Meta-evaluation of automatic metrics against human judgments.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rubric::{Rubric, MAX_SCORE, MIN_SCORE};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("need at least 3 paired samples, got {0}")]
    InsufficientSamples(usize),
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("a sequence has zero variance")]
    DegenerateVariance,
    #[error("no judgment joins a metric score")]
    EmptyJoin,
    #[error("no judgments in group {0:?}")]
    EmptyGroup(String),
    #[error("criterion {criterion:?} is not part of the {rubric} rubric")]
    UnknownCriterion { rubric: Rubric, criterion: String },
}

/// One human score for one criterion of one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanJudgment {
    pub item_id: String,
    pub annotator_id: String,
    pub rubric: Rubric,
    pub criterion: String,
    pub score: u8,
    /// Milliseconds since the Unix epoch.
    pub ts: u64,
    /// Generating system, for image-rubric judgments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_tag: Option<String>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson product-moment correlation, clamped to `[-1, 1]`.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(EvalError::InsufficientSamples(n));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Two-sided p-value of `r` over `n` samples under the t approximation with
/// `n - 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> Option<f64> {
    if n < 3 || !r.is_finite() {
        return None;
    }
    let df = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return Some(0.0);
    }
    let t2 = r2 * df / (1.0 - r2);
    Some(regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0))
}

/// `I_x(a, b)` by the continued fraction expansion, modified Lentz method.
fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let tiny_guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / tiny_guard(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 / tiny_guard(1.0 + num * d);
        c = tiny_guard(1.0 + num / c);
        h *= d * c;
        let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 / tiny_guard(1.0 + num * d);
        c = tiny_guard(1.0 + num / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Computed,
    /// Fewer than three joined items.
    TooFewSamples,
    DegenerateVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub n: usize,
    pub status: CellStatus,
    pub r: Option<f64>,
    /// Reported for information only.
    pub p_value: Option<f64>,
}

impl CorrelationCell {
    fn from_pairs(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len();
        match pearson(xs, ys) {
            Ok(r) => Self { n, status: CellStatus::Computed, r: Some(r), p_value: correlation_p_value(r, n) },
            Err(EvalError::DegenerateVariance) => {
                Self { n, status: CellStatus::DegenerateVariance, r: None, p_value: None }
            }
            Err(_) => Self { n, status: CellStatus::TooFewSamples, r: None, p_value: None },
        }
    }
}

/// How the "All" column is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllMode {
    /// One correlation over every aggregated `(item, criterion)` pair.
    #[default]
    Pooled,
    /// Mean of the computed per-criterion coefficients.
    MeanOfR,
}

impl core::str::FromStr for AllMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(AllMode::Pooled),
            "mean-of-r" => Ok(AllMode::MeanOfR),
            other => Err(alloc::format!("unknown all-mode {other:?} (expected pooled or mean-of-r)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rubric: Rubric,
    /// Cells in the rubric's criterion order.
    pub criteria: Vec<(String, CorrelationCell)>,
    pub all: CorrelationCell,
    pub all_mode: AllMode,
}

impl CorrelationTable {
    pub fn cell(&self, criterion: &str) -> Option<&CorrelationCell> {
        self.criteria.iter().find(|(c, _)| c == criterion).map(|(_, cell)| cell)
    }
}

/// Mean human score per `(item, criterion)` for one rubric.
pub fn mean_by_item(
    judgments: &[HumanJudgment],
    rubric: Rubric,
) -> Result<BTreeMap<(String, usize), f64>, EvalError> {
    let mut sums: BTreeMap<(String, usize), (f64, u32)> = BTreeMap::new();
    for j in judgments.iter().filter(|j| j.rubric == rubric) {
        let idx = rubric
            .criterion_index(&j.criterion)
            .ok_or_else(|| EvalError::UnknownCriterion { rubric, criterion: j.criterion.clone() })?;
        let slot = sums.entry((j.item_id.clone(), idx)).or_insert((0.0, 0));
        slot.0 += f64::from(j.score);
        slot.1 += 1;
    }
    Ok(sums.into_iter().map(|(k, (s, c))| (k, s / f64::from(c))).collect())
}

/// Correlates `metric` with mean human scores, per criterion and overall.
///
/// Judgments of other rubrics and items without a metric score are ignored.
pub fn correlate_by_criterion(
    judgments: &[HumanJudgment],
    metric: &BTreeMap<String, f64>,
    rubric: Rubric,
    all_mode: AllMode,
) -> Result<CorrelationTable, EvalError> {
    let means = mean_by_item(judgments, rubric)?;
    let mut per_criterion: Vec<(Vec<f64>, Vec<f64>)> = (0..rubric.criteria().len()).map(|_| Default::default()).collect();
    let mut joined = false;
    for ((item, idx), human) in &means {
        if let Some(&m) = metric.get(item) {
            per_criterion[*idx].0.push(m);
            per_criterion[*idx].1.push(*human);
            joined = true;
        }
    }
    if !joined {
        return Err(EvalError::EmptyJoin);
    }
    let criteria: Vec<(String, CorrelationCell)> = rubric
        .criteria()
        .zip(&per_criterion)
        .map(|(name, (xs, ys))| (name.into(), CorrelationCell::from_pairs(xs, ys)))
        .collect();
    let all = match all_mode {
        AllMode::Pooled => {
            let xs: Vec<f64> = per_criterion.iter().flat_map(|(x, _)| x.iter().copied()).collect();
            let ys: Vec<f64> = per_criterion.iter().flat_map(|(_, y)| y.iter().copied()).collect();
            CorrelationCell::from_pairs(&xs, &ys)
        }
        AllMode::MeanOfR => {
            let rs: Vec<f64> = criteria.iter().filter_map(|(_, c)| c.r).collect();
            let n = criteria.iter().map(|(_, c)| c.n).sum();
            if rs.is_empty() {
                CorrelationCell { n, status: CellStatus::TooFewSamples, r: None, p_value: None }
            } else {
                CorrelationCell { n, status: CellStatus::Computed, r: Some(mean(&rs)), p_value: None }
            }
        }
    };
    Ok(CorrelationTable { rubric, criteria, all, all_mode })
}

/// Per-criterion mean scores of one system, in rubric column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionMeans {
    pub system: String,
    pub rubric: Rubric,
    pub means: Vec<(String, Option<f64>)>,
    pub n: usize,
}

/// Mean image-rubric score per criterion over the judgments tagged `system`.
pub fn aggregate_image_scores(judgments: &[HumanJudgment], system: &str) -> Result<CriterionMeans, EvalError> {
    let rubric = Rubric::Image;
    let mut sums = [(0u64, 0u64); 6];
    let mut n = 0;
    for j in judgments.iter().filter(|j| j.rubric == rubric && j.system_tag.as_deref() == Some(system)) {
        let idx = rubric
            .criterion_index(&j.criterion)
            .ok_or_else(|| EvalError::UnknownCriterion { rubric, criterion: j.criterion.clone() })?;
        sums[idx].0 += u64::from(j.score);
        sums[idx].1 += 1;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyGroup(system.into()));
    }
    let means = rubric
        .criteria()
        .zip(sums)
        .map(|(c, (s, k))| (c.into(), (k > 0).then(|| s as f64 / k as f64)))
        .collect();
    Ok(CriterionMeans { system: system.into(), rubric, means, n })
}

/// Systems present among image-rubric judgments, sorted.
pub fn image_systems(judgments: &[HumanJudgment]) -> Vec<String> {
    let mut systems: Vec<String> = judgments
        .iter()
        .filter(|j| j.rubric == Rubric::Image)
        .filter_map(|j| j.system_tag.clone())
        .collect();
    systems.sort();
    systems.dedup();
    systems
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// Counts for scores 1 through 5.
    pub counts: [u64; 5],
    pub n: u64,
    /// Share of scores `>= 3`; `None` for an empty input.
    pub above_average: Option<f64>,
    /// Scores outside 1-5, not counted.
    pub out_of_range: u64,
}

pub fn score_histogram<I: IntoIterator<Item = u8>>(scores: I) -> ScoreHistogram {
    let mut counts = [0u64; 5];
    let mut out_of_range = 0;
    for s in scores {
        if (MIN_SCORE..=MAX_SCORE).contains(&s) {
            counts[usize::from(s - MIN_SCORE)] += 1;
        } else {
            out_of_range += 1;
        }
    }
    let n: u64 = counts.iter().sum();
    let above = counts[2..].iter().sum::<u64>();
    ScoreHistogram { counts, n, above_average: (n > 0).then(|| above as f64 / n as f64), out_of_range }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::{format, vec};

    fn j(item: &str, annotator: &str, criterion: &str, score: u8) -> HumanJudgment {
        HumanJudgment {
            item_id: item.into(),
            annotator_id: annotator.into(),
            rubric: Rubric::Caption,
            criterion: criterion.into(),
            score,
            ts: 0,
            system_tag: None,
        }
    }

    fn img(system: &str, criterion: &str, score: u8) -> HumanJudgment {
        HumanJudgment { rubric: Rubric::Image, system_tag: Some(system.into()), ..j("i", "a", criterion, score) }
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(EvalError::InsufficientSamples(2)));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]), Err(EvalError::DegenerateVariance));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0]), Err(EvalError::LengthMismatch(3, 1)));
    }

    #[test]
    fn p_value_matches_student_t() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &(r, n) in &[(0.5f64, 3usize), (0.211, 500), (-0.086, 500), (0.9, 10), (0.05, 40)] {
            let df = (n - 2) as f64;
            let t = r.abs() * (df / (1.0 - r * r)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            let expected = 2.0 * (1.0 - dist.cdf(t));
            let got = correlation_p_value(r, n).unwrap();
            assert!((got - expected).abs() < 1e-9, "r={r} n={n}: {got} vs {expected}");
        }
        assert_eq!(correlation_p_value(1.0, 10), Some(0.0));
        assert_eq!(correlation_p_value(0.3, 2), None);
    }

    #[test]
    fn monotone_judgments_correlate() {
        // metric near integer levels, judgments are the rounded metric
        let mut js = vec![];
        let mut metric = BTreeMap::new();
        for i in 0..50u32 {
            let level = 1 + i % 5;
            let jitter = f64::from(i % 7) * 0.01 - 0.03;
            let id = format!("item{i}");
            metric.insert(id.clone(), f64::from(level) + jitter);
            js.push(j(&id, "a1", "adequacy", level as u8));
        }
        let t = correlate_by_criterion(&js, &metric, Rubric::Caption, AllMode::Pooled).unwrap();
        assert!(t.cell("adequacy").unwrap().r.unwrap() >= 0.99);
        assert_eq!(t.cell("fluency").unwrap().status, CellStatus::TooFewSamples);
        assert_eq!(t.criteria.len(), 6);
    }

    #[test]
    fn constant_judgments_are_degenerate() {
        let mut js = vec![];
        let mut metric = BTreeMap::new();
        for i in 0..5 {
            let id = format!("item{i}");
            metric.insert(id.clone(), f64::from(i));
            js.push(j(&id, "a1", "fluency", 3));
        }
        let t = correlate_by_criterion(&js, &metric, Rubric::Caption, AllMode::Pooled).unwrap();
        assert_eq!(t.cell("fluency").unwrap().status, CellStatus::DegenerateVariance);
        assert_eq!(t.all.status, CellStatus::DegenerateVariance);
    }

    #[test]
    fn annotators_are_averaged_before_correlation() {
        let mut metric = BTreeMap::new();
        let mut js = vec![];
        for (i, (a, b)) in [(1u8, 3u8), (2, 4), (5, 5), (1, 1)].iter().enumerate() {
            let id = format!("x{i}");
            metric.insert(id.clone(), i as f64);
            js.push(j(&id, "a1", "context", *a));
            js.push(j(&id, "a2", "context", *b));
        }
        let t = correlate_by_criterion(&js, &metric, Rubric::Caption, AllMode::Pooled).unwrap();
        let expected = pearson(&[0.0, 1.0, 2.0, 3.0], &[2.0, 3.0, 5.0, 1.0]).unwrap();
        assert!((t.cell("context").unwrap().r.unwrap() - expected).abs() < 1e-15);
        assert_eq!(t.cell("context").unwrap().n, 4);
    }

    #[test]
    fn empty_join_and_unknown_criterion() {
        let metric: BTreeMap<String, f64> = [("other".into(), 1.0)].into_iter().collect();
        assert_eq!(
            correlate_by_criterion(&[j("x", "a", "adequacy", 3)], &metric, Rubric::Caption, AllMode::Pooled),
            Err(EvalError::EmptyJoin)
        );
        assert!(matches!(
            correlate_by_criterion(&[j("x", "a", "presence", 3)], &metric, Rubric::Caption, AllMode::Pooled),
            Err(EvalError::UnknownCriterion { .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let js = vec![img("vanilla", "presence", 3), img("vanilla", "presence", 4), img("ours", "presence", 5)];
        let m = aggregate_image_scores(&js, "vanilla").unwrap();
        assert_eq!(m.means[0], ("presence".into(), Some(3.5)));
        assert_eq!(m.means[1].1, None);
        assert_eq!(aggregate_image_scores(&js, "ours").unwrap().means[0].1, Some(5.0));
        assert_eq!(aggregate_image_scores(&js, "clip"), Err(EvalError::EmptyGroup("clip".into())));
        let cols: Vec<_> = m.means.iter().map(|(c, _)| c.as_str()).collect();
        assert_eq!(cols, ["presence", "localization", "appropriateness", "aesthetics", "consistency", "cohesion"]);
        assert_eq!(image_systems(&js), ["ours", "vanilla"]);
    }

    #[test]
    fn histogram_examples() {
        let h = score_histogram([1, 3, 5, 2]);
        assert_eq!(h.counts, [1, 1, 1, 0, 1]);
        assert_eq!(h.above_average, Some(0.5));
        let h = score_histogram([]);
        assert_eq!(h.counts, [0; 5]);
        assert_eq!(h.above_average, None);
        assert_eq!(score_histogram([0, 6, 3]).out_of_range, 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (3usize..30).prop_flat_map(|n| {
                (proptest::collection::vec(-100.0f64..100.0, n), proptest::collection::vec(-100.0f64..100.0, n))
            })
        }

        proptest! {
            #[test]
            fn symmetric_and_affine_invariant((xs, ys) in paired(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
                let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((pearson(&ys, &xs).unwrap() - r).abs() <= 1e-12);
                let tx: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                prop_assert!((pearson(&tx, &ys).unwrap() - r).abs() <= 1e-12);
            }

            #[test]
            fn histogram_counts_sum(scores in proptest::collection::vec(1u8..=5, 0..100)) {
                let h = score_histogram(scores.iter().copied());
                prop_assert_eq!(h.n as usize, scores.len());
                let mut rev = scores.clone();
                rev.reverse();
                prop_assert_eq!(score_histogram(rev), h);
            }

            #[test]
            fn means_bounded_and_stable(scores in proptest::collection::vec(1u8..=5, 1..40)) {
                let js: Vec<_> = scores.iter().map(|&s| img("sys", "cohesion", s)).collect();
                let m = aggregate_image_scores(&js, "sys").unwrap().means[5].1.unwrap();
                prop_assert!((1.0..=5.0).contains(&m));
                // a judgment equal to the mean leaves it unchanged when the mean is integral
                if m.fract() == 0.0 {
                    let mut more = js.clone();
                    more.push(img("sys", "cohesion", m as u8));
                    let m2 = aggregate_image_scores(&more, "sys").unwrap().means[5].1.unwrap();
                    prop_assert!((m2 - m).abs() < 1e-12);
                }
            }
        }
    }
}
