//! Aligned text rendering of correlation tables, per-system criterion means,
//! score histograms and corpus statistics.

use crossalign_core::bench::CorpusStats;
use crossalign_core::eval::{CellStatus, CorrelationCell, CorrelationTable, CriterionMeans, ScoreHistogram};
use crossalign_core::Rubric;

pub const NO_DATA: &str = "no data";

/// A plain text table: first column left-aligned, the rest right-aligned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// An empty table renders its header followed by a single `no data` row.
    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate().take(cols) {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, w) in widths.iter().enumerate() {
                let cell = cells.get(i).map(String::as_str).unwrap_or("");
                if i > 0 {
                    s.push_str(" | ");
                }
                if i == 0 {
                    s.push_str(&format!("{cell:<w$}"));
                } else {
                    s.push_str(&format!("{cell:>w$}"));
                }
            }
            s.trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        if self.rows.is_empty() {
            out.push_str(NO_DATA);
            out.push('\n');
        }
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

fn cell_text(cell: &CorrelationCell) -> String {
    match (cell.status, cell.r) {
        (CellStatus::Computed, Some(r)) => format!("{r:.3}"),
        (CellStatus::DegenerateVariance, _) => "const".into(),
        _ => "n/a".into(),
    }
}

pub fn correlation_header(rubric: Rubric) -> Vec<String> {
    let mut h = vec!["Metric".to_string()];
    h.extend(rubric.titles().map(String::from));
    h.push("All".into());
    h
}

/// One row per metric, columns in the rubric's criterion order then `All`.
pub fn correlation_table(rubric: Rubric, rows: &[(String, CorrelationTable)]) -> TextTable {
    let mut t = TextTable::new(correlation_header(rubric));
    for (metric, table) in rows {
        let mut row = vec![metric.clone()];
        row.extend(rubric.criteria().map(|c| table.cell(c).map(cell_text).unwrap_or_else(|| "n/a".into())));
        row.push(cell_text(&table.all));
        t.push(row);
    }
    t
}

pub fn aggregation_header(rubric: Rubric) -> Vec<String> {
    let mut h = vec!["System".to_string()];
    h.extend(rubric.titles().map(String::from));
    h
}

/// One row per system with means to two decimals.
pub fn aggregation_table(rubric: Rubric, rows: &[CriterionMeans]) -> TextTable {
    let mut t = TextTable::new(aggregation_header(rubric));
    for m in rows {
        let mut row = vec![m.system.clone()];
        row.extend(rubric.criteria().map(|c| {
            m.means
                .iter()
                .find(|(id, _)| id == c)
                .and_then(|(_, v)| *v)
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "n/a".into())
        }));
        t.push(row);
    }
    t
}

pub fn histogram_table(rows: &[(String, ScoreHistogram)]) -> TextTable {
    let mut t = TextTable::new(["Group", "1", "2", "3", "4", "5", "n", ">=3"]);
    for (name, h) in rows {
        let mut row = vec![name.clone()];
        row.extend(h.counts.iter().map(u64::to_string));
        row.push(h.n.to_string());
        row.push(h.above_average.map(|r| format!("{r:.2}")).unwrap_or_else(|| "undefined".into()));
        t.push(row);
    }
    t
}

pub fn stats_table(rows: &[(String, CorpusStats)]) -> TextTable {
    let mut t = TextTable::new(["Corpus", "Count", "Words", "Objects"]);
    for (name, s) in rows {
        let objects = if s.objects_heuristic { format!("{:.2}*", s.mean_objects) } else { format!("{:.2}", s.mean_objects) };
        t.push(vec![name.clone(), s.count.to_string(), format!("{:.2}", s.mean_words), objects]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossalign_core::eval::AllMode;

    fn first_line(s: &str) -> Vec<String> {
        s.lines().next().unwrap().split('|').map(|c| c.trim().to_string()).collect()
    }

    #[test]
    fn correlation_columns() {
        let cell = CorrelationCell { n: 10, status: CellStatus::Computed, r: Some(0.2114), p_value: None };
        let table = CorrelationTable {
            rubric: Rubric::Caption,
            criteria: Rubric::Caption.criteria().map(|c| (c.to_string(), cell)).collect(),
            all: cell,
            all_mode: AllMode::Pooled,
        };
        let out = correlation_table(Rubric::Caption, &[("ours".into(), table)]).render();
        assert_eq!(
            first_line(&out),
            ["Metric", "Adequacy", "Fluency", "Consistency", "Relevance", "Context", "Appropriateness", "All"]
        );
        assert!(out.lines().nth(2).unwrap().ends_with("0.211"));
    }

    #[test]
    fn aggregation_columns() {
        let m = CriterionMeans {
            system: "vanilla".into(),
            rubric: Rubric::Image,
            means: Rubric::Image.criteria().map(|c| (c.to_string(), Some(3.5))).collect(),
            n: 2,
        };
        let out = aggregation_table(Rubric::Image, &[m]).render();
        assert_eq!(
            first_line(&out),
            ["System", "Presence", "Localization", "Appropriateness", "Aesthetics", "Consistency", "Cohesion"]
        );
        assert_eq!(out.lines().nth(2).unwrap().matches("3.50").count(), 6);
    }

    #[test]
    fn empty_renders_sentinel() {
        let out = correlation_table(Rubric::Caption, &[]).render();
        assert_eq!(out.lines().count(), 3);
        assert_eq!(out.lines().nth(2).unwrap().trim(), NO_DATA);
        assert!(aggregation_table(Rubric::Image, &[]).render().contains(NO_DATA));
    }
}
